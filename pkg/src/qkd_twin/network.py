"""
Socket sessions of the board link: the board twin serves one command socket, one data socket
per stream and a detections socket; the PC twin connects to all of them.
"""
import dataclasses
import logging
import socket
import threading
import time
from concurrent.futures import Future
from typing import Callable, Optional

from qkd_twin import __version__
from qkd_twin.encoding import ChannelOffsets, ClockConfig, FrameBatch
from qkd_twin.memory import StreamId, Underrun
from qkd_twin.qstates import QscState, TickClock
from qkd_twin.rng_source import DetectionReport
from qkd_twin.stream_engine import BufferFull, RingBufferConfig, StreamPair
from qkd_twin.transport import (
    PROTOCOL_VERSION,
    CommandMessage,
    DataFrame,
    EndpointConfig,
    FrameDecoder,
    FrameError,
    MessageDecoder,
    Opcode,
    SequenceGap,
    encode_frame,
)

logger = logging.getLogger(__name__)

RECV_BYTES = 1 << 20


class NotReady(RuntimeError):
    pass


class SessionError(RuntimeError):
    pass


class MessageChannel:
    """Command messages over one connected socket, with byte counters."""

    def __init__(self, sock: socket.socket, name: str = "command"):
        self.sock = sock
        self.name = name
        self.decoder = MessageDecoder()
        self.bytes_sent = 0
        self.bytes_received = 0
        self._send_lock = threading.Lock()

    def send(self, msg: CommandMessage):
        data = msg.to_bytes()
        with self._send_lock:
            self.sock.sendall(data)
            self.bytes_sent += len(data)

    def receive(self) -> list[CommandMessage]:
        data = self.sock.recv(RECV_BYTES)
        if not data:
            raise SessionError(f"{self.name} connection closed by peer")
        self.bytes_received += len(data)
        return self.decoder.feed(data)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class CommandClient:
    """
    Client end of a command socket. Requests wait for their ACK or ERROR; requests coming
    from the server are answered by ``handlers``, which map an opcode to a callable returning
    the ACK parameters.
    """

    def __init__(self, host: str, port: int, handlers: Optional[dict] = None, name="command"):
        self.address = (host, port)
        self.name = name
        self.handlers = handlers or {}
        self.channel: Optional[MessageChannel] = None
        self.pending: dict[int, Future] = {}
        self.error: Optional[BaseException] = None
        self._lock = threading.Lock()
        self._reader: Optional[threading.Thread] = None

    def connect(self, timeout: float = 5):
        sock = socket.create_connection(self.address, timeout=timeout)
        sock.settimeout(None)
        self.channel = MessageChannel(sock, self.name)
        self._reader = threading.Thread(
            target=self._read_loop, name=f"qtw-{self.name}", daemon=True
        )
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                for msg in self.channel.receive():
                    self._dispatch(msg)
        except (OSError, SessionError, FrameError) as e:
            self.error = e
            with self._lock:
                pending, self.pending = self.pending, {}
            for future in pending.values():
                future.set_exception(SessionError(f"{self.name} session lost: {e}"))

    def _dispatch(self, msg: CommandMessage):
        if msg.is_reply:
            with self._lock:
                future = self.pending.pop(msg.id, None)
            if future is None:
                logger.warning(f"Unexpected {msg.opcode.value} for message {msg.id}")
            else:
                future.set_result(msg)
            return
        handler = self.handlers.get(msg.opcode)
        try:
            if handler is None:
                raise ValueError(f"No handler for {msg.opcode.value}")
            reply = msg.ack(**(handler(msg) or {}))
        except Exception as e:
            logger.warning(f"{msg.opcode.value} failed: {e}")
            reply = msg.error(e)
        self.channel.send(reply)

    def request(self, opcode, timeout: Optional[float] = 10, **params) -> CommandMessage:
        """
        Send a request and wait for its reply.

        Raises
        ------
        SessionError
            On an ERROR reply or a lost connection
        """
        msg = CommandMessage.request(opcode, **params)
        future = Future()
        with self._lock:
            self.pending[msg.id] = future
        self.channel.send(msg)
        reply = future.result(timeout)
        if reply.opcode is Opcode.ERROR:
            raise SessionError(f"{reply.params.get('error')}: {reply.params.get('message')}")
        return reply

    def close(self):
        if self.channel is not None:
            self.channel.close()
        if self._reader is not None:
            self._reader.join(1)


class PcClient(CommandClient):
    """
    PC twin connection: command session plus one data socket per stream.

    Parameters
    ----------
    endpoint : EndpointConfig
    on_need_block : Callable[[StreamId, int], None]
        Receives block requests from the board
    on_detections : Callable[[DetectionReport], None]
        Receives detection reports relayed by the board
    """

    def __init__(
        self,
        endpoint: EndpointConfig,
        on_need_block: Callable[[StreamId, int], None],
        on_detections: Optional[Callable[[DetectionReport], None]] = None,
    ):
        handlers = {
            Opcode.NEED_BLOCK: lambda m: on_need_block(
                StreamId(m.params["stream"]), m.params["seq"]
            ),
        }
        if on_detections is not None:
            handlers[Opcode.DETECTIONS] = lambda m: on_detections(
                DetectionReport.from_params(m.params)
            )
        super().__init__(endpoint.host, endpoint.command_port, handlers)
        self.endpoint = endpoint
        self.data: dict[StreamId, socket.socket] = {}
        self.data_bytes = {s: 0 for s in StreamId}
        self._data_locks = {s: threading.Lock() for s in StreamId}

    def open(self, timeout: float = 5) -> CommandMessage:
        """Connect, handshake, then connect the data sockets."""
        self.connect(timeout)
        reply = self.request(
            Opcode.HELLO, version=__version__, protocol=PROTOCOL_VERSION, token=self.endpoint.token
        )
        for stream in StreamId:
            sock = socket.create_connection(
                (self.endpoint.host, self.endpoint.data_port(stream)), timeout=timeout
            )
            sock.settimeout(None)
            self.data[stream] = sock
        return reply

    def send_frame(self, frame: DataFrame):
        data = encode_frame(frame)
        with self._data_locks[frame.stream_id]:
            self.data[frame.stream_id].sendall(data)
            self.data_bytes[frame.stream_id] += len(data)

    def close(self):
        for sock in self.data.values():
            sock.close()
        super().close()


def send_report(client: CommandClient, report: DetectionReport, timeout: float = 10):
    """Deliver a detection report to the board's detections socket."""
    return client.request(Opcode.DETECTIONS, timeout=timeout, **report.to_params())


class BoardServer:
    """
    Board twin behind its sockets: command session, data readers feeding the ingest roles,
    the feed roles, and the emulator clock driving the QStates controller.

    Parameters
    ----------
    endpoint : EndpointConfig
        Port 0 lets the OS choose; the bound ports are written back to ``endpoint``
    cfg : RingBufferConfig
    real_time : bool
        Throttle the emulator to the configured repetition rate. In both modes the emulator
        waits for a pending half refill while the staging buffer still holds data; in real
        time a half that cannot be refilled from an empty buffer is an underrun, otherwise the
        emulator waits for data (backpressure) and runs as fast as the link allows
    sink : Callable[[FrameBatch], None], optional
        Receives every batch of emitted slots
    strict : bool
        Halt on reserved symbol codes
    """

    def __init__(
        self,
        endpoint: EndpointConfig = EndpointConfig(),
        cfg: RingBufferConfig = RingBufferConfig(),
        real_time: bool = False,
        sink: Optional[Callable[[FrameBatch], None]] = None,
        strict: bool = True,
    ):
        self.endpoint = endpoint
        self.cfg = cfg
        self.real_time = real_time
        self.sink = sink
        self.strict = strict
        clock = ClockConfig()
        offsets = ChannelOffsets()
        self.params = {
            "clock_hz": clock.clock_hz,
            "slot_ticks": clock.slot_ticks,
            "laser_offset": offsets.laser,
            "pol_offset": offsets.polarization,
            "intensity_offset": offsets.intensity,
            "run_slots": None,
        }
        self.pair = StreamPair(self._send_request, cfg)
        self.clock: Optional[TickClock] = None
        self.command: Optional[MessageChannel] = None
        self.errors: list[str] = []
        self.underruns = 0
        self.sequence_gaps = 0
        self.data_bytes = {s: 0 for s in StreamId}
        self.wire_bytes = {s: 0 for s in StreamId}
        self.finished = threading.Event()
        self._started = False
        self._stop = threading.Event()
        self._servers: dict[str, socket.socket] = {}
        self._threads: list[threading.Thread] = []

    # sockets

    def listen(self):
        ports = {
            "command_port": self.endpoint.command_port,
            "pol_port": self.endpoint.pol_port,
            "decoy_port": self.endpoint.decoy_port,
            "detections_port": self.endpoint.detections_port,
        }
        bound = {}
        for key, port in ports.items():
            server = socket.create_server((self.endpoint.host, port))
            self._servers[key] = server
            bound[key] = server.getsockname()[1]
        self.endpoint = dataclasses.replace(self.endpoint, **bound)
        self._spawn("session", self._session)
        return self.endpoint

    def _spawn(self, name: str, target, *args):
        thread = threading.Thread(target=target, args=args, name=f"qtw-board-{name}", daemon=True)
        thread.start()
        self._threads.append(thread)

    def _session(self):
        conn, addr = self._servers["command_port"].accept()
        logger.info(f"Command session from {addr}")
        self.command = MessageChannel(conn)
        try:
            if not self._handshake():
                return
            for stream in StreamId:
                key = "pol_port" if stream is StreamId.POL else "decoy_port"
                data_conn, _ = self._servers[key].accept()
                self._spawn(f"data-{stream.name.lower()}", self._read_data, stream, data_conn)
            self._spawn("detections", self._serve_detections)
            for engine in self.pair:
                name = f"ingest-{engine.stream_id.name.lower()}"
                self._spawn(name, engine.ingest.serve, self._stop)
            self.pair.startup()
            self._command_loop()
        except (OSError, SessionError, FrameError) as e:
            if not self._stop.is_set():
                self._abort(f"Command session lost: {e}")

    def _handshake(self) -> bool:
        while True:
            messages = self.command.receive()
            if messages:
                break
        hello, rest = messages[0], messages[1:]
        try:
            if hello.opcode is not Opcode.HELLO:
                raise SessionError(f"Expected HELLO, got {hello.opcode.value}")
            if self.endpoint.token is not None and hello.params.get("token") != self.endpoint.token:
                raise SessionError("Handshake token rejected")
            if hello.params.get("protocol") != PROTOCOL_VERSION:
                raise SessionError(f"Unsupported protocol {hello.params.get('protocol')}")
        except SessionError as e:
            logger.error(f"Handshake failed: {e}")
            self.command.send(hello.error(e))
            self.command.close()
            return False
        self.command.send(hello.ack(version=__version__, protocol=PROTOCOL_VERSION))
        for msg in rest:
            self._reply(msg)
        return True

    def _send_request(self, msg: CommandMessage):
        if self.command is None:
            raise SessionError("No command session")
        self.command.send(msg)

    def _command_loop(self):
        while not self._stop.is_set():
            for msg in self.command.receive():
                self._reply(msg)

    def _reply(self, msg: CommandMessage):
        if msg.is_reply:
            if msg.opcode is Opcode.ERROR:
                logger.error(f"PC rejected message {msg.id}: {msg.params.get('message')}")
            return
        try:
            reply = msg.ack(**self.handle(msg))
        except Exception as e:
            logger.warning(f"{msg.opcode.value} rejected: {e}")
            reply = msg.error(e)
        self.command.send(reply)

    # commands

    def handle(self, msg: CommandMessage) -> dict:
        """Execute one command and return the ACK parameters."""
        match msg.opcode:
            case Opcode.SET_PARAM:
                return self.set_params(**msg.params)
            case Opcode.START:
                return self.start()
            case Opcode.STOP:
                return self.stop()
            case Opcode.STATUS:
                return self.status()
        raise ValueError(f"The board does not accept {msg.opcode.value}")

    def set_params(self, **params) -> dict:
        if self._started:
            raise NotReady("Parameters are locked once the run has started")
        unknown = set(params) - set(self.params)
        if unknown:
            raise ValueError(f"Unknown parameters {sorted(unknown)}")
        merged = {**self.params, **params}
        # validates before anything is stored
        self._qsc_state(merged)
        self.params = merged
        return dict(self.params)

    def _qsc_state(self, params: dict) -> QscState:
        clock = ClockConfig(float(params["clock_hz"]), int(params["slot_ticks"]))
        offsets = ChannelOffsets(
            int(params["laser_offset"]), int(params["pol_offset"]), int(params["intensity_offset"])
        )
        run_slots = params["run_slots"]
        return QscState(
            clock,
            offsets,
            strict=self.strict,
            run_slots=None if run_slots is None else int(run_slots),
        )

    def start(self) -> dict:
        if self._started:
            raise NotReady("The run has already been started")
        occupancy = {e.stream_id.name: e.buffer.occupancy() for e in self.pair}
        if any(n < self.cfg.n_blocks for n in occupancy.values()):
            raise NotReady(f"Buffers are not preloaded ({occupancy} of {self.cfg.n_blocks} blocks)")
        state = self._qsc_state(self.params)
        self.pair.qsc.state = state
        self.clock = TickClock(state.clock, real_time=self.real_time)
        self.pair.prime()
        for engine in self.pair:
            name = f"feed-{engine.stream_id.name.lower()}"
            self._spawn(name, engine.feed.serve, self._stop, 0.05, True)
        self._started = True
        self.pair.qsc.start()
        self._spawn("emulator", self._emulate)
        logger.info(f"Run started at {state.clock.repetition_hz / 1e6:.1f} MHz")
        return {"slot_index": state.slot_index}

    def stop(self) -> dict:
        """
        Halt the emulator. The reply does not wait for the batch in progress; STATUS reports
        ``finished`` once the emulator has drained it.
        """
        self.pair.qsc.stop()
        return self.status()

    def status(self) -> dict:
        state = self.pair.qsc.state
        return {
            "params": dict(self.params),
            "running": state.running,
            "finished": self.finished.is_set(),
            "slot_index": state.slot_index,
            "underruns": self.underruns,
            "sequence_gaps": self.sequence_gaps,
            "counters": self.pair.counters(),
            "errors": list(self.errors),
        }

    # data plane

    def _read_data(self, stream: StreamId, conn: socket.socket):
        decoder = FrameDecoder(max_length=self.cfg.block_bytes)
        ingest = self.pair[stream].ingest
        try:
            while not self._stop.is_set():
                data = conn.recv(RECV_BYTES)
                if not data:
                    return
                self.wire_bytes[stream] += len(data)
                try:
                    frames = decoder.feed(data)
                except FrameError as e:
                    # blocks that arrived whole before the fault are still good
                    for frame in e.frames:
                        self._accept(ingest, frame)
                    raise
                for frame in frames:
                    self._accept(ingest, frame)
        except SequenceGap as e:
            self.sequence_gaps += 1
            self._abort(f"{stream.name} stream aborted: {e}")
        except (FrameError, OSError) as e:
            if not self._stop.is_set():
                self._abort(f"{stream.name} data session lost: {e}")
        finally:
            conn.close()

    def _accept(self, ingest, frame: DataFrame):
        self.data_bytes[frame.stream_id] += frame.length
        self._ingest(ingest, frame)

    def _ingest(self, ingest, frame: DataFrame):
        while True:
            try:
                ingest.on_frame(frame.seq, frame.payload)
                return
            except BufferFull:
                # stop reading until the feed role frees a block
                while not ingest.buffer.wait_for_space(0.05):
                    if self._stop.is_set():
                        return

    def _serve_detections(self):
        server = self._servers["detections_port"]
        server.settimeout(0.1)
        while not self._stop.is_set():
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            conn.settimeout(None)
            channel = MessageChannel(conn, "detections")
            self._spawn("detections-session", self._relay_detections, channel)

    def _relay_detections(self, channel: MessageChannel):
        try:
            while not self._stop.is_set():
                for msg in channel.receive():
                    if msg.opcode is not Opcode.DETECTIONS:
                        channel.send(msg.error(ValueError(f"Unexpected {msg.opcode.value}")))
                        continue
                    self._send_request(CommandMessage.request(Opcode.DETECTIONS, **msg.params))
                    channel.send(msg.ack(count=len(msg.params.get("indices", []))))
        except (OSError, SessionError, FrameError):
            pass
        finally:
            channel.close()

    # emulator

    def _memories_ready(self) -> bool:
        return all(e.mem.available_words() >= e.mem.half_words for e in self.pair)

    def _await_halves(self, poll: float = 1e-4) -> bool:
        """
        Wait until both memories hold a full half to read. The wall clock only throttles: a
        refill that is late while its staging buffer still holds data is waited for.

        Returns
        -------
        bool
            False if the run was stopped while waiting

        Raises
        ------
        Underrun
            In real time, when a memory is short of a half and its staging buffer is empty
        """
        qsc = self.pair.qsc
        while not self._memories_ready():
            if self._stop.is_set() or not qsc.state.running:
                return False
            for engine in self.pair:
                if engine.feed.error is not None:
                    raise engine.feed.error
                if self.real_time and self._starved(engine):
                    engine.buffer.underruns += 1
                    raise Underrun(
                        f"{engine.stream_id.name} memory is short of a half and its staging "
                        "buffer is empty"
                    )
            time.sleep(poll)
        return True

    @staticmethod
    def _starved(engine) -> bool:
        mem = engine.mem
        if mem.available_words() >= mem.half_words or engine.buffer.wait_readable(0):
            return False
        # the feed may have finished its copy between the two checks
        return mem.available_words() < mem.half_words

    def _emulate(self):
        qsc = self.pair.qsc
        batch = qsc.slots_per_half
        try:
            while qsc.state.running and not self._stop.is_set():
                if not self._await_halves():
                    return
                remaining = qsc.state.remaining()
                n = batch if remaining is None else min(batch, remaining)
                self.clock.advance(n * qsc.state.clock.slot_ticks)
                frames = qsc.advance(n)
                if self.sink is not None:
                    self.sink(frames)
                for engine in self.pair:
                    if engine.feed.error is not None:
                        raise engine.feed.error
        except Underrun as e:
            self.underruns += 1
            self.errors.append(f"Underrun: {e}")
            logger.error(f"Underrun at slot {qsc.state.slot_index}: {e}")
        except Exception as e:
            self._abort(f"Emulator stopped: {e}")
        finally:
            qsc.stop()
            self.finished.set()

    def _abort(self, reason: str):
        logger.error(reason)
        self.errors.append(reason)
        self.pair.qsc.stop()
        if not self._started:
            self.finished.set()

    def traffic(self) -> tuple[int, int]:
        """
        Data-plane bytes received, frames still in flight included, and command-plane bytes
        exchanged so far. ``data_bytes`` counts the payload of whole frames only.
        """
        control = 0
        if self.command is not None:
            control = self.command.bytes_sent + self.command.bytes_received
        return sum(self.wire_bytes.values()), control

    def close(self):
        self._stop.set()
        self.pair.qsc.stop()
        if self.command is not None:
            self.command.close()
        for server in self._servers.values():
            server.close()
        for thread in self._threads:
            if thread is not threading.current_thread():
                thread.join(1)
