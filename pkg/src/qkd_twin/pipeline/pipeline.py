import logging
import time
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from os import PathLike
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
from serde.toml import to_toml
from tqdm.auto import tqdm

import qkd_twin as qtw
from qkd_twin.encoding import DecoySymbol, FrameBatch
from qkd_twin.memory import BlockMemory, Owner, StreamId, Underrun, freed_half
from qkd_twin.network import BoardServer, CommandClient, PcClient, send_report
from qkd_twin.pipeline.config import Mode, ScenarioOptions
from qkd_twin.qstates import QscState, TickClock
from qkd_twin.receiver import (
    Measurement,
    RunStats,
    compute_stats,
    measure,
    transmit_through,
)
from qkd_twin.report import RunSummary, ThroughputMeter, emit_report, summarize
from qkd_twin.rng_source import (
    BufferDry,
    DetectionReport,
    QrngEmulator,
    RetentionBuffer,
    SiftedRecord,
    SourceNode,
    SourceKind,
    SourceStall,
    SymbolSource,
    make_source,
)
from qkd_twin.sampler import SpdReader, qrng_words, xor_combine
from qkd_twin.stream_engine import PreloadTimeout, StreamPair
from qkd_twin.transport import HEADER_SIZE, CommandMessage, MessageDecoder, Opcode
from qkd_twin.util import check_version, get_paths, headroom_seconds, stream_rate_bps

SEED_NAMES = ("source", "channel", "measurement", "sampler")
SAMPLE_INTERVAL = 0.25  # s, loopback supervision
STOP_TIMEOUT = 5  # s, emulator drain after STOP


@dataclass
class RunResult:
    stats: RunStats
    summary: RunSummary
    exit_code: int
    paths: dict = field(default_factory=dict)


@dataclass
class _Outcome:
    """What a mode runner hands back to ``Scenario.run``."""

    stats: RunStats
    errors: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    receiver: bool = False
    ended_at: Optional[float] = None


class Scenario(ScenarioOptions):
    __doc__ = ScenarioOptions.__doc__

    def __post_init__(self):
        super().__post_init__()
        # make sure versions match within SemVer
        if not check_version(self.version, qtw.__version__):
            raise ValueError(
                f"Input scenario version ({self.version}) is not compatible with installed "
                f"version of `qkd_twin` ({qtw.__version__})."
            )
        self.logger = logging.getLogger("QTW")

    @classmethod
    def from_file(cls, filename: PathLike):
        """
        Load configuration from TOML file

        Parameters
        ----------
        filename : PathLike
            Path to TOML file with configuration settings.

        Raises
        ------
        ValueError
            If the configuration `version` is not compatible with the current `qkd_twin` version.

        Examples
        --------
        >>> Scenario.from_file("soak.toml")
        """
        with open(filename, "rb") as fh:
            config = tomli.load(fh)
        return cls(**config)

    @classmethod
    def from_str(cls, toml_str: str):
        """
        Load configuration from TOML string.

        Parameters
        ----------
        toml_str : str
            String of TOML configuration settings.

        Raises
        ------
        ValueError
            If the configuration `version` is not compatible with the current `qkd_twin` version.
        """
        config = tomli.loads(toml_str)
        return cls(**config)

    def to_file(self, filename: PathLike):
        """
        Save configuration settings to TOML file

        Parameters
        ----------
        filename : PathLike
            Output filename
        """
        path = Path(filename)
        path.write_text(to_toml(self))

    # helpers

    def seeds(self) -> dict:
        """Independent sub-seeds of the master seed, all None for an unseeded run."""
        if self.seed is None:
            return dict.fromkeys(SEED_NAMES)
        children = np.random.SeedSequence(self.seed).spawn(len(SEED_NAMES))
        return {
            name: int(child.generate_state(1, np.uint64)[0])
            for name, child in zip(SEED_NAMES, children)
        }

    @property
    def run_slots(self) -> int:
        return int(round(self.duration * self.clock.clock_config().repetition_hz))

    @property
    def headroom(self) -> float:
        """Seconds the staging buffer feeds one stream without a new block."""
        rate = stream_rate_bps(self.clock.clock_config().repetition_hz)
        return headroom_seconds(self.buffer.n_blocks, self.buffer.block_bytes, rate)

    def qsc_state(self) -> QscState:
        return QscState(
            self.clock.clock_config(),
            self.offsets.channel_offsets(),
            strict=self.memory.strict,
            run_slots=self.run_slots,
        )

    def symbol_source(self, seed=None, clock=time.monotonic) -> SymbolSource:
        kwargs = {"clock": clock} if self.source.kind is SourceKind.QRNG_EMULATED else {}
        source = make_source(self.source.kind, seed, self.source.rate_bps, **kwargs)
        return SymbolSource(source, self.source.bias_config())

    def retention_buffer(self) -> RetentionBuffer:
        return RetentionBuffer(
            self.buffer.block_bytes, self.source.retention_factor * self.buffer.n_blocks
        )

    def _progress(self, quiet: bool):
        return tqdm(
            total=round(self.duration, 3),
            unit="s",
            desc=f"{self.mode.value} {self.name}",
            disable=quiet,
        )

    # run

    def run(self, quiet: bool = False) -> RunResult:
        """Run the scenario and write its report

        Module errors do not propagate: they end the run with a nonzero exit code and are
        recorded in the ``error`` field of the summary.

        Parameters
        ----------
        quiet : bool
            Silence the progress bar, by default False

        Returns
        -------
        RunResult
        """
        outdir = self.output_directory
        fh_logger = logging.FileHandler(
            get_paths(self.name, "debug", output_directory=outdir, filetype=".log")
        )
        fh_logger.setLevel(logging.DEBUG)
        loggers = [self.logger, logging.getLogger("qkd_twin")]
        levels = [lg.level for lg in loggers]
        for lg in loggers:
            lg.addHandler(fh_logger)
            lg.setLevel(logging.DEBUG)
        try:
            return self._run(quiet)
        finally:
            for lg, level in zip(loggers, levels):
                lg.removeHandler(fh_logger)
                lg.setLevel(level)
            fh_logger.close()

    def _run(self, quiet: bool) -> RunResult:
        self.logger.info(f"qkd_twin: v{qtw.__version__}")
        self.logger.info(
            f"Scenario {self.name}: {self.mode.value}, {self.duration:g} s, "
            f"{self.time_model.value}, seed {self.seed}"
        )
        self.logger.debug(f"Staging buffer headroom: {self.headroom:.3f} s per stream")
        started = datetime.now(timezone.utc).isoformat(timespec="seconds")
        t0 = time.perf_counter()
        error = None
        try:
            match self.mode:
                case Mode.TX_LOOPBACK:
                    outcome = self._run_loopback(quiet)
                case Mode.TX_RX_FULL:
                    outcome = self._run_logical(quiet, receiver=True)
                case Mode.SOAK:
                    outcome = self._run_logical(quiet, receiver=False)
                case Mode.QRNG_BOTTOM_UP:
                    outcome = self._run_qrng(quiet)
        except Exception as e:
            self.logger.exception(f"Run aborted: {e}")
            error = f"{type(e).__name__}: {e}"
            outcome = _Outcome(RunStats())
        exit_code = self.exit_code(outcome, error)
        summary = summarize(
            outcome.stats,
            name=self.name,
            mode=self.mode.value,
            version=qtw.__version__,
            seed=self.seed,
            duration=self.duration,
            time_model=self.time_model.value,
            exit_code=exit_code,
            errors=[str(e) for e in outcome.errors],
            error=error,
            preload_bits=int(outcome.extra.pop("preload_bits", 0)),
            ended_at=outcome.ended_at,
            extra=outcome.extra,
            started=started,
            wall_seconds=round(time.perf_counter() - t0, 3),
        )
        paths = emit_report(outcome.stats, summary, self.output_directory)
        if exit_code == 0:
            self.logger.info(f"Run {self.name} passed")
        else:
            self.logger.error(f"Run {self.name} failed (exit code {exit_code})")
        return RunResult(outcome.stats, summary, exit_code, paths)

    def exit_code(self, outcome: _Outcome, error: Optional[str] = None) -> int:
        """
        0 iff the run completed without underruns, sequence gaps or module errors and, for
        runs with a receiver, the QBER is defined and at most ``qber_threshold``.
        """
        stats = outcome.stats
        if error is not None or outcome.errors:
            return 1
        if stats.underruns or stats.sequence_gaps:
            return 1
        if outcome.receiver and (stats.qber is None or stats.qber > self.qber_threshold):
            return 1
        return 0

    ## TX_LOOPBACK: both twins over loopback sockets

    def _run_loopback(self, quiet: bool) -> _Outcome:
        seeds = self.seeds()
        sent_per_level = np.zeros(len(DecoySymbol), dtype=np.int64)

        def count_levels(batch: FrameBatch):
            sent_per_level[:] += np.bincount(batch.decoy, minlength=len(DecoySymbol))

        board = BoardServer(
            self.transport.endpoint(),
            self.buffer.ring_config(self.memory),
            real_time=self.real_time,
            sink=count_levels,
            strict=self.memory.strict,
        )
        endpoint = board.listen()
        node = SourceNode(self.symbol_source(seeds["source"]), self.retention_buffer(), None)
        client = PcClient(
            endpoint,
            on_need_block=lambda stream, seq: node.requests.put((stream, seq)),
            on_detections=node.reports.put,
        )
        node.send = client.send_frame
        # no receiver: a null receiver reports coverage so transmitted chunks are recycled
        null_receiver = CommandClient(endpoint.host, endpoint.detections_port, name="detections")
        meter = ThroughputMeter(self.duration)
        latencies = []
        try:
            node.start()
            client.open()
            null_receiver.connect()
            client.request(
                Opcode.SET_PARAM,
                clock_hz=self.clock.clock_hz,
                slot_ticks=self.clock.slot_ticks,
                laser_offset=self.offsets.laser,
                pol_offset=self.offsets.polarization,
                intensity_offset=self.offsets.intensity,
                run_slots=self.run_slots,
            )
            self._wait_preloaded(client)
            meter.baseline(*board.traffic())
            client.request(Opcode.START)
            self.logger.info("Clock started")
            self._supervise(board, client, node, null_receiver, meter, latencies, quiet)
            client.request(Opcode.STOP)
            board.finished.wait(STOP_TIMEOUT)
            status = client.request(Opcode.STATUS).params
        finally:
            node.stop()
            null_receiver.close()
            client.close()
            board.close()
        errors = list(status["errors"])
        for actor in (node, client):
            if actor.error is not None:
                errors.append(f"{type(actor.error).__name__}: {actor.error}")
        ended_at = None
        if status["slot_index"] < self.run_slots:
            ended_at = status["slot_index"] / self.clock.clock_config().repetition_hz
            meter.close(ended_at)
        stats = RunStats(
            sent=status["slot_index"],
            underruns=status["underruns"],
            sequence_gaps=status["sequence_gaps"],
            throughput=meter.frame(),
        )
        _, control_bytes = board.traffic()
        extra = {
            "data_bytes": int(sum(board.data_bytes.values())),
            "control_bytes": int(control_bytes),
            "max_status_latency": round(max(latencies), 6) if latencies else None,
            "source_stalls": node.stalls,
            "sent_per_level": sent_per_level.tolist(),
            "preload_bits": meter.preload_bits["data"],
        }
        return _Outcome(stats, errors, extra, ended_at=ended_at)

    def _wait_preloaded(self, client: PcClient):
        deadline = time.monotonic() + self.buffer.preload_timeout
        while True:
            counters = client.request(Opcode.STATUS).params["counters"]
            occupancy = {name: c["occupancy"] for name, c in counters.items()}
            if all(n == self.buffer.n_blocks for n in occupancy.values()):
                self.logger.info(f"Buffers preloaded ({self.buffer.n_blocks} blocks per stream)")
                return
            if time.monotonic() > deadline:
                raise PreloadTimeout(
                    f"Buffers hold {occupancy} of {self.buffer.n_blocks} blocks after "
                    f"{self.buffer.preload_timeout} s"
                )
            time.sleep(0.05)

    def _supervise(self, board, client, node, null_receiver, meter, latencies, quiet):
        rep = self.clock.clock_config().repetition_hz
        stall_start = time.monotonic() + self.stall.start
        stall_end = stall_start + self.stall.duration
        last_progress = (0, time.monotonic())
        with self._progress(quiet) as pbar:
            while not board.finished.wait(SAMPLE_INTERVAL):
                now = time.monotonic()
                if self.stall.duration > 0:
                    stalled = stall_start <= now < stall_end
                    if stalled != node.paused.is_set():
                        (node.paused.set if stalled else node.paused.clear)()
                        self.logger.warning(f"Source {'stalled' if stalled else 'resumed'}")
                t_req = time.perf_counter()
                status = client.request(Opcode.STATUS).params
                latencies.append(time.perf_counter() - t_req)
                slot_index = status["slot_index"]
                t_logical = slot_index / rep
                meter.record(t_logical, *board.traffic())
                send_report(null_receiver, DetectionReport(covered_until=slot_index))
                pbar.update(round(min(t_logical, self.duration) - pbar.n, 3))
                if node.error is not None or client.error is not None:
                    break
                if slot_index > last_progress[0]:
                    last_progress = (slot_index, now)
                elif now - last_progress[1] > self.buffer.preload_timeout:
                    raise RuntimeError(f"No progress past slot {slot_index}")
        meter.record(board.pair.qsc.state.slot_index / rep, *board.traffic())
        if latencies and max(latencies) > self.transport.status_latency:
            self.logger.warning(
                f"STATUS round trip reached {max(latencies) * 1e3:.1f} ms "
                f"(bound {self.transport.status_latency * 1e3:.0f} ms)"
            )

    ## SOAK and TX_RX_FULL: logical-time run of the real components

    def _run_logical(self, quiet: bool, receiver: bool) -> _Outcome:
        run = LogicalRun(self, receiver)
        with self._progress(quiet) as pbar:
            run.execute(pbar)
        return run.outcome()

    ## QRNG_BOTTOM_UP: detectors to host through the acquisition memory

    def _run_qrng(self, quiet: bool) -> _Outcome:
        seeds = self.seeds()
        rng = np.random.default_rng(seeds["sampler"])
        cfg = self.clock.clock_config()
        opts = self.sampler
        readers = [SpdReader(cfg, opts.threshold, stream) for stream in StreamId]
        for reader in readers:
            reader.trigger()
        mem = BlockMemory(self.memory.total_words, StreamId.POL, initial_owner=Owner.EMULATOR)
        tick_clock = TickClock(cfg, real_time=self.real_time)
        meter = ThroughputMeter(self.duration)
        total_ticks = int(round(self.duration * cfg.clock_hz))
        mean_events = opts.event_rate_hz / cfg.clock_hz
        pending = np.empty(0, dtype=np.uint8)
        drained = []
        aux = [None, None]
        with self._progress(quiet) as pbar:
            for start in range(0, total_ticks, opts.window_ticks):
                n = min(opts.window_ticks, total_ticks - start)
                parts = []
                for reader in readers:
                    count = rng.poisson(mean_events * n)
                    events = np.sort(rng.uniform(start, start + n, count)) * cfg.tick_ns
                    reader.sample(events, n)
                    parts.append(_extract_all(reader))
                for i, reader in enumerate(readers):
                    if aux[i] is None and reader.aux_output is not None:
                        aux[i] = reader.aux_output
                pending = np.concatenate((pending, xor_combine(*parts)))
                words, pending = qrng_words(pending)
                tick_clock.advance(n)
                t = tick_clock.seconds
                for offset in range(0, words.size, mem.half_words):
                    mem.mm_write_advance(words[offset : offset + mem.half_words], tick=start + n)
                    for event in mem.drain_interrupts():
                        half = mem.host_read_half(freed_half(event))
                        drained.append(half)
                        meter.add(t, data_bytes=half.nbytes)
                pbar.update(round(min(t, self.duration) - pbar.n, 3))
        output = np.concatenate(drained) if drained else np.empty(0, dtype="<u4")
        path = get_paths(self.name, "qrng", self.output_directory, ".bin")
        path.write_bytes(output.astype("<u4").tobytes())
        bits = np.unpackbits(output.view(np.uint8))
        self.logger.info(f"Wrote {output.size} QRNG words to {path}")
        extra = {
            "qrng_file": str(path),
            "qrng_bits": int(bits.size),
            "ones_fraction": float(bits.mean()) if bits.size else None,
            "aux_output": aux,
            "undrained_words": int(mem.words_written - mem.words_read),
        }
        return _Outcome(RunStats(throughput=meter.frame()), [], extra)


def _extract_all(reader: SpdReader) -> np.ndarray:
    chunks = []
    while (bits := reader.extract()) is not None:
        chunks.append(bits)
    return np.concatenate(chunks) if chunks else np.empty(0, dtype=np.uint8)


@dataclass
class _Transfer:
    stream: StreamId
    seq: int
    requested: float


class LogicalRun:
    """
    Discrete-event run of the board and PC twins in logical time.

    The memory is consumed one half at a time at the configured repetition rate; block
    requests travel over a link of ``transport.link_bps`` and are served in order. During an
    injected stall no transfer starts. Detection reports go through the command codec in
    batches of ``channel.report_slots`` slots.
    """

    def __init__(self, scenario: Scenario, receiver: bool):
        self.scenario = scenario
        self.receiver = receiver
        self.logger = scenario.logger
        seeds = scenario.seeds()
        self.now = 0.0
        self.t0 = 0.0
        self.started = False
        self.requests: deque[_Transfer] = deque()
        self.link_free = 0.0
        self.in_flight: Optional[tuple] = None
        self.pair = StreamPair(self._on_request, scenario.buffer.ring_config(scenario.memory))
        self.pair.qsc.state = scenario.qsc_state()
        self.retention = scenario.retention_buffer()
        self.node = SourceNode(
            scenario.symbol_source(seeds["source"], clock=lambda: self.now),
            self.retention,
            None,
        )
        self.channel = scenario.channel.channel_model(seeds["channel"])
        self.measurement_model = scenario.channel.measurement_model(seeds["measurement"])
        self.meter = ThroughputMeter(scenario.duration)
        self.tick_clock = TickClock(scenario.clock.clock_config(), real_time=scenario.real_time)
        self.frame_seconds = (HEADER_SIZE + scenario.buffer.block_bytes) * 8 / (
            scenario.transport.link_bps
        )
        self.sent_per_level = np.zeros(len(DecoySymbol), dtype=np.int64)
        self.measurements: list[Measurement] = []
        self.sifted: list[SiftedRecord] = []
        self.report_parts: list[DetectionReport] = []
        self.next_report = scenario.channel.report_slots
        self.decoder = MessageDecoder()
        self.pending: dict[StreamId, deque] = {s: deque() for s in StreamId}
        self.underruns = 0
        self.underrun_at: Optional[float] = None
        self.errors: list[str] = []

    # PC side and link

    def _on_request(self, msg: CommandMessage):
        wire = len(msg.to_bytes()) + len(msg.ack().to_bytes())
        self.meter.add(self._elapsed(self.now), control_bytes=wire)
        stream = StreamId(msg.params["stream"])
        self.requests.append(_Transfer(stream, msg.params["seq"], self.now))

    def _elapsed(self, t: float) -> float:
        # negative (preload) until the clock starts
        return t - self.t0 if self.started else -1.0

    def _start_time(self, at: float) -> float:
        start = max(self.link_free, at)
        stall = self.scenario.stall
        if self.started and stall.duration > 0 and stall.active(self._elapsed(start)):
            start = self.t0 + stall.start + stall.duration
        return start

    def _produce(self, at: float) -> float:
        """Produce one chunk at logical time ``at``; returns the time it became available."""
        source = self.node.symbols.source
        if isinstance(source, QrngEmulator) and source.rate_bps is not None:
            need = 2 * self.retention.chunk_symbols * self.node.symbols.bias.resolution_bits / 8
            self.now = at
            deficit = need - source.credit_bytes()
            if deficit > 0:
                at += deficit * 8 / source.rate_bps
        while True:
            self.now = at
            try:
                if self.node.produce_chunk(timeout=0) < 0:
                    raise RuntimeError("Retention buffer is full of unsifted chunks")
                return at
            except SourceStall:
                # rounding left the credit a few bytes short
                at += 64 * 8 / source.rate_bps

    def _next_transfer(self) -> Optional[tuple]:
        if self.in_flight is None and self.requests:
            transfer = self.requests.popleft()
            start = self._start_time(transfer.requested)
            while True:
                self.now = start
                try:
                    frame = self.retention.serve_block(transfer.stream, transfer.seq, timeout=0)
                    break
                except BufferDry:
                    start = self._start_time(self._produce(start))
            self.link_free = start + self.frame_seconds
            self.in_flight = (self.link_free, frame)
        return self.in_flight

    def advance_link(self, until: float):
        """Deliver every transfer completing by ``until`` and serve waiting interrupts."""
        while True:
            in_flight = self._next_transfer()
            if in_flight is None or in_flight[0] > until:
                return
            done, frame = in_flight
            self.in_flight = None
            self.now = done
            self.meter.add(self._elapsed(done), data_bytes=HEADER_SIZE + frame.length)
            self.pair[frame.stream_id].ingest.on_frame(frame.seq, frame.payload)
            self._serve_pending()

    # board side

    def _serve_pending(self):
        for engine in self.pair:
            queue = self.pending[engine.stream_id]
            while queue and engine.buffer.wait_readable(0):
                engine.feed.handle(queue.popleft())
            engine.ingest.process_events()

    def preload(self):
        self.pair.startup()
        while any(e.buffer.occupancy() < self.scenario.buffer.n_blocks for e in self.pair):
            in_flight = self._next_transfer()
            if in_flight is None:
                raise PreloadTimeout("Block requests dried up before the buffers were full")
            self.advance_link(in_flight[0])
        self.t0 = self.now
        self.started = True
        self.pair.prime()
        self.pair.service()
        self.logger.info(
            f"Buffers preloaded in {self.t0:.3f} s of link time; clock starts at t = 0"
        )

    def execute(self, pbar=None):
        self.preload()
        qsc = self.pair.qsc
        rep = qsc.state.clock.repetition_hz
        batch = qsc.slots_per_half
        qsc.start()
        self.tick_clock.restart()
        while qsc.state.running:
            t = self.t0 + qsc.state.slot_index / rep
            self.advance_link(t)
            self.now = t
            try:
                frames = qsc.advance(batch)
            except Underrun as e:
                self.underruns += 1
                self.underrun_at = self._elapsed(t)
                self.errors.append(f"Underrun at {self.underrun_at:.3f} s: {e}")
                self.logger.error(f"Underrun at t = {self.underrun_at:.3f} s")
                break
            self.tick_clock.advance(len(frames) * qsc.state.clock.slot_ticks)
            self.now = self.t0 + qsc.state.slot_index / rep
            self.emit(frames)
            for engine in self.pair:
                self.pending[engine.stream_id].extend(engine.mem.drain_interrupts())
            self._serve_pending()
            if pbar is not None:
                elapsed = min(self._elapsed(self.now), self.scenario.duration)
                pbar.update(round(elapsed - pbar.n, 3))
        self.flush_reports()

    # receiver side

    def emit(self, frames: FrameBatch):
        self.sent_per_level += np.bincount(frames.decoy, minlength=len(DecoySymbol))
        covered = frames.slot_start + len(frames)
        if self.receiver:
            events = transmit_through(frames, self.channel)
            meas, report = measure(events, self.measurement_model)
            self.measurements.append(meas)
            self.report_parts.append(report)
        else:
            self.report_parts.append(DetectionReport(covered_until=covered))
        if covered >= self.next_report:
            self.flush_reports()

    def flush_reports(self):
        if not self.report_parts:
            return
        parts, self.report_parts = self.report_parts, []
        indices = np.concatenate([p.indices for p in parts])
        basis = None
        if all(p.basis is not None for p in parts):
            basis = np.concatenate([p.basis for p in parts])
        report = DetectionReport(indices, basis, parts[-1].covered_until)
        msg = CommandMessage.request(Opcode.DETECTIONS, **report.to_params())
        wire = msg.to_bytes()
        self.meter.add(self._elapsed(self.now), control_bytes=len(wire) + len(msg.ack().to_bytes()))
        (received,) = self.decoder.feed(wire)
        delivered = DetectionReport.from_params(received.params)
        self.sifted.append(self.retention.select_sifted(delivered))
        step = self.scenario.channel.report_slots
        while self.next_report <= report.covered_until:
            self.next_report += step

    def outcome(self) -> _Outcome:
        sent = self.pair.qsc.state.slot_index
        extra = {
            "sent_per_level": self.sent_per_level.tolist(),
            "link_seconds_preload": round(self.t0, 6),
            "underrun_at": self.underrun_at,
            "reserved_codes": self.pair.qsc.state.reserved_count,
            "retention": self.retention.counters(),
        }
        ended_at = None
        if sent < self.scenario.run_slots:
            ended_at = sent / self.scenario.clock.clock_config().repetition_hz
            self.meter.close(ended_at)
        throughput = self.meter.frame()
        extra["preload_bits"] = self.meter.preload_bits["data"]
        if not self.receiver:
            stats = RunStats(sent=sent, underruns=self.underruns, throughput=throughput)
            return _Outcome(stats, self.errors, extra, ended_at=ended_at)
        measurement = Measurement(
            np.concatenate([m.indices for m in self.measurements] or [np.empty(0, np.uint64)]),
            np.concatenate([m.basis for m in self.measurements] or [np.empty(0, np.uint8)]),
            np.concatenate([m.outcome for m in self.measurements] or [np.empty(0, np.uint8)]),
        )
        stats = compute_stats(
            SiftedRecord.concatenate(self.sifted),
            measurement,
            sent=sent,
            sent_per_level=self.sent_per_level,
            underruns=self.underruns,
            throughput=throughput,
        )
        return _Outcome(stats, self.errors, extra, receiver=True, ended_at=ended_at)


def run_scenario(cfg: ScenarioOptions, quiet: bool = True) -> tuple[RunStats, int]:
    """
    Run a scenario and write its report to ``cfg.output_directory``.

    Returns
    -------
    stats : RunStats
    exit_code : int
        0 iff no underruns, no sequence gaps, no module errors and, with a receiver, a QBER
        at or below the threshold
    """
    scenario = cfg if isinstance(cfg, Scenario) else Scenario.from_str(cfg.to_toml())
    result = scenario.run(quiet=quiet)
    return result.stats, result.exit_code
