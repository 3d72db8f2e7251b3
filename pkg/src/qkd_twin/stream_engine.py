"""
Dual-core stream twin.

The ingest role (CPU0) writes whole blocks received from the transport into a staging ring
buffer. The feed role (CPU1) answers every memory-manager interrupt by copying one half-memory
chunk out of the buffer and, whenever a block is used up, tells the ingest role so it can ask
the source for a fresh block.
"""
import logging
import queue
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from qkd_twin.constants import DEFAULT_BLOCK_BYTES, DEFAULT_CHUNK_BYTES, DEFAULT_N_BLOCKS
from qkd_twin.memory import (
    BlockMemory,
    InterruptEvent,
    InterruptKind,
    LengthError,
    StreamId,
    Underrun,
    freed_half,
)
from qkd_twin.qstates import QscState, QStatesController
from qkd_twin.transport import CommandMessage

logger = logging.getLogger(__name__)


class BufferFull(RuntimeError):
    pass


class PreloadTimeout(TimeoutError):
    pass


class BlockState(Enum):
    EMPTY = "empty"
    FILLING = "filling"
    READY = "ready"
    READING = "reading"


@dataclass(frozen=True)
class RingBufferConfig:
    """
    Parameters
    ----------
    block_bytes : int
        Size of one block, by default 18.75 MiB
    n_blocks : int
        Number of blocks, by default 10
    chunk_bytes : int
        Size of one feed operation, half of the block memory (64 KiB by default)
    """

    block_bytes: int = DEFAULT_BLOCK_BYTES
    n_blocks: int = DEFAULT_N_BLOCKS
    chunk_bytes: int = DEFAULT_CHUNK_BYTES

    def __post_init__(self):
        if min(self.block_bytes, self.n_blocks, self.chunk_bytes) <= 0:
            raise ValueError("Buffer sizes must be positive")
        if self.block_bytes % self.chunk_bytes:
            raise ValueError(
                f"block_bytes ({self.block_bytes}) must be a multiple of chunk_bytes "
                f"({self.chunk_bytes})"
            )

    @property
    def total_bytes(self) -> int:
        return self.n_blocks * self.block_bytes

    @property
    def chunks_per_block(self) -> int:
        return self.block_bytes // self.chunk_bytes


@dataclass
class Block:
    state: BlockState = BlockState.EMPTY
    seq: Optional[int] = None
    data: Optional[NDArray] = None
    read_offset: int = 0


class RingBuffer:
    """
    Staging buffer of one stream. Single producer (ingest role), single consumer (feed role);
    the producer only touches the block it is filling and the consumer only the block it is
    reading, state transitions happen under the lock.
    """

    def __init__(self, cfg: RingBufferConfig = RingBufferConfig(), stream_id=StreamId.POL):
        self.cfg = cfg
        self.stream_id = StreamId(stream_id)
        self.blocks = [Block() for _ in range(cfg.n_blocks)]
        self.write_index = 0
        self.read_index = 0
        self.next_seq = 0
        self.blocks_ingested = 0
        self.blocks_consumed = 0
        self.chunks_fed = 0
        self.underruns = 0
        self._lock = threading.Lock()
        self._changed = threading.Condition(self._lock)

    def occupancy(self) -> int:
        """Blocks holding unread data."""
        with self._lock:
            return sum(b.state in (BlockState.READY, BlockState.READING) for b in self.blocks)

    def states(self) -> list[BlockState]:
        with self._lock:
            return [b.state for b in self.blocks]

    def has_space(self) -> bool:
        with self._lock:
            return self.blocks[self.write_index].state is BlockState.EMPTY

    def wait_for_space(self, timeout: Optional[float] = None) -> bool:
        with self._changed:
            return self._changed.wait_for(
                lambda: self.blocks[self.write_index].state is BlockState.EMPTY, timeout
            )

    def wait_full(self, timeout: Optional[float] = None) -> bool:
        with self._changed:
            return self._changed.wait_for(
                lambda: all(b.state is BlockState.READY for b in self.blocks), timeout
            )

    def _readable(self) -> bool:
        return self.blocks[self.read_index].state in (BlockState.READY, BlockState.READING)

    def wait_readable(self, timeout: Optional[float] = None) -> bool:
        with self._changed:
            return self._changed.wait_for(self._readable, timeout)

    def counters(self) -> dict:
        return {
            "blocks_ingested": self.blocks_ingested,
            "blocks_consumed": self.blocks_consumed,
            "chunks_fed": self.chunks_fed,
            "underruns": self.underruns,
            "occupancy": self.occupancy(),
        }


def _check_stream(buffer: RingBuffer, stream_id):
    if StreamId(stream_id) != buffer.stream_id:
        raise ValueError(f"Buffer serves {buffer.stream_id.name}, not {StreamId(stream_id).name}")


def ingest_block(buffer: RingBuffer, stream_id, payload, seq: Optional[int] = None):
    """
    Write one block into the next buffer slot and mark it READY.

    Raises
    ------
    BufferFull
        If the next slot still holds unread data (backpressure toward the transport)
    LengthError
        If the payload is not exactly one block
    """
    _check_stream(buffer, stream_id)
    data = payload if isinstance(payload, np.ndarray) else np.frombuffer(payload, dtype=np.uint8)
    if data.size != buffer.cfg.block_bytes:
        raise LengthError(f"Expected a {buffer.cfg.block_bytes} byte block, got {data.size}")
    with buffer._lock:
        block = buffer.blocks[buffer.write_index]
        if block.state is not BlockState.EMPTY:
            raise BufferFull(f"No empty block in the {buffer.stream_id.name} buffer")
        block.state = BlockState.FILLING
    try:
        if block.data is None:
            block.data = np.empty(buffer.cfg.block_bytes, dtype=np.uint8)
        block.data[:] = data
    except BaseException:
        with buffer._changed:
            block.state = BlockState.EMPTY
            buffer._changed.notify_all()
        raise
    with buffer._changed:
        block.seq = buffer.next_seq if seq is None else seq
        block.read_offset = 0
        block.state = BlockState.READY
        buffer.next_seq = block.seq + 1
        buffer.write_index = (buffer.write_index + 1) % buffer.cfg.n_blocks
        buffer.blocks_ingested += 1
        buffer._changed.notify_all()


def _feed(buffer: RingBuffer, mem: BlockMemory, half: int, tick: int) -> Optional[InterruptEvent]:
    with buffer._lock:
        block = buffer.blocks[buffer.read_index]
        if block.state is BlockState.READY:
            block.state = BlockState.READING
        elif block.state is not BlockState.READING:
            buffer.underruns += 1
            raise Underrun(f"No ready data in the {buffer.stream_id.name} buffer")
    offset = block.read_offset
    mem.host_write_half(half, block.data[offset : offset + buffer.cfg.chunk_bytes])
    event = None
    with buffer._changed:
        block.read_offset += buffer.cfg.chunk_bytes
        buffer.chunks_fed += 1
        if block.read_offset == buffer.cfg.block_bytes:
            event = InterruptEvent(InterruptKind.BLOCK_CONSUMED, buffer.stream_id, tick, block.seq)
            block.state = BlockState.EMPTY
            block.seq = None
            block.read_offset = 0
            buffer.read_index = (buffer.read_index + 1) % buffer.cfg.n_blocks
            buffer.blocks_consumed += 1
            buffer._changed.notify_all()
    return event


def feed_chunk(
    buffer: RingBuffer, stream_id, interrupt: InterruptEvent, mem: BlockMemory
) -> Optional[InterruptEvent]:
    """
    Copy one chunk into the memory half freed by ``interrupt``.

    Returns
    -------
    Optional[InterruptEvent]
        ``BLOCK_CONSUMED`` carrying the block sequence number when the chunk was the last of
        its block, otherwise ``None``

    Raises
    ------
    Underrun
        If the buffer holds no ready data
    """
    _check_stream(buffer, stream_id)
    if interrupt.stream_id != buffer.stream_id:
        raise ValueError(
            f"Interrupt for {interrupt.stream_id.name} sent to {buffer.stream_id.name}"
        )
    if mem.half_bytes != buffer.cfg.chunk_bytes:
        raise ValueError(
            f"Chunk size ({buffer.cfg.chunk_bytes}) must equal half the memory ({mem.half_bytes})"
        )
    return _feed(buffer, mem, freed_half(interrupt), interrupt.tick)


def need_block(stream_id, seq: int) -> CommandMessage:
    return CommandMessage.request("NEED_BLOCK", stream=int(StreamId(stream_id)), seq=seq)


def preload(buffer: RingBuffer, stream_id, timeout: Optional[float] = None):
    """
    Block until every buffer slot is READY.

    Raises
    ------
    PreloadTimeout
        If the source does not fill the buffer within ``timeout`` seconds
    """
    _check_stream(buffer, stream_id)
    if not buffer.wait_full(timeout):
        raise PreloadTimeout(
            f"{buffer.stream_id.name} buffer holds {buffer.occupancy()}/{buffer.cfg.n_blocks} "
            f"blocks after {timeout} s"
        )


class IngestRole:
    """
    CPU0 twin: ingests data frames and turns BLOCK_CONSUMED notifications into NEED_BLOCK
    requests.

    Parameters
    ----------
    buffer : RingBuffer
    send : Callable[[CommandMessage], None]
        Sends a control message toward the source
    """

    def __init__(self, buffer: RingBuffer, send: Callable[[CommandMessage], None]):
        self.buffer = buffer
        self.send = send
        self.events: queue.Queue[InterruptEvent] = queue.Queue()
        # requests go out in sequence order; every seq below next_request was already sent
        self.next_request = 0
        self.requests_sent = 0
        self.delivered = 0

    @property
    def stream_id(self) -> StreamId:
        return self.buffer.stream_id

    @property
    def outstanding(self) -> int:
        return self.requests_sent - self.delivered

    def startup(self):
        """Request the blocks that fill the empty buffer."""
        for seq in range(self.buffer.cfg.n_blocks):
            self._request(seq)

    def _request(self, seq: int) -> Optional[CommandMessage]:
        if seq < self.next_request:
            return None
        self.next_request = seq + 1
        self.requests_sent += 1
        msg = need_block(self.stream_id, seq)
        self.send(msg)
        return msg

    def request_refill(self, block_seq: int) -> Optional[CommandMessage]:
        """
        Ask for the block that will take the place of consumed block ``block_seq``. A repeated
        notification for the same block sends nothing and returns ``None``.
        """
        return self._request(block_seq + self.buffer.cfg.n_blocks)

    def on_frame(self, seq: int, payload):
        ingest_block(self.buffer, self.stream_id, payload, seq=seq)
        self.delivered += 1

    def process_events(self) -> int:
        handled = 0
        while True:
            try:
                event = self.events.get_nowait()
            except queue.Empty:
                return handled
            self.handle(event)
            handled += 1

    def handle(self, event: InterruptEvent):
        if event.kind is not InterruptKind.BLOCK_CONSUMED:
            raise ValueError(f"Ingest role cannot handle {event.kind.name}")
        self.request_refill(event.seq)

    def serve(self, stop: threading.Event, poll: float = 0.05):
        """Thread body: forward BLOCK_CONSUMED notifications until ``stop`` is set."""
        while not stop.is_set():
            try:
                event = self.events.get(timeout=poll)
            except queue.Empty:
                continue
            self.handle(event)


class FeedRole:
    """
    CPU1 twin: serves memory-manager interrupts from the staging buffer.

    Parameters
    ----------
    buffer : RingBuffer
    mem : BlockMemory
    notify : Callable[[InterruptEvent], None]
        Receives BLOCK_CONSUMED events (normally ``IngestRole.events.put``)
    """

    def __init__(
        self,
        buffer: RingBuffer,
        mem: BlockMemory,
        notify: Callable[[InterruptEvent], None],
    ):
        if mem.half_bytes != buffer.cfg.chunk_bytes:
            raise ValueError(
                f"Chunk size ({buffer.cfg.chunk_bytes}) must equal half the memory "
                f"({mem.half_bytes})"
            )
        self.buffer = buffer
        self.mem = mem
        self.notify = notify
        self.error: Optional[BaseException] = None
        self.backlog: deque[InterruptEvent] = deque()

    def prime(self):
        """Fill both memory halves before the emulator clock starts."""
        for half in (0, 1):
            event = _feed(self.buffer, self.mem, half, tick=0)
            if event is not None:
                self.notify(event)

    def handle(self, interrupt: InterruptEvent):
        event = feed_chunk(self.buffer, self.buffer.stream_id, interrupt, self.mem)
        if event is not None:
            self.notify(event)

    def process_interrupts(self) -> int:
        """
        Serve every pending interrupt in order. When a feed fails, that interrupt and the ones
        behind it stay in ``backlog`` for the next call.
        """
        self.backlog.extend(self.mem.drain_interrupts())
        handled = 0
        while self.backlog:
            self.handle(self.backlog[0])
            self.backlog.popleft()
            handled += 1
        return handled

    def serve(self, stop: threading.Event, poll: float = 0.05, wait_for_data: bool = False):
        """
        Thread body: wait for interrupts until ``stop`` is set or a feed fails. With
        ``wait_for_data`` an empty buffer holds the interrupt back instead of underrunning and
        the consumer of the memory decides whether the missing half is an underrun.
        """
        while not stop.is_set():
            try:
                event = self.mem.interrupts.get(timeout=poll)
            except queue.Empty:
                continue
            while wait_for_data and not stop.is_set():
                if self.buffer.wait_readable(poll):
                    break
            if stop.is_set():
                return
            try:
                self.handle(event)
            except Exception as e:
                logger.error(f"{self.buffer.stream_id.name} feed role stopped: {e}")
                self.error = e
                return


class StreamEngine:
    """Ring buffer, block memory and both CPU roles of one stream."""

    def __init__(
        self,
        stream_id,
        send: Callable[[CommandMessage], None],
        cfg: RingBufferConfig = RingBufferConfig(),
        total_words: Optional[int] = None,
    ):
        if total_words is None:
            total_words = 2 * cfg.chunk_bytes // 4
        self.stream_id = StreamId(stream_id)
        self.buffer = RingBuffer(cfg, self.stream_id)
        self.mem = BlockMemory(total_words, self.stream_id)
        self.ingest = IngestRole(self.buffer, send)
        self.feed = FeedRole(self.buffer, self.mem, self.ingest.events.put)

    def counters(self) -> dict:
        counters = self.buffer.counters()
        counters["requested"] = self.ingest.requests_sent
        counters["delivered"] = self.ingest.delivered
        return counters


class StreamPair:
    """
    Polarization and decoy engines, identically configured, feeding one QStates controller.
    """

    def __init__(
        self,
        send: Callable[[CommandMessage], None],
        cfg: RingBufferConfig = RingBufferConfig(),
        state: Optional[QscState] = None,
    ):
        self.cfg = cfg
        self.engines = {s: StreamEngine(s, send, cfg) for s in (StreamId.POL, StreamId.DECOY)}
        self.qsc = QStatesController(
            state if state is not None else QscState(),
            self.engines[StreamId.POL].mem,
            self.engines[StreamId.DECOY].mem,
        )

    def __getitem__(self, stream_id) -> StreamEngine:
        return self.engines[StreamId(stream_id)]

    def __iter__(self):
        return iter(self.engines.values())

    def startup(self):
        for engine in self:
            engine.ingest.startup()

    def preload(self, timeout: Optional[float] = None):
        for engine in self:
            preload(engine.buffer, engine.stream_id, timeout)

    def prime(self):
        for engine in self:
            engine.feed.prime()

    def service(self):
        """
        Run both roles of both streams on everything pending (single-threaded mode). A failing
        stream does not keep the other one from being served; the first error is raised after.
        """
        errors = []
        for engine in self:
            try:
                engine.feed.process_interrupts()
            except Exception as e:
                errors.append(e)
            engine.ingest.process_events()
        if errors:
            raise errors[0]

    def cursor_skew(self) -> int:
        """Difference between the symbols consumed from the two streams."""
        cursors = self.qsc.state.cursors
        return abs(cursors[StreamId.POL].consumed - cursors[StreamId.DECOY].consumed)

    def counters(self) -> dict:
        return {engine.stream_id.name.lower(): engine.counters() for engine in self}
