"""
Double-buffered block memory (the BRAM twin) and the memory-manager interrupts.

The memory is split into two halves. Whoever does not own a half may not touch it: the
emulator reads (or, bottom-up, writes) the halves it owns and hands each one back to the host
the moment its pointer crosses the half boundary, emitting ``HALF_REACHED`` or ``END_REACHED``.
The host refills (or drains) the freed half and hands it back.
"""
import queue
import threading
from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from qkd_twin.constants import DEFAULT_TOTAL_WORDS, WORD_BYTES


class OwnershipViolation(RuntimeError):
    pass


class Underrun(RuntimeError):
    pass


class Overrun(RuntimeError):
    pass


class LengthError(ValueError):
    pass


class Owner(Enum):
    EMULATOR = "emulator"
    HOST = "host"


class StreamId(IntEnum):
    POL = 0
    DECOY = 1


class InterruptKind(Enum):
    HALF_REACHED = "half_reached"
    END_REACHED = "end_reached"
    BLOCK_CONSUMED = "block_consumed"
    TRIGGER_RESET = "trigger_reset"


@dataclass(frozen=True)
class InterruptEvent:
    kind: InterruptKind
    stream_id: StreamId
    tick: int = 0
    # block sequence number, for BLOCK_CONSUMED
    seq: Optional[int] = None


def freed_half(event: InterruptEvent) -> int:
    """The half handed to the host by a memory-manager interrupt."""
    match event.kind:
        case InterruptKind.HALF_REACHED:
            return 0
        case InterruptKind.END_REACHED:
            return 1
    raise ValueError(f"{event.kind.name} does not free a memory half")


def as_words(payload) -> NDArray:
    """View bytes-like data as little-endian 32-bit words."""
    if isinstance(payload, np.ndarray) and payload.dtype.itemsize == WORD_BYTES:
        return payload.astype("<u4", copy=False).reshape(-1)
    buf = np.frombuffer(payload, dtype=np.uint8) if not isinstance(payload, np.ndarray) else payload
    if buf.size % WORD_BYTES:
        raise LengthError(f"Payload of {buf.size} bytes is not a whole number of words")
    return np.ascontiguousarray(buf).view("<u4")


class BlockMemory:
    """
    Word-addressed two-half memory with read/write pointers and ownership tags.

    Parameters
    ----------
    total_words : int
        Number of 32-bit words, a power of two, by default 32768 (1 Mibit)
    stream_id : StreamId
        Stream this memory serves, stamped on emitted interrupts
    initial_owner : Owner
        Owner of both halves at start. ``HOST`` for the transmitter direction (the host must
        fill both halves before the clock starts), ``EMULATOR`` for the acquisition direction.

    Notes
    -----
    Host calls may come from another thread; ownership changes and interrupt emission happen
    under one lock so the host never sees a half flagged as free before its event is queued.
    """

    def __init__(
        self,
        total_words: int = DEFAULT_TOTAL_WORDS,
        stream_id: StreamId = StreamId.POL,
        initial_owner: Owner = Owner.HOST,
    ):
        if total_words < 2 or total_words & (total_words - 1):
            raise ValueError(f"total_words must be a power of two >= 2 (got {total_words})")
        self.total_words = total_words
        self.stream_id = StreamId(stream_id)
        self.words = np.zeros(total_words, dtype="<u4")
        self.read_ptr = 0
        self.write_ptr = 0
        self.owners = [initial_owner, initial_owner]
        self.interrupts: queue.Queue[InterruptEvent] = queue.Queue()
        self.words_read = 0
        self.words_written = 0
        self._lock = threading.Lock()

    @property
    def half_words(self) -> int:
        return self.total_words // 2

    @property
    def half_bytes(self) -> int:
        return self.half_words * WORD_BYTES

    def _half_slice(self, half: int) -> slice:
        if half not in (0, 1):
            raise ValueError(f"half must be 0 or 1 (got {half})")
        return slice(half * self.half_words, (half + 1) * self.half_words)

    def _touched_halves(self, start: int, nwords: int) -> set:
        last = (start + nwords - 1) % self.total_words
        return {start // self.half_words, last // self.half_words}

    def _take(self, start: int, nwords: int) -> NDArray:
        stop = start + nwords
        if stop <= self.total_words:
            return self.words[start:stop].copy()
        return np.concatenate((self.words[start:], self.words[: stop - self.total_words]))

    def _put(self, start: int, data: NDArray):
        stop = start + data.size
        if stop <= self.total_words:
            self.words[start:stop] = data
        else:
            split = self.total_words - start
            self.words[start:] = data[:split]
            self.words[: stop - self.total_words] = data[split:]

    def _advance(self, start: int, nwords: int, tick: int) -> tuple[int, Optional[InterruptEvent]]:
        # at most one boundary is crossed since nwords <= half_words
        new = start + nwords
        boundary = (start // self.half_words + 1) * self.half_words
        event = None
        if new >= boundary:
            crossed = start // self.half_words
            self.owners[crossed] = Owner.HOST
            kind = InterruptKind.HALF_REACHED if crossed == 0 else InterruptKind.END_REACHED
            event = InterruptEvent(kind, self.stream_id, tick)
            self.interrupts.put(event)
        return new % self.total_words, event

    def _check_request(self, nwords: int):
        if nwords < 0 or nwords > self.half_words:
            raise ValueError(f"Transfers are limited to one half ({self.half_words} words)")

    def host_write_half(self, half: int, payload):
        """
        Fill a host-owned half and hand it to the emulator.

        Raises
        ------
        OwnershipViolation
            If the half is owned by the emulator
        LengthError
            If the payload is not exactly one half
        """
        data = as_words(payload)
        if data.size != self.half_words:
            raise LengthError(f"Expected {self.half_words} words, got {data.size}")
        region = self._half_slice(half)
        with self._lock:
            if self.owners[half] is Owner.EMULATOR:
                raise OwnershipViolation(f"Half {half} of {self.stream_id.name} is being read")
            self.words[region] = data
            self.owners[half] = Owner.EMULATOR
            self.write_ptr = ((half + 1) * self.half_words) % self.total_words
            self.words_written += data.size

    def mm_read_advance(
        self, nwords: int, tick: int = 0
    ) -> tuple[NDArray, Optional[InterruptEvent]]:
        """
        Read ``nwords`` words at the read pointer and advance it.

        Crossing the middle of the memory emits ``HALF_REACHED``, wrapping at the end emits
        ``END_REACHED``; in both cases the finished half is handed to the host.

        Raises
        ------
        Underrun
            If the read would enter a host-owned half
        """
        self._check_request(nwords)
        with self._lock:
            if nwords == 0:
                return np.empty(0, dtype="<u4"), None
            start = self.read_ptr
            for half in self._touched_halves(start, nwords):
                if self.owners[half] is Owner.HOST:
                    raise Underrun(
                        f"{self.stream_id.name} read of {nwords} words at {start} enters "
                        f"host-owned half {half}"
                    )
            words = self._take(start, nwords)
            self.read_ptr, event = self._advance(start, nwords, tick)
            self.words_read += nwords
        return words, event

    def mm_write_advance(self, payload, tick: int = 0) -> Optional[InterruptEvent]:
        """
        Acquisition direction: write words at the write pointer and advance it, handing each
        filled half to the host.

        Raises
        ------
        Overrun
            If the write would enter a half the host has not drained yet
        """
        data = as_words(payload)
        self._check_request(data.size)
        with self._lock:
            if data.size == 0:
                return None
            start = self.write_ptr
            for half in self._touched_halves(start, data.size):
                if self.owners[half] is Owner.HOST:
                    raise Overrun(
                        f"{self.stream_id.name} write at {start} enters undrained half {half}"
                    )
            self._put(start, data)
            self.write_ptr, event = self._advance(start, data.size, tick)
            self.words_written += data.size
        return event

    def host_read_half(self, half: int) -> NDArray:
        """Acquisition direction: drain a filled half and return it to the emulator."""
        region = self._half_slice(half)
        with self._lock:
            if self.owners[half] is Owner.EMULATOR:
                raise OwnershipViolation(f"Half {half} of {self.stream_id.name} is being written")
            data = self.words[region].copy()
            self.owners[half] = Owner.EMULATOR
            self.read_ptr = ((half + 1) * self.half_words) % self.total_words
            self.words_read += data.size
        return data

    def available_words(self) -> int:
        """Words the emulator may still read before hitting a host-owned half."""
        with self._lock:
            start = self.read_ptr
            half = start // self.half_words
            if self.owners[half] is Owner.HOST:
                return 0
            avail = (half + 1) * self.half_words - start
            if self.owners[1 - half] is Owner.EMULATOR:
                avail += self.half_words
            return avail

    def drain_interrupts(self) -> list[InterruptEvent]:
        events = []
        while True:
            try:
                events.append(self.interrupts.get_nowait())
            except queue.Empty:
                return events
