"""
QStates controller twin: pops one 2-bit symbol per slot from each stream memory and drives the
output lines.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from qkd_twin.constants import SYMBOLS_PER_WORD
from qkd_twin.encoding import (
    DEFAULT_POSITIONS,
    ChannelOffsets,
    ClockConfig,
    FrameBatch,
    PositionMap,
    PulseFrame,
    QubitSymbolPair,
    decode_lenient,
    encode_pair,
    unpack_symbols,
)
from qkd_twin.memory import BlockMemory, StreamId, Underrun

logger = logging.getLogger(__name__)


@dataclass
class SymbolCursor:
    """Word-buffered symbol reader over one stream memory."""

    stream_id: StreamId
    pending: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint8), repr=False)
    consumed: int = 0
    words_read: int = 0

    @property
    def bit_cursor(self) -> int:
        return 2 * self.consumed

    def take(self, mem: BlockMemory, n: int, state: "QscState", tick: int = 0) -> NDArray:
        if n <= self.pending.size:
            out, self.pending = self.pending[:n], self.pending[n:]
            self.consumed += n
            return out
        parts = [self.pending]
        need = n - self.pending.size
        nwords = -(-need // SYMBOLS_PER_WORD)
        while nwords > 0:
            chunk = min(nwords, mem.half_words)
            words, _ = mem.mm_read_advance(chunk, tick=tick)
            self.words_read += chunk
            parts.append(state.decode(words))
            nwords -= chunk
        codes = np.concatenate(parts)
        out, self.pending = codes[:n], codes[n:]
        self.consumed += n
        return out


@dataclass
class QscState:
    """
    State of the QStates controller.

    Parameters
    ----------
    clock : ClockConfig
    offsets : ChannelOffsets
    positions : PositionMap
        Symbol to pulse position tables
    strict : bool
        If true a reserved symbol code halts the run, otherwise it is read as 0b00 and counted
        in ``reserved_count``
    run_slots : Optional[int]
        Total transmission length in slots; the controller stops on its own once reached
    """

    clock: ClockConfig = field(default_factory=ClockConfig)
    offsets: ChannelOffsets = field(default_factory=ChannelOffsets)
    positions: PositionMap = DEFAULT_POSITIONS
    strict: bool = True
    run_slots: Optional[int] = None
    slot_index: int = 0
    running: bool = False
    reserved_count: int = 0
    cursors: dict = field(
        default_factory=lambda: {s: SymbolCursor(s) for s in (StreamId.POL, StreamId.DECOY)}
    )

    def __post_init__(self):
        self.offsets.validate(self.clock)

    @property
    def tick(self) -> int:
        return self.slot_index * self.clock.slot_ticks

    def decode(self, words: NDArray) -> NDArray:
        count = words.size * SYMBOLS_PER_WORD
        if self.strict:
            return unpack_symbols(words, count)
        codes, n_reserved = decode_lenient(words, count)
        if n_reserved:
            logger.warning(f"Read {n_reserved} reserved symbol codes as 0b00")
            self.reserved_count += n_reserved
        return codes

    def remaining(self) -> Optional[int]:
        if self.run_slots is None:
            return None
        return max(self.run_slots - self.slot_index, 0)


def _check_running(state: QscState):
    if not state.running:
        raise RuntimeError("The QStates controller is not running")


def qsc_step(state: QscState, mem_pol: BlockMemory, mem_decoy: BlockMemory) -> PulseFrame:
    """
    Emit one slot: pop a symbol from each memory and build its pulse frame.

    Raises
    ------
    Underrun
        If either memory has no emulator-owned data left; the controller halts.
    """
    _check_running(state)
    try:
        pol = state.cursors[StreamId.POL].take(mem_pol, 1, state, state.tick)
        decoy = state.cursors[StreamId.DECOY].take(mem_decoy, 1, state, state.tick)
    except Underrun:
        state.running = False
        logger.error(f"Underrun at slot {state.slot_index}; halting the QStates controller")
        raise
    frame = encode_pair(
        QubitSymbolPair(int(pol[0]), int(decoy[0])),
        state.clock,
        state.offsets,
        slot_index=state.slot_index,
        positions=state.positions,
    )
    state.slot_index += 1
    if state.remaining() == 0:
        state.running = False
    return frame


def qsc_advance(
    state: QscState, mem_pol: BlockMemory, mem_decoy: BlockMemory, n: int
) -> FrameBatch:
    """Emit ``n`` slots at once (fewer if the transmission length is reached)."""
    _check_running(state)
    remaining = state.remaining()
    if remaining is not None:
        n = min(n, remaining)
    start = state.slot_index
    try:
        pol = state.cursors[StreamId.POL].take(mem_pol, n, state, state.tick)
        decoy = state.cursors[StreamId.DECOY].take(mem_decoy, n, state, state.tick)
    except Underrun:
        state.running = False
        logger.error(f"Underrun within slots {start}-{start + n}; halting the QStates controller")
        raise
    state.slot_index += n
    if state.remaining() == 0:
        state.running = False
    return FrameBatch(start, pol, decoy)


class TickClock:
    """
    Logical clock in FPGA ticks. With ``real_time`` set, advancing blocks until the matching
    wall-clock time so the emulator consumes memory at the configured rate.
    """

    def __init__(self, cfg: ClockConfig, real_time: bool = False):
        self.cfg = cfg
        self.real_time = real_time
        self.tick = 0
        self._t0 = time.perf_counter()

    @property
    def seconds(self) -> float:
        return self.tick / self.cfg.clock_hz

    def restart(self):
        self.tick = 0
        self._t0 = time.perf_counter()

    def advance(self, ticks: int):
        self.tick += ticks
        if self.real_time:
            delay = self._t0 + self.seconds - time.perf_counter()
            if delay > 0:
                time.sleep(delay)


class QStatesController:
    """QStates controller bound to its two stream memories."""

    def __init__(self, state: QscState, mem_pol: BlockMemory, mem_decoy: BlockMemory):
        self.state = state
        self.mem_pol = mem_pol
        self.mem_decoy = mem_decoy

    def start(self):
        self.state.running = True

    def stop(self):
        self.state.running = False

    def step(self) -> PulseFrame:
        return qsc_step(self.state, self.mem_pol, self.mem_decoy)

    def advance(self, n: int) -> FrameBatch:
        return qsc_advance(self.state, self.mem_pol, self.mem_decoy, n)

    @property
    def slots_per_half(self) -> int:
        return self.mem_pol.half_words * SYMBOLS_PER_WORD
