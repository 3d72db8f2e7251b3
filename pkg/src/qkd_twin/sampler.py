"""
SPD reader twin: samples asynchronous detector edges into the clock domain, accumulates the
sampled bits and combines detector streams for the QRNG path.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import ArrayLike, NDArray

from qkd_twin.constants import SYNC_STAGES, WORD_BITS
from qkd_twin.encoding import ClockConfig, LengthMismatch
from qkd_twin.memory import InterruptEvent, InterruptKind, StreamId


@dataclass
class SamplerState:
    """
    Parameters
    ----------
    threshold : int
        Number of accumulated bits released by one extraction
    """

    threshold: int = WORD_BITS
    sync: NDArray = field(default_factory=lambda: np.zeros(SYNC_STAGES, dtype=np.uint8))
    accumulated: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint8), repr=False)
    tick: int = 0
    # the first bit extracted after a trigger drives the auxiliary output
    armed: bool = False
    aux_output: Optional[int] = None
    # flushed synchronizer stages are not samples
    skip: int = 0

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"Accumulation threshold must be positive (got {self.threshold})")

    @property
    def accumulation_count(self) -> int:
        return self.accumulated.size


def _window(events: ArrayLike, cfg: ClockConfig, first_tick: int, n_ticks: int) -> NDArray:
    times = np.asarray(events, dtype=np.float64).reshape(-1)
    if times.size > 1 and np.any(np.diff(times) < 0):
        raise ValueError("Edge timestamps must be nondecreasing")
    raw = np.zeros(n_ticks, dtype=np.uint8)
    ticks = np.floor(times / cfg.tick_ns).astype(np.int64) - first_tick
    ticks = ticks[(ticks >= 0) & (ticks < n_ticks)]
    raw[ticks] = 1
    return raw


def sample_into(state: SamplerState, events: ArrayLike, cfg: ClockConfig, n_ticks: int) -> NDArray:
    """
    Sample the next ``n_ticks`` clock windows. Edge timestamps are absolute (ns from tick 0).
    Bits leave the synchronizer two ticks after their window; stages carry over between calls.
    """
    raw = _window(events, cfg, state.tick, n_ticks)
    pipeline = np.concatenate((state.sync, raw))
    out, state.sync = pipeline[:n_ticks], pipeline[n_ticks:].copy()
    dropped = min(state.skip, n_ticks)
    state.skip -= dropped
    state.accumulated = np.concatenate((state.accumulated, out[dropped:]))
    state.tick += n_ticks
    return out


def spd_sample(events: ArrayLike, cfg: ClockConfig, window_ticks: int) -> NDArray:
    """
    Sample asynchronous edges into one bit per clock tick.

    Bit ``w + 2`` is set iff at least one edge falls in tick window ``w`` (two-stage
    synchronizer delay). Edges in the last two windows are still in the synchronizer and do
    not appear.

    Parameters
    ----------
    events : ArrayLike
        Nondecreasing edge timestamps in ns
    cfg : ClockConfig
    window_ticks : int
        Number of tick windows to sample

    Returns
    -------
    NDArray
        uint8 bits of length ``window_ticks``
    """
    return sample_into(SamplerState(), events, cfg, window_ticks)


def xor_combine(a: ArrayLike, b: ArrayLike) -> NDArray:
    """
    Elementwise XOR of two bit sequences. For inputs with bias e (p = 1/2 + e) the output
    bias is -2e^2.

    Raises
    ------
    LengthMismatch
        If the sequences differ in length
    """
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise LengthMismatch(f"Cannot combine {a.size} bits with {b.size} bits")
    return np.bitwise_xor(a, b)


def reset_on_trigger(state: SamplerState):
    """
    Discard every sampled and accumulated bit, including the synchronizer stages. The zeros
    flushed out of the cleared stages are not accumulated, and the next extraction drives the
    auxiliary output.
    """
    state.sync = np.zeros(SYNC_STAGES, dtype=np.uint8)
    state.accumulated = np.empty(0, dtype=np.uint8)
    state.skip = SYNC_STAGES
    state.armed = True
    state.aux_output = None


def extract(state: SamplerState) -> Optional[NDArray]:
    """Release ``threshold`` accumulated bits, or ``None`` if not enough have been sampled."""
    if state.accumulated.size < state.threshold:
        return None
    bits, state.accumulated = (
        state.accumulated[: state.threshold],
        state.accumulated[state.threshold :],
    )
    if state.armed:
        state.aux_output = int(bits[0])
        state.armed = False
    return bits


def qrng_words(bits: ArrayLike) -> tuple[NDArray, NDArray]:
    """
    Pack bits LSB-first into 32-bit words for the acquisition memory.

    Returns
    -------
    words : NDArray
        Little-endian uint32 words holding the first ``32 * (len(bits) // 32)`` bits
    rest : NDArray
        Bits left over for the next call
    """
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    n = (bits.size // WORD_BITS) * WORD_BITS
    packed = np.packbits(bits[:n], bitorder="little")
    return packed.view("<u4"), bits[n:]


class SpdReader:
    """One detector input with its sampler state."""

    def __init__(self, cfg: ClockConfig, threshold: int = WORD_BITS, stream_id=StreamId.POL):
        self.cfg = cfg
        self.stream_id = stream_id
        self.state = SamplerState(threshold=threshold)

    def sample(self, events: ArrayLike, n_ticks: int) -> NDArray:
        return sample_into(self.state, events, self.cfg, n_ticks)

    def extract(self) -> Optional[NDArray]:
        return extract(self.state)

    def trigger(self) -> InterruptEvent:
        reset_on_trigger(self.state)
        return InterruptEvent(InterruptKind.TRIGGER_RESET, self.stream_id, self.state.tick)

    @property
    def aux_output(self) -> Optional[int]:
        return self.state.aux_output
