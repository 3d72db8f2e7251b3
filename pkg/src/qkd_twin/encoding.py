"""
Symbol alphabets, 2-bit packing of the raw key streams and the mapping from symbol pairs to
timed pulse frames.

Bit order is LSB-first and symbol-major: symbol ``i`` of a stream occupies bits ``2i..2i+1``
(modulo 8) of byte ``i // 4``. Read as little-endian 32-bit words this is also the order in
which the QStates controller shifts symbols out of a memory word.
"""
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from qkd_twin.constants import (
    CLOCK_RANGE_HZ,
    DEFAULT_CLOCK_HZ,
    DEFAULT_MAX_LOOKAHEAD,
    DEFAULT_SLOT_TICKS,
    MIN_SLOT_TICKS,
    SYMBOLS_PER_BYTE,
)

logger = logging.getLogger(__name__)

RESERVED_CODE = 0b11
# timeline rows
LASER_LINE = 0
POL_LINE = 1
INTENSITY_LINE = 2


class InvalidSymbol(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class PolarizationSymbol(IntEnum):
    """Three polarization states: two in the key basis (H, V), one in the check basis (D)."""

    H = 0b00
    V = 0b01
    D = 0b10


class DecoySymbol(IntEnum):
    """Three intensity levels. VACUUM means the laser is not fired."""

    HIGH = 0b00
    LOW = 0b01
    VACUUM = 0b10


def _as_symbol(enum, code):
    try:
        return enum(int(code))
    except ValueError:
        raise InvalidSymbol(f"{code:#04b} is not a valid {enum.__name__} code") from None


@dataclass(frozen=True)
class QubitSymbolPair:
    pol: PolarizationSymbol
    decoy: DecoySymbol

    def __post_init__(self):
        object.__setattr__(self, "pol", _as_symbol(PolarizationSymbol, self.pol))
        object.__setattr__(self, "decoy", _as_symbol(DecoySymbol, self.decoy))


@dataclass(frozen=True)
class ClockConfig:
    """
    FPGA clock and qubit slot geometry.

    Parameters
    ----------
    clock_hz : float
        System clock frequency, by default 200 MHz. Values outside 100-200 MHz are accepted
        with a warning.
    slot_ticks : int
        Clock ticks per qubit slot, by default 4 (20 ns slot, 50 MHz repetition). Must be at
        least 3 so the three polarization positions fit.
    """

    clock_hz: float = DEFAULT_CLOCK_HZ
    slot_ticks: int = DEFAULT_SLOT_TICKS

    def __post_init__(self):
        if self.slot_ticks < MIN_SLOT_TICKS:
            raise ValueError(
                f"A qubit slot needs at least {MIN_SLOT_TICKS} ticks (got {self.slot_ticks})"
            )
        if self.clock_hz <= 0:
            raise ValueError(f"Clock frequency must be positive (got {self.clock_hz})")
        low, high = CLOCK_RANGE_HZ
        if not low <= self.clock_hz <= high:
            logger.warning(
                f"Clock frequency {self.clock_hz / 1e6:.1f} MHz is outside the supported "
                f"{low / 1e6:.0f}-{high / 1e6:.0f} MHz range"
            )

    @property
    def tick_ns(self) -> float:
        return 1e9 / self.clock_hz

    @property
    def slot_ns(self) -> float:
        return self.tick_ns * self.slot_ticks

    @property
    def repetition_hz(self) -> float:
        return self.clock_hz / self.slot_ticks


@dataclass(frozen=True)
class ChannelOffsets:
    """Per-line delay in ticks, applied to compensate optical path lengths."""

    laser: int = 0
    polarization: int = 0
    intensity: int = 0
    max_lookahead: int = DEFAULT_MAX_LOOKAHEAD

    def __post_init__(self):
        for name in ("laser", "polarization", "intensity"):
            if getattr(self, name) < 0:
                raise ValueError(f"Offset for the {name} line must be >= 0")
        if self.max_lookahead < 1:
            raise ValueError("max_lookahead must be at least one slot")

    def validate(self, cfg: ClockConfig):
        bound = cfg.slot_ticks * self.max_lookahead
        for name in ("laser", "polarization", "intensity"):
            if getattr(self, name) >= bound:
                raise ValueError(
                    f"Offset for the {name} line ({getattr(self, name)} ticks) must be below "
                    f"{bound} ticks"
                )

    @property
    def max_offset(self) -> int:
        return max(self.laser, self.polarization, self.intensity)


@dataclass(frozen=True)
class PositionMap:
    """
    Symbol code to temporal position tables.

    ``pol[code]`` is the tick position of the polarization pulse, ``intensity[code]`` the
    position of the intensity pulse (``None`` for VACUUM).
    """

    pol: tuple = (0, 1, 2)
    intensity: tuple = (0, 1, None)

    def __post_init__(self):
        object.__setattr__(self, "pol", tuple(self.pol))
        object.__setattr__(self, "intensity", tuple(self.intensity))
        if sorted(self.pol) != [0, 1, 2]:
            raise ValueError(f"Polarization positions must be a permutation of 0, 1, 2: {self.pol}")
        if len(self.intensity) != 3 or self.intensity[DecoySymbol.VACUUM] is not None:
            raise ValueError("VACUUM must map to no intensity pulse")
        if sorted(self.intensity[:2]) != [0, 1]:
            raise ValueError(f"Intensity positions must be a permutation of 0, 1: {self.intensity}")

    @property
    def pol_lut(self) -> NDArray:
        return np.array(self.pol, dtype=np.int64)

    @property
    def intensity_lut(self) -> NDArray:
        # -1 marks the absent pulse
        return np.array([-1 if p is None else p for p in self.intensity], dtype=np.int64)


DEFAULT_POSITIONS = PositionMap()


@dataclass(frozen=True)
class PulseFrame:
    """
    Electrical output of one qubit slot. Ticks are relative to the slot start and include
    the per-line offsets; ``None`` means no pulse on that line.
    """

    slot_index: int
    pol: PolarizationSymbol
    decoy: DecoySymbol
    laser_tick: Optional[int]
    pol_position: int
    pol_tick: int
    intensity_position: Optional[int]
    intensity_tick: Optional[int]

    @property
    def laser_pulse(self) -> bool:
        return self.laser_tick is not None

    def absolute_ticks(self, cfg: ClockConfig) -> dict:
        start = self.slot_index * cfg.slot_ticks
        ticks = {"laser": self.laser_tick, "pol": self.pol_tick, "intensity": self.intensity_tick}
        return {k: None if v is None else start + v for k, v in ticks.items()}


def _as_byte_array(data) -> NDArray:
    if isinstance(data, np.ndarray):
        if data.dtype.itemsize > 1:
            data = data.astype(data.dtype.newbyteorder("<"), copy=False)
        return np.ascontiguousarray(data).view(np.uint8).reshape(-1)
    return np.frombuffer(data, dtype=np.uint8)


def pack_symbols(symbols: ArrayLike) -> bytes:
    """
    Pack 2-bit symbol codes, four per byte, LSB-first. The final partial byte is zero-padded.

    Parameters
    ----------
    symbols : ArrayLike
        Symbol codes in {0, 1, 2}

    Returns
    -------
    bytes

    Raises
    ------
    InvalidSymbol
        If any code is the reserved value 0b11 (or otherwise out of range)

    Examples
    --------
    >>> pack_symbols([0b00, 0b01, 0b10, 0b00]).hex()
    '24'
    """
    codes = np.asarray(symbols).reshape(-1)
    if codes.size == 0:
        return b""
    bad = (codes < 0) | (codes > 2)
    if np.any(bad):
        idx = np.flatnonzero(bad)[0]
        raise InvalidSymbol(f"Symbol {idx} has invalid code {codes[idx]}")
    nbytes = -(-codes.size // SYMBOLS_PER_BYTE)
    padded = np.zeros(nbytes * SYMBOLS_PER_BYTE, dtype=np.uint8)
    padded[: codes.size] = codes
    quads = padded.reshape(-1, SYMBOLS_PER_BYTE)
    packed = quads[:, 0] | (quads[:, 1] << 2) | (quads[:, 2] << 4) | (quads[:, 3] << 6)
    return packed.astype(np.uint8).tobytes()


def _unpack(data, count: int) -> NDArray:
    buf = _as_byte_array(data)
    if count < 0 or count > SYMBOLS_PER_BYTE * buf.size:
        raise LengthMismatch(f"Cannot unpack {count} symbols from {buf.size} bytes")
    nbytes = -(-count // SYMBOLS_PER_BYTE)
    head = buf[:nbytes]
    codes = np.empty((nbytes, SYMBOLS_PER_BYTE), dtype=np.uint8)
    for k in range(SYMBOLS_PER_BYTE):
        codes[:, k] = (head >> (2 * k)) & 0b11
    return codes.reshape(-1)[:count]


def decode_lenient(data, count: int) -> tuple[NDArray, int]:
    """Unpack, mapping reserved codes to 0b00. Returns the codes and how many were mapped."""
    codes = _unpack(data, count)
    reserved = codes == RESERVED_CODE
    n_reserved = int(np.count_nonzero(reserved))
    if n_reserved:
        codes[reserved] = 0
    return codes, n_reserved


def unpack_symbols(data, count: int, strict: bool = True) -> NDArray:
    """
    Inverse of :func:`pack_symbols` over the first ``count`` symbols.

    Parameters
    ----------
    data : bytes-like or NDArray
        Packed symbols (uint32 word arrays are read as little-endian)
    count : int
        Number of symbols to extract, at most ``4 * len(data)``
    strict : bool
        If true (default) a reserved code raises; otherwise it is read as 0b00.

    Returns
    -------
    NDArray
        uint8 symbol codes
    """
    if not strict:
        return decode_lenient(data, count)[0]
    codes = _unpack(data, count)
    reserved = codes == RESERVED_CODE
    if np.any(reserved):
        idx = np.flatnonzero(reserved)[0]
        raise InvalidSymbol(f"Symbol {idx} carries the reserved code 0b11")
    return codes


def encode_pair(
    pair: QubitSymbolPair,
    cfg: ClockConfig = ClockConfig(),
    offsets: ChannelOffsets = ChannelOffsets(),
    slot_index: int = 0,
    positions: PositionMap = DEFAULT_POSITIONS,
) -> PulseFrame:
    """
    Build the pulse frame for one qubit slot.

    The laser fires at position 0 unless the decoy is VACUUM, the polarization pulse sits at
    one of three positions and the intensity pulse at one of two (none for VACUUM). Each
    line is then delayed by its offset.
    """
    if not isinstance(pair, QubitSymbolPair):
        pair = QubitSymbolPair(*pair)
    offsets.validate(cfg)
    pol_position = positions.pol[pair.pol]
    intensity_position = positions.intensity[pair.decoy]
    if pair.decoy == DecoySymbol.VACUUM:
        laser_tick = None
        intensity_tick = None
    else:
        laser_tick = offsets.laser
        intensity_tick = intensity_position + offsets.intensity
    return PulseFrame(
        slot_index=slot_index,
        pol=pair.pol,
        decoy=pair.decoy,
        laser_tick=laser_tick,
        pol_position=pol_position,
        pol_tick=pol_position + offsets.polarization,
        intensity_position=intensity_position,
        intensity_tick=intensity_tick,
    )


@dataclass
class FrameBatch:
    """Consecutive slots held as code arrays, the bulk form of a list of pulse frames."""

    slot_start: int
    pol: NDArray = field(repr=False)
    decoy: NDArray = field(repr=False)

    def __post_init__(self):
        self.pol = np.asarray(self.pol, dtype=np.uint8)
        self.decoy = np.asarray(self.decoy, dtype=np.uint8)
        if self.pol.shape != self.decoy.shape:
            raise LengthMismatch(
                f"Polarization ({self.pol.size}) and decoy ({self.decoy.size}) lengths differ"
            )

    def __len__(self):
        return self.pol.size

    @property
    def slot_indices(self) -> NDArray:
        return np.arange(self.slot_start, self.slot_start + len(self), dtype=np.int64)

    @property
    def laser(self) -> NDArray:
        return self.decoy != DecoySymbol.VACUUM

    def to_frames(
        self,
        cfg: ClockConfig = ClockConfig(),
        offsets: ChannelOffsets = ChannelOffsets(),
        positions: PositionMap = DEFAULT_POSITIONS,
    ) -> list[PulseFrame]:
        return [
            encode_pair(QubitSymbolPair(p, d), cfg, offsets, slot_index=i, positions=positions)
            for i, p, d in zip(self.slot_indices.tolist(), self.pol.tolist(), self.decoy.tolist())
        ]

    @classmethod
    def concatenate(cls, batches: Sequence["FrameBatch"]) -> "FrameBatch":
        if len(batches) == 0:
            return cls(0, np.empty(0, np.uint8), np.empty(0, np.uint8))
        pol = np.concatenate([b.pol for b in batches])
        decoy = np.concatenate([b.decoy for b in batches])
        return cls(batches[0].slot_start, pol, decoy)


def frame_stream(
    pol_bytes,
    decoy_bytes,
    cfg: ClockConfig = ClockConfig(),
    offsets: ChannelOffsets = ChannelOffsets(),
    n: int = 0,
    positions: PositionMap = DEFAULT_POSITIONS,
) -> list[PulseFrame]:
    """
    Build ``n`` frames from the packed polarization and decoy streams. Both streams are
    consumed at the same rate, ``ceil(n / 4)`` bytes each.

    Raises
    ------
    LengthMismatch
        If either stream holds fewer than ``n`` symbols
    """
    need = -(-n // SYMBOLS_PER_BYTE)
    for name, data in (("polarization", pol_bytes), ("decoy", decoy_bytes)):
        have = _as_byte_array(data).size
        if have < need:
            raise LengthMismatch(f"The {name} stream holds {have} bytes, {need} are needed")
    batch = FrameBatch(0, unpack_symbols(pol_bytes, n), unpack_symbols(decoy_bytes, n))
    return batch.to_frames(cfg, offsets, positions)


def render_timeline(
    frames,
    cfg: ClockConfig = ClockConfig(),
    offsets: ChannelOffsets = ChannelOffsets(),
    positions: PositionMap = DEFAULT_POSITIONS,
) -> NDArray:
    """
    Render the output lines as a (3, n_ticks) array of 0/1 values, one row per line
    (laser, polarization, intensity). Each pulse is one tick wide. The array extends past
    the last slot by the largest offset so delayed pulses are not cut.

    Parameters
    ----------
    frames : FrameBatch or Sequence[PulseFrame]
    """
    offsets.validate(cfg)
    if isinstance(frames, FrameBatch):
        batch = frames
    else:
        frames = list(frames)
        start = frames[0].slot_index if frames else 0
        batch = FrameBatch(start, [f.pol for f in frames], [f.decoy for f in frames])
    S = cfg.slot_ticks
    n = len(batch)
    timeline = np.zeros((3, n * S + offsets.max_offset), dtype=np.uint8)
    base = np.arange(n, dtype=np.int64) * S
    laser = batch.laser
    timeline[LASER_LINE, base[laser] + offsets.laser] = 1
    timeline[POL_LINE, base + positions.pol_lut[batch.pol] + offsets.polarization] = 1
    intensity = positions.intensity_lut[batch.decoy[laser]]
    timeline[INTENSITY_LINE, base[laser] + intensity + offsets.intensity] = 1
    return timeline
