"""
Receiver twin: lossy channel and detector, three-state measurement, detection reporting and
QBER bookkeeping.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from qkd_twin.encoding import DecoySymbol, FrameBatch, PolarizationSymbol, PulseFrame
from qkd_twin.rng_source import DetectionReport, SiftedRecord

logger = logging.getLogger(__name__)

KEY_BASIS = 0  # Z: H and V
CHECK_BASIS = 1  # X: D
NO_SIGNAL = 255  # dark count without an arriving pulse

# (basis, bit) carried by each polarization symbol
STATE_TABLE = {
    PolarizationSymbol.H: (KEY_BASIS, 0),
    PolarizationSymbol.V: (KEY_BASIS, 1),
    PolarizationSymbol.D: (CHECK_BASIS, 0),
}


class IndexMismatch(ValueError):
    pass


def _state_lut(column: int) -> NDArray:
    lut = np.zeros(len(STATE_TABLE), dtype=np.uint8)
    for pol, entry in STATE_TABLE.items():
        lut[pol] = entry[column]
    return lut


BASIS_LUT = _state_lut(0)
BIT_LUT = _state_lut(1)


@dataclass
class ChannelModel:
    """
    Parameters
    ----------
    transmittance : float
        Channel transmittance between 0 and 1
    efficiency : float
        Detector efficiency between 0 and 1
    dark_count : float
        Dark count probability per slot, off by default
    seed : Optional[int]
    """

    transmittance: float = 0.1
    efficiency: float = 1.0
    dark_count: float = 0.0
    seed: Optional[int] = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("transmittance", "efficiency", "dark_count"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be in [0, 1] (got {value})")
        self.rng = np.random.default_rng(self.seed)

    @property
    def detection_probability(self) -> float:
        """Signal detection probability of one non-vacuum slot."""
        return self.transmittance * self.efficiency


@dataclass
class DetectionEvents:
    """
    Detector clicks of a run of slots.

    ``pol`` holds the polarization that arrived with the click, or ``NO_SIGNAL`` for a pure
    dark count. ``covered_until`` is one past the last slot that went through the channel.
    """

    indices: NDArray
    pol: NDArray
    decoy: NDArray
    covered_until: int

    def __len__(self):
        return self.indices.size


def _as_batch(frames: Union[FrameBatch, Sequence[PulseFrame]]) -> FrameBatch:
    if isinstance(frames, FrameBatch):
        return frames
    if len(frames) == 0:
        return FrameBatch.concatenate([])
    indices = np.array([f.slot_index for f in frames], dtype=np.int64)
    if np.any(np.diff(indices) != 1):
        raise ValueError("Frames must cover consecutive slots")
    return FrameBatch(
        int(indices[0]),
        np.array([f.pol for f in frames], dtype=np.uint8),
        np.array([f.decoy for f in frames], dtype=np.uint8),
    )


def transmit_through(
    frames: Union[FrameBatch, Sequence[PulseFrame]], ch: ChannelModel
) -> DetectionEvents:
    """
    Draw an independent detection for every slot. Non-vacuum slots click with probability
    ``transmittance * efficiency``; any slot may also click on a dark count.
    """
    batch = _as_batch(frames)
    n = len(batch)
    signal = batch.laser & (ch.rng.random(n) < ch.detection_probability)
    dark = ch.rng.random(n) < ch.dark_count if ch.dark_count > 0 else np.zeros(n, dtype=bool)
    detected = signal | dark
    pol = np.where(signal, batch.pol, NO_SIGNAL).astype(np.uint8)
    return DetectionEvents(
        batch.slot_indices[detected].astype(np.uint64),
        pol[detected],
        batch.decoy[detected],
        batch.slot_start + n,
    )


@dataclass
class MeasurementModel:
    """
    Parameters
    ----------
    p_key_basis : float
        Probability of measuring in the key basis
    error_rate : float
        Probability of flipping a measured bit, for error injection
    seed : Optional[int]
    """

    p_key_basis: float = 0.5
    error_rate: float = 0.0
    seed: Optional[int] = None
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("p_key_basis", "error_rate"):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be in [0, 1] (got {value})")
        self.rng = np.random.default_rng(self.seed)


@dataclass
class Measurement:
    """Receiver-side record; the outcomes never leave the receiver."""

    indices: NDArray
    basis: NDArray
    outcome: NDArray

    def __len__(self):
        return self.indices.size


def measure(
    detections: DetectionEvents, mm: MeasurementModel
) -> tuple[Measurement, DetectionReport]:
    """
    Choose a basis per click and measure. A state measured in its own basis yields its bit;
    any other case (wrong basis, dark count) yields a uniform bit.

    Returns
    -------
    measurement : Measurement
        Indices, bases and outcomes, kept by the receiver
    report : DetectionReport
        Indices and bases only, sent to the transmitter
    """
    n = len(detections)
    basis = np.where(mm.rng.random(n) < mm.p_key_basis, KEY_BASIS, CHECK_BASIS).astype(np.uint8)
    random_bits = mm.rng.integers(0, 2, n, dtype=np.uint8)
    has_signal = detections.pol != NO_SIGNAL
    pol = np.where(has_signal, detections.pol, 0)
    matched = has_signal & (BASIS_LUT[pol] == basis)
    outcome = np.where(matched, BIT_LUT[pol], random_bits).astype(np.uint8)
    if mm.error_rate > 0:
        outcome ^= (mm.rng.random(n) < mm.error_rate).astype(np.uint8)
    measurement = Measurement(detections.indices, basis, outcome)
    report = DetectionReport(detections.indices, basis, detections.covered_until)
    return measurement, report


def sift_keys(sifted: SiftedRecord, measurement: Measurement) -> tuple[NDArray, NDArray]:
    """
    Matched-basis key material of both ends.

    Returns
    -------
    tx_bits, rx_bits : NDArray
    """
    if not np.array_equal(sifted.indices, measurement.indices):
        raise IndexMismatch(
            f"Sifted record ({len(sifted)} slots) and measurement ({len(measurement)} slots) "
            "cover different slots"
        )
    matched = sifted.sent_basis == measurement.basis
    return BIT_LUT[sifted.pol[matched]], measurement.outcome[matched]


@dataclass
class RunStats:
    """
    Summary of one run.

    ``qber`` is None when no matched-basis slot was sifted. ``yields`` maps each decoy level
    to its detection rate (detections over sent slots of that level).
    """

    sent: int = 0
    detections: int = 0
    sifted: int = 0
    qber: Optional[float] = None
    underruns: int = 0
    sequence_gaps: int = 0
    yields: dict = field(default_factory=dict)
    throughput: pd.DataFrame = field(default_factory=pd.DataFrame, repr=False)

    def __post_init__(self):
        if not self.sifted <= self.detections <= self.sent:
            raise ValueError(
                f"Counts must satisfy sifted <= detections <= sent (got {self.sifted}, "
                f"{self.detections}, {self.sent})"
            )


def compute_stats(
    sifted: SiftedRecord,
    measurement: Measurement,
    sent: Optional[int] = None,
    sent_per_level: Optional[NDArray] = None,
    underruns: int = 0,
    sequence_gaps: int = 0,
    throughput: Optional[pd.DataFrame] = None,
) -> RunStats:
    """
    QBER over matched-basis sifted slots, plus detection yields per decoy level.

    Parameters
    ----------
    sifted : SiftedRecord
    measurement : Measurement
    sent : Optional[int]
        Slots transmitted, by default one past the last detected slot
    sent_per_level : Optional[NDArray]
        Slots transmitted per decoy level (HIGH, LOW, VACUUM)

    Raises
    ------
    IndexMismatch
        If the sifted record and the measurement do not cover the same slots
    """
    tx_bits, rx_bits = sift_keys(sifted, measurement)
    qber = float(np.mean(tx_bits != rx_bits)) if tx_bits.size else None
    if qber is None:
        logger.warning("No matched-basis slots were sifted; QBER is undefined")
    if sent is None:
        sent = int(measurement.indices[-1]) + 1 if len(measurement) else 0
    yields = {}
    if sent_per_level is not None:
        detected = np.bincount(sifted.decoy, minlength=len(DecoySymbol))
        for level in DecoySymbol:
            n_level = int(sent_per_level[level])
            yields[level.name] = float(detected[level] / n_level) if n_level else None
    return RunStats(
        sent=sent,
        detections=len(measurement),
        sifted=int(tx_bits.size),
        qber=qber,
        underruns=underruns,
        sequence_gaps=sequence_gaps,
        yields=yields,
        throughput=throughput if throughput is not None else pd.DataFrame(),
    )
