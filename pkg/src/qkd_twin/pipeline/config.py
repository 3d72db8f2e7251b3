import os
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

from serde import field, serialize
from serde.toml import to_toml

import qkd_twin as qtw
from qkd_twin.constants import (
    COMMAND_PORT,
    DECOY_DATA_PORT,
    DEFAULT_BLOCK_BYTES,
    DEFAULT_CLOCK_HZ,
    DEFAULT_HOST,
    DEFAULT_LINK_BPS,
    DEFAULT_MAX_LOOKAHEAD,
    DEFAULT_N_BLOCKS,
    DEFAULT_RESOLUTION_BITS,
    DEFAULT_SLOT_TICKS,
    DEFAULT_TOTAL_WORDS,
    DETECTIONS_PORT,
    POL_DATA_PORT,
    REPORT_SLOTS,
    RETENTION_FACTOR,
    STATUS_LATENCY_S,
    WORD_BITS,
    WORD_BYTES,
)
from qkd_twin.encoding import ChannelOffsets, ClockConfig
from qkd_twin.receiver import ChannelModel, MeasurementModel
from qkd_twin.rng_source import BiasConfig, SourceKind
from qkd_twin.stream_engine import RingBufferConfig
from qkd_twin.transport import EndpointConfig


class Mode(str, Enum):
    TX_LOOPBACK = "TX_LOOPBACK"
    TX_RX_FULL = "TX_RX_FULL"
    QRNG_BOTTOM_UP = "QRNG_BOTTOM_UP"
    SOAK = "SOAK"


class TimeModel(str, Enum):
    AS_FAST_AS_POSSIBLE = "AS_FAST_AS_POSSIBLE"
    REAL_TIME_THROTTLED = "REAL_TIME_THROTTLED"


## Define classes for each configuration block
@serialize
@dataclass
class ClockOptions:
    """FPGA clock options

    Parameters
    ----------
    clock_hz : float
        System clock, by default 200 MHz
    slot_ticks : int
        Clock ticks per qubit slot, by default 4 (50 MHz repetition rate)
    """

    clock_hz: float = field(default=DEFAULT_CLOCK_HZ)
    slot_ticks: int = field(default=DEFAULT_SLOT_TICKS)

    def __post_init__(self):
        self.clock_hz = float(self.clock_hz)
        self.clock_config()

    def clock_config(self) -> ClockConfig:
        return ClockConfig(self.clock_hz, self.slot_ticks)

    def to_toml(self) -> str:
        obj = {"clock": self}
        return to_toml(obj)


@serialize
@dataclass
class OffsetOptions:
    """Per-line output delays in clock ticks

    Parameters
    ----------
    laser : int
    polarization : int
    intensity : int
    max_lookahead : int
        Offsets must stay below ``max_lookahead`` slots, by default 4
    """

    laser: int = field(default=0, skip_if_default=True)
    polarization: int = field(default=0, skip_if_default=True)
    intensity: int = field(default=0, skip_if_default=True)
    max_lookahead: int = field(default=DEFAULT_MAX_LOOKAHEAD, skip_if_default=True)

    def channel_offsets(self) -> ChannelOffsets:
        return ChannelOffsets(self.laser, self.polarization, self.intensity, self.max_lookahead)

    def to_toml(self) -> str:
        obj = {"offsets": self}
        return to_toml(obj)


@serialize
@dataclass
class MemoryOptions:
    """Block memory options

    Parameters
    ----------
    total_words : int
        32-bit words per stream memory, a power of two, by default 32768 (64 KiB halves)
    strict : bool
        If true, a reserved symbol code halts the run; otherwise it is emitted as code 0 and
        counted. By default true.
    """

    total_words: int = field(default=DEFAULT_TOTAL_WORDS)
    strict: bool = field(default=True, skip_if_default=True)

    def __post_init__(self):
        if self.total_words < 2 or self.total_words & (self.total_words - 1):
            raise ValueError(f"total_words must be a power of two (got {self.total_words})")

    @property
    def half_bytes(self) -> int:
        return self.total_words // 2 * WORD_BYTES

    def to_toml(self) -> str:
        obj = {"memory": self}
        return to_toml(obj)


@serialize
@dataclass
class BufferOptions:
    """CPU staging buffer options

    Parameters
    ----------
    block_bytes : int
        Size of one block, by default 18.75 MiB. Must be a multiple of the memory half.
    n_blocks : int
        Number of blocks per stream, by default 10
    preload_timeout : float
        Seconds to wait for the source to fill the buffer before the clock starts
    """

    block_bytes: int = field(default=DEFAULT_BLOCK_BYTES)
    n_blocks: int = field(default=DEFAULT_N_BLOCKS)
    preload_timeout: float = field(default=60.0, skip_if_default=True)

    def ring_config(self, memory: MemoryOptions) -> RingBufferConfig:
        return RingBufferConfig(self.block_bytes, self.n_blocks, memory.half_bytes)

    def to_toml(self) -> str:
        obj = {"buffer": self}
        return to_toml(obj)


ENV_OVERRIDES = {
    "QTW_HOST": ("host", str),
    "QTW_COMMAND_PORT": ("command_port", int),
    "QTW_POL_PORT": ("pol_port", int),
    "QTW_DECOY_PORT": ("decoy_port", int),
    "QTW_DETECTIONS_PORT": ("detections_port", int),
}


@serialize
@dataclass
class TransportOptions:
    """TCP link options

    Every address can be overridden through the environment (``QTW_HOST``,
    ``QTW_COMMAND_PORT``, ``QTW_POL_PORT``, ``QTW_DECOY_PORT``, ``QTW_DETECTIONS_PORT``), which
    takes precedence over the configuration file.

    Parameters
    ----------
    host : str
    command_port : int
    pol_port : int
    decoy_port : int
    detections_port : int
    token : Optional[str]
        Pre-shared token for the command handshake, by default None (no check)
    link_bps : float
        Link throughput assumed by logical-time runs, by default 600 Mb/s
    status_latency : float
        Bound in seconds on a STATUS round trip while the data plane is busy
    """

    host: str = field(default=DEFAULT_HOST)
    command_port: int = field(default=COMMAND_PORT)
    pol_port: int = field(default=POL_DATA_PORT)
    decoy_port: int = field(default=DECOY_DATA_PORT)
    detections_port: int = field(default=DETECTIONS_PORT)
    token: Optional[str] = field(default=None, skip_if_default=True)
    link_bps: float = field(default=DEFAULT_LINK_BPS, skip_if_default=True)
    status_latency: float = field(default=STATUS_LATENCY_S, skip_if_default=True)

    def __post_init__(self):
        for variable, (attr, cast) in ENV_OVERRIDES.items():
            value = os.environ.get(variable)
            if value is not None:
                setattr(self, attr, cast(value))
        self.endpoint()

    def endpoint(self) -> EndpointConfig:
        return EndpointConfig(
            self.host,
            self.command_port,
            self.pol_port,
            self.decoy_port,
            self.detections_port,
            self.token,
        )

    def to_toml(self) -> str:
        obj = {"transport": self}
        return to_toml(obj)


@serialize
@dataclass
class SourceOptions:
    """Randomness source options

    Parameters
    ----------
    kind : str
        "CSPRNG" (ChaCha20) or "QRNG_EMULATED" (rate-limited uniform source)
    rate_bps : Optional[float]
        Output rate of the emulated QRNG, by default unlimited
    p_pol : list[float]
        Probabilities of the H, V and D polarization symbols
    p_decoy : list[float]
        Probabilities of the HIGH, LOW and VACUUM intensity symbols
    resolution_bits : int
        Width of the uniform integers used for biasing, by default 16
    retention_factor : int
        Retention buffer size in units of the board buffer, by default 4
    """

    kind: SourceKind = field(default=SourceKind.CSPRNG)
    rate_bps: Optional[float] = field(default=None, skip_if_default=True)
    p_pol: list[float] = field(default_factory=lambda: [1 / 3, 1 / 3, 1 / 3])
    p_decoy: list[float] = field(default_factory=lambda: [0.7, 0.2, 0.1])
    resolution_bits: int = field(default=DEFAULT_RESOLUTION_BITS, skip_if_default=True)
    retention_factor: int = field(default=RETENTION_FACTOR, skip_if_default=True)

    def __post_init__(self):
        self.kind = SourceKind(self.kind)
        if self.retention_factor < 1:
            raise ValueError("The retention buffer must hold at least the board buffer")
        self.bias_config()

    def bias_config(self) -> BiasConfig:
        return BiasConfig(tuple(self.p_pol), tuple(self.p_decoy), self.resolution_bits)

    def to_toml(self) -> str:
        obj = {"source": self}
        return to_toml(obj)


@serialize
@dataclass
class ChannelOptions:
    """Optical channel and receiver options

    Parameters
    ----------
    transmittance : float
        Channel transmittance, by default 0.1
    efficiency : float
        Detector efficiency, by default 1
    dark_count : float
        Dark count probability per slot, by default 0
    p_key_basis : float
        Receiver's probability of measuring in the key basis, by default 0.5
    error_rate : float
        Injected bit-flip probability, by default 0
    report_slots : int
        Slots per detection report, by default 10^6
    """

    transmittance: float = field(default=0.1)
    efficiency: float = field(default=1.0, skip_if_default=True)
    dark_count: float = field(default=0.0, skip_if_default=True)
    p_key_basis: float = field(default=0.5, skip_if_default=True)
    error_rate: float = field(default=0.0, skip_if_default=True)
    report_slots: int = field(default=REPORT_SLOTS, skip_if_default=True)

    def __post_init__(self):
        if self.report_slots < 1:
            raise ValueError("report_slots must be positive")
        self.channel_model()
        self.measurement_model()

    def channel_model(self, seed: Optional[int] = None) -> ChannelModel:
        return ChannelModel(self.transmittance, self.efficiency, self.dark_count, seed)

    def measurement_model(self, seed: Optional[int] = None) -> MeasurementModel:
        return MeasurementModel(self.p_key_basis, self.error_rate, seed)

    def to_toml(self) -> str:
        obj = {"channel": self}
        return to_toml(obj)


@serialize
@dataclass
class SamplerOptions:
    """SPD reader options for the bottom-up QRNG path

    Parameters
    ----------
    event_rate_hz : float
        Mean detector pulse rate of each of the two detectors. The default, ln(2) times the
        clock, makes a sampled bit one with probability 1/2.
    threshold : int
        Bits accumulated before an extraction, by default 32
    window_ticks : int
        Ticks sampled per processing step
    """

    event_rate_hz: float = field(default=0.6931471805599453 * DEFAULT_CLOCK_HZ)
    threshold: int = field(default=WORD_BITS, skip_if_default=True)
    window_ticks: int = field(default=1 << 20, skip_if_default=True)

    def __post_init__(self):
        if self.event_rate_hz <= 0 or self.threshold < 1 or self.window_ticks < 1:
            raise ValueError("Sampler rates and sizes must be positive")

    def to_toml(self) -> str:
        obj = {"sampler": self}
        return to_toml(obj)


@serialize
@dataclass
class StallOptions:
    """Source stall injection

    Parameters
    ----------
    start : float
        Logical time in seconds at which the source stops delivering
    duration : float
        Length of the stall in seconds, by default 0 (no stall)
    """

    start: float = field(default=1.0)
    duration: float = field(default=0.0)

    def __post_init__(self):
        if self.start < 0 or self.duration < 0:
            raise ValueError("Stall start and duration must be >= 0")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration

    def to_toml(self) -> str:
        obj = {"stall": self}
        return to_toml(obj)


def _coerce(value, cls):
    if value is None or isinstance(value, cls):
        return value
    return cls(**value)


@serialize
@dataclass
class ScenarioOptions:
    """Scenario options

    The whole run configuration, convertible to and from TOML. A scenario wires the source
    twin, the board twin and, depending on ``mode``, the receiver twin or the QRNG path.

    Parameters
    ----------
    name : str
        filename-friendly name used for outputs of this scenario
    mode : str
        One of "TX_LOOPBACK", "TX_RX_FULL", "QRNG_BOTTOM_UP" or "SOAK"
    duration : float
        Run length in (logical) seconds
    seed : Optional[int]
        Master seed. With a seed the run is reproducible; without one the CSPRNG is keyed from
        OS entropy.
    time_model : str
        "AS_FAST_AS_POSSIBLE" decouples the qubit clock from wall time, "REAL_TIME_THROTTLED"
        emits slots at the configured repetition rate
    qber_threshold : float
        Runs whose QBER exceeds this value fail, by default 0.11
    output_directory : Optional[Path]
        Where reports are written, by default the current directory
    clock, offsets, memory, buffer, transport, source, channel, sampler, stall
        Option blocks, see the individual classes
    version : str
        The version of `qkd_twin` this configuration is valid with. Typically not set by user.

    Examples
    --------
    >>> conf = ScenarioOptions(
            name="loopback",
            mode="TX_LOOPBACK",
            duration=60,
            seed=4796,
        )
    >>> print(conf.to_toml())

    .. code-block:: toml

        name = "loopback"
        mode = "TX_LOOPBACK"
        duration = 60.0
        seed = 4796
        version = "0.1.0"

        [clock]
        clock_hz = 200000000.0
        slot_ticks = 4
    """

    name: str
    mode: Mode = field(default=Mode.TX_LOOPBACK)
    duration: float = field(default=60.0)
    seed: Optional[int] = field(default=None, skip_if_default=True)
    time_model: TimeModel = field(default=TimeModel.AS_FAST_AS_POSSIBLE)
    qber_threshold: float = field(default=0.11, skip_if_default=True)
    output_directory: Optional[Path] = field(default=None, skip_if_default=True)
    clock: ClockOptions = field(default_factory=ClockOptions)
    offsets: OffsetOptions = field(default_factory=OffsetOptions)
    memory: MemoryOptions = field(default_factory=MemoryOptions)
    buffer: BufferOptions = field(default_factory=BufferOptions)
    transport: TransportOptions = field(default_factory=TransportOptions)
    source: SourceOptions = field(default_factory=SourceOptions)
    channel: ChannelOptions = field(default_factory=ChannelOptions)
    sampler: SamplerOptions = field(default_factory=SamplerOptions)
    stall: StallOptions = field(default_factory=StallOptions)
    version: str = qtw.__version__

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.time_model = TimeModel(self.time_model)
        self.duration = float(self.duration)
        if self.duration <= 0:
            raise ValueError(f"duration must be positive (got {self.duration})")
        if not 0 <= self.qber_threshold <= 1:
            raise ValueError(f"qber_threshold must be in [0, 1] (got {self.qber_threshold})")
        if self.output_directory is not None:
            self.output_directory = Path(self.output_directory)
        self.clock = _coerce(self.clock, ClockOptions)
        self.offsets = _coerce(self.offsets, OffsetOptions)
        self.memory = _coerce(self.memory, MemoryOptions)
        self.buffer = _coerce(self.buffer, BufferOptions)
        self.transport = _coerce(self.transport, TransportOptions)
        self.source = _coerce(self.source, SourceOptions)
        self.channel = _coerce(self.channel, ChannelOptions)
        self.sampler = _coerce(self.sampler, SamplerOptions)
        self.stall = _coerce(self.stall, StallOptions)
        # cross-block checks
        self.offsets.channel_offsets().validate(self.clock.clock_config())
        self.buffer.ring_config(self.memory)

    @property
    def real_time(self) -> bool:
        return self.time_model is TimeModel.REAL_TIME_THROTTLED

    def to_toml(self) -> str:
        return to_toml(self)
