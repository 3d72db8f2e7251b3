from .config import *

__all__ = ["TX_LOOPBACK", "TX_RX_FULL", "QRNG_BOTTOM_UP", "SOAK", "TEMPLATES"]

# blocks of 4 memory halves keep receiver runs at desk scale
SMALL_BLOCK_BYTES = 4 * MemoryOptions().half_bytes

TX_LOOPBACK = ScenarioOptions(
    name="loopback",
    mode=Mode.TX_LOOPBACK,
    duration=60,
    seed=4796,
    source=SourceOptions(retention_factor=2),
)

TX_RX_FULL = ScenarioOptions(
    name="txrx",
    mode=Mode.TX_RX_FULL,
    duration=1,
    seed=4796,
    buffer=BufferOptions(block_bytes=SMALL_BLOCK_BYTES),
    channel=ChannelOptions(transmittance=0.1),
)

QRNG_BOTTOM_UP = ScenarioOptions(
    name="qrng",
    mode=Mode.QRNG_BOTTOM_UP,
    duration=0.05,
    seed=4796,
    sampler=SamplerOptions(),
)

SOAK = ScenarioOptions(
    name="soak",
    mode=Mode.SOAK,
    duration=600,
    seed=4796,
    stall=StallOptions(start=1, duration=0),
)

TEMPLATES = {
    Mode.TX_LOOPBACK: TX_LOOPBACK,
    Mode.TX_RX_FULL: TX_RX_FULL,
    Mode.QRNG_BOTTOM_UP: QRNG_BOTTOM_UP,
    Mode.SOAK: SOAK,
}
