# FPGA clock
DEFAULT_CLOCK_HZ = 200e6  # Hz
CLOCK_RANGE_HZ = (100e6, 200e6)
# 4 ticks at 200 MHz gives the 50 MHz repetition rate of the stream tests
DEFAULT_SLOT_TICKS = 4
MIN_SLOT_TICKS = 3
DEFAULT_MAX_LOOKAHEAD = 4  # slots

# BRAM: 32768 words of 32 bits = 1 Mibit per stream
WORD_BITS = 32
WORD_BYTES = WORD_BITS // 8
SYMBOL_BITS = 2
SYMBOLS_PER_BYTE = 8 // SYMBOL_BITS
SYMBOLS_PER_WORD = WORD_BITS // SYMBOL_BITS
DEFAULT_TOTAL_WORDS = 32768
SYNC_STAGES = 2

# CPU0 staging buffer: 10 blocks of 18.75 MiB = 187.5 MiB per stream
DEFAULT_BLOCK_BYTES = 19_660_800
DEFAULT_N_BLOCKS = 10
DEFAULT_CHUNK_BYTES = DEFAULT_TOTAL_WORDS // 2 * WORD_BYTES  # 64 KiB

# TCP ports
DEFAULT_HOST = "127.0.0.1"
COMMAND_PORT = 7000
POL_DATA_PORT = 7001
DECOY_DATA_PORT = 7002
DETECTIONS_PORT = 7003
STATUS_LATENCY_S = 0.1

# PC side
DEFAULT_RESOLUTION_BITS = 16
RETENTION_FACTOR = 4  # retention buffer size relative to the board buffer
DEFAULT_LINK_BPS = 600e6  # sustained gigabit-ethernet throughput
REPORT_SLOTS = 1_000_000  # slots per detection report
