"""
PC-side twin: randomness production, block serving and sifting selection around a chunked
retention buffer.
"""
import hashlib
import logging
import os
import queue
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Union

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms
from numpy.typing import ArrayLike, NDArray

from qkd_twin.constants import (
    DEFAULT_BLOCK_BYTES,
    DEFAULT_N_BLOCKS,
    DEFAULT_RESOLUTION_BITS,
    RETENTION_FACTOR,
    SYMBOLS_PER_BYTE,
)
from qkd_twin.encoding import PolarizationSymbol, pack_symbols
from qkd_twin.memory import StreamId
from qkd_twin.transport import DataFrame

logger = logging.getLogger(__name__)


class SourceStall(RuntimeError):
    pass


class BufferDry(RuntimeError):
    pass


class ChunkAlreadyReleased(RuntimeError):
    pass


class InsufficientEntropy(ValueError):
    pass


class IndexOutOfRange(ValueError):
    pass


class SourceKind(str, Enum):
    QRNG_EMULATED = "QRNG_EMULATED"
    CSPRNG = "CSPRNG"


def seed_key(seed: Union[int, bytes, None]) -> bytes:
    """32-byte ChaCha20 key from a replay seed, or from OS entropy when ``seed`` is None."""
    if seed is None:
        return os.urandom(32)
    if isinstance(seed, int):
        seed = seed.to_bytes(16, "little", signed=True)
    return hashlib.blake2b(seed, digest_size=32).digest()


class ChaChaSource:
    """
    ChaCha20 keystream (20 rounds, 96-bit nonce, 32-bit block counter) used as a CSPRNG.

    Parameters
    ----------
    seed : int, bytes or None
        Replay seed hashed into the key; None draws a fresh key from OS entropy
    key : bytes, optional
        Explicit 32-byte key, overrides ``seed``
    nonce : bytes
        12-byte nonce
    counter : int
        Initial block counter
    """

    kind = SourceKind.CSPRNG

    def __init__(self, seed=None, key: Optional[bytes] = None, nonce=bytes(12), counter: int = 0):
        if key is None:
            key = seed_key(seed)
        if len(key) != 32 or len(nonce) != 12:
            raise ValueError("ChaCha20 needs a 32-byte key and a 12-byte nonce")
        full_nonce = counter.to_bytes(4, "little") + bytes(nonce)
        self._encryptor = Cipher(algorithms.ChaCha20(key, full_nonce), mode=None).encryptor()
        self.bytes_produced = 0

    def random_bytes(self, nbytes: int) -> bytes:
        self.bytes_produced += nbytes
        return self._encryptor.update(bytes(nbytes))


class QrngEmulator:
    """
    Rate-limited uniform bit source standing in for a physical QRNG.

    Parameters
    ----------
    rate_bps : Optional[float]
        Sustained output rate; None means unlimited
    seed : Optional[int]
    clock : Callable[[], float]
        Time source in seconds, ``time.monotonic`` unless driven by a logical clock
    """

    kind = SourceKind.QRNG_EMULATED

    def __init__(
        self,
        rate_bps: Optional[float] = None,
        seed: Optional[int] = None,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.rate_bps = rate_bps
        self.rng = np.random.default_rng(seed)
        self.clock = clock
        self._t0 = clock()
        self.bytes_produced = 0
        self.stalls = 0

    def credit_bytes(self) -> float:
        if self.rate_bps is None:
            return np.inf
        return (self.clock() - self._t0) * self.rate_bps / 8 - self.bytes_produced

    def random_bytes(self, nbytes: int) -> bytes:
        if nbytes > self.credit_bytes():
            self.stalls += 1
            raise SourceStall(
                f"QRNG at {self.rate_bps:.3g} b/s cannot supply {nbytes} bytes yet"
            )
        self.bytes_produced += nbytes
        return self.rng.integers(0, 256, nbytes, dtype=np.uint8).tobytes()


def make_source(kind: SourceKind, seed=None, rate_bps: Optional[float] = None, **kwargs):
    match SourceKind(kind):
        case SourceKind.CSPRNG:
            return ChaChaSource(seed)
        case SourceKind.QRNG_EMULATED:
            return QrngEmulator(rate_bps, seed, **kwargs)


def produce_uniform(source, nbits: int) -> NDArray:
    """
    Draw ``nbits`` uniform bits (LSB-first within each byte).

    Raises
    ------
    SourceStall
        If a rate-limited source cannot keep up
    """
    if nbits == 0:
        return np.empty(0, dtype=np.uint8)
    raw = np.frombuffer(source.random_bytes(-(-nbits // 8)), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:nbits]


@dataclass(frozen=True)
class BiasConfig:
    """
    Three-way symbol distributions.

    Parameters
    ----------
    p_pol : tuple
        Probabilities of H, V, D
    p_decoy : tuple
        Probabilities of HIGH, LOW, VACUUM
    resolution_bits : int
        Width of the uniform integer compared against the cumulative thresholds
    """

    p_pol: tuple = (1 / 3, 1 / 3, 1 / 3)
    p_decoy: tuple = (0.7, 0.2, 0.1)
    resolution_bits: int = DEFAULT_RESOLUTION_BITS

    def __post_init__(self):
        if not 1 <= self.resolution_bits <= 32:
            raise ValueError(f"resolution_bits must be in [1, 32] (got {self.resolution_bits})")
        for name in ("p_pol", "p_decoy"):
            p = np.asarray(getattr(self, name), dtype=np.float64)
            if p.shape != (3,) or np.any(p < 0):
                raise ValueError(f"{name} must hold three nonnegative probabilities")
            if abs(p.sum() - 1) > 2.0**-self.resolution_bits:
                raise ValueError(f"{name} sums to {p.sum()}, not 1")
            object.__setattr__(self, name, tuple(float(x) for x in p))

    def probabilities(self, category) -> tuple:
        return self.p_pol if StreamId(category) is StreamId.POL else self.p_decoy

    def thresholds(self, category) -> NDArray:
        """Cumulative thresholds in units of ``2**-resolution_bits``; the last is exactly one."""
        scale = 2**self.resolution_bits
        cum = np.round(np.cumsum(self.probabilities(category)) * scale).astype(np.int64)
        cum[-1] = scale
        return cum


def _uniform_ints(uniform, resolution: int, n: int) -> NDArray:
    """
    Turn the uniform input into ``n`` integers of ``resolution`` bits. Bytes-like input is read
    as raw little-endian bytes, array input as individual bits.
    """
    if isinstance(uniform, (bytes, bytearray, memoryview)):
        raw = np.frombuffer(uniform, dtype=np.uint8)
        if resolution in (8, 16, 32):
            need = n * resolution // 8
            if raw.size < need:
                raise InsufficientEntropy(f"{need} bytes needed, {raw.size} given")
            return raw[:need].view(f"<u{resolution // 8}")
        bits = np.unpackbits(raw, bitorder="little")
    else:
        bits = np.asarray(uniform, dtype=np.uint8).reshape(-1)
    need = n * resolution
    if bits.size < need:
        raise InsufficientEntropy(f"{need} uniform bits needed, {bits.size} given")
    weights = np.left_shift(np.int64(1), np.arange(resolution, dtype=np.int64))
    return bits[:need].reshape(n, resolution).astype(np.int64) @ weights


def bias_symbols(uniform, cfg: BiasConfig, category, n: int) -> NDArray:
    """
    Draw ``n`` symbols of one category by inverse-CDF comparison of ``resolution_bits``-wide
    uniform integers against the cumulative thresholds.

    Raises
    ------
    InsufficientEntropy
        If fewer than ``n * resolution_bits`` uniform bits are supplied
    """
    ints = _uniform_ints(uniform, cfg.resolution_bits, n)
    symbols = np.zeros(ints.size, dtype=np.uint8)
    for threshold in cfg.thresholds(category)[:-1]:
        symbols += ints >= threshold
    return symbols


class SymbolSource:
    """Biased symbol generator for both streams on top of a uniform source."""

    def __init__(self, source, bias: BiasConfig = BiasConfig()):
        self.source = source
        self.bias = bias

    def symbols(self, category, n: int) -> NDArray:
        nbits = n * self.bias.resolution_bits
        if nbits % 8 == 0:
            uniform = self.source.random_bytes(nbits // 8)
        else:
            uniform = produce_uniform(self.source, nbits)
        return bias_symbols(uniform, self.bias, category, n)


class ChunkState(Enum):
    WRITABLE = "writable"
    FILLED = "filled"
    SENT_PENDING_SIFT = "sent_pending_sift"
    RELEASED = "released"


@dataclass
class Chunk:
    state: ChunkState = ChunkState.WRITABLE
    seq: Optional[int] = None
    payloads: dict = field(default_factory=dict, repr=False)
    sent: set = field(default_factory=set)


@dataclass(frozen=True)
class DetectionReport:
    """
    Detected slot indices reported by the receiver, without measurement outcomes.

    Parameters
    ----------
    indices : NDArray
        Strictly increasing uint64 slot indices
    basis : Optional[NDArray]
        Measurement basis per index (0 key basis, 1 check basis)
    covered_until : Optional[int]
        Every slot below this index has been reported on; fully covered chunks are released
    """

    indices: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint64))
    basis: Optional[NDArray] = None
    covered_until: Optional[int] = None

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.uint64).reshape(-1)
        if indices.size > 1 and np.any(indices[1:] <= indices[:-1]):
            raise ValueError("Detection indices must be strictly increasing")
        object.__setattr__(self, "indices", indices)
        if self.basis is not None:
            basis = np.asarray(self.basis, dtype=np.uint8).reshape(-1)
            if basis.shape != indices.shape:
                raise ValueError("One basis value is needed per detection index")
            object.__setattr__(self, "basis", basis)
        if self.covered_until is not None and indices.size and indices[-1] >= self.covered_until:
            raise ValueError("covered_until must lie past the last reported index")

    def __len__(self):
        return self.indices.size

    def to_params(self) -> dict:
        params = {"indices": self.indices.tolist()}
        if self.basis is not None:
            params["basis"] = self.basis.tolist()
        if self.covered_until is not None:
            params["covered_until"] = int(self.covered_until)
        return params

    @classmethod
    def from_params(cls, params: dict) -> "DetectionReport":
        return cls(
            np.asarray(params.get("indices", []), dtype=np.uint64),
            params.get("basis"),
            params.get("covered_until"),
        )


@dataclass
class SiftedRecord:
    """Transmitted (polarization, decoy) pairs at the detected slots."""

    indices: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint64))
    pol: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint8))
    decoy: NDArray = field(default_factory=lambda: np.empty(0, dtype=np.uint8))
    basis: Optional[NDArray] = None

    def __len__(self):
        return self.indices.size

    @property
    def sent_basis(self) -> NDArray:
        """Basis of each transmitted state, 1 for the diagonal state."""
        return (self.pol == PolarizationSymbol.D).astype(np.uint8)

    @classmethod
    def concatenate(cls, records) -> "SiftedRecord":
        records = list(records)
        if not records:
            return cls()
        basis = None
        if all(r.basis is not None for r in records):
            basis = np.concatenate([r.basis for r in records])
        return cls(
            np.concatenate([r.indices for r in records]),
            np.concatenate([r.pol for r in records]),
            np.concatenate([r.decoy for r in records]),
            basis,
        )


def _codes_at(payload: bytes, offsets: NDArray) -> NDArray:
    data = np.frombuffer(payload, dtype=np.uint8)
    byte = data[offsets // SYMBOLS_PER_BYTE]
    return (byte >> (2 * (offsets % SYMBOLS_PER_BYTE)).astype(np.uint8)) & 0b11


class RetentionBuffer:
    """
    Circular store of produced symbol chunks shared by the producer, the block server and the
    sift consumer.

    A chunk holds one block of each stream. The producer takes a ``free`` permit to write a
    chunk; each stream's server takes a ``filled`` permit to send it. A chunk returns to the
    producer only after sifting has covered it.

    Parameters
    ----------
    block_bytes : int
        Packed bytes per stream per chunk, equal to the board block size
    n_chunks : int
        Chunks retained, by default four times the board buffer
    """

    def __init__(
        self,
        block_bytes: int = DEFAULT_BLOCK_BYTES,
        n_chunks: int = RETENTION_FACTOR * DEFAULT_N_BLOCKS,
    ):
        if block_bytes <= 0 or n_chunks <= 0:
            raise ValueError("Retention buffer sizes must be positive")
        self.block_bytes = block_bytes
        self.n_chunks = n_chunks
        self.chunks = [Chunk() for _ in range(n_chunks)]
        self.free = threading.Semaphore(n_chunks)
        self.filled = {s: threading.Semaphore(0) for s in StreamId}
        self.next_produce = 0
        self.next_serve = {s: 0 for s in StreamId}
        self.released_upto = 0
        self.symbols_produced = 0
        self.symbols_sent = {s: 0 for s in StreamId}
        self.symbols_sifted = 0
        self.dry = 0
        self._lock = threading.Lock()

    @property
    def chunk_symbols(self) -> int:
        return self.block_bytes * SYMBOLS_PER_BYTE

    @property
    def sent_slots(self) -> int:
        """Slots transmitted on both streams."""
        return min(self.next_serve.values()) * self.chunk_symbols

    def _slot(self, seq: int) -> Chunk:
        return self.chunks[seq % self.n_chunks]

    def reserve(self, timeout: Optional[float] = None) -> bool:
        """Take a free permit for the next chunk."""
        return self.free.acquire(timeout=timeout)

    def cancel(self):
        self.free.release()

    def write_chunk(self, pol: ArrayLike, decoy: ArrayLike, timeout: Optional[float] = None) -> int:
        """
        Store the next chunk of symbols. Blocks until a chunk is writable.

        Returns
        -------
        int
            Sequence number of the chunk, or -1 if no chunk became writable within ``timeout``
        """
        if not self.reserve(timeout):
            return -1
        return self.commit(pol, decoy)

    def commit(self, pol: ArrayLike, decoy: ArrayLike) -> int:
        """Store a chunk into the slot held by a previous ``reserve``."""
        payloads = {StreamId.POL: pack_symbols(pol), StreamId.DECOY: pack_symbols(decoy)}
        for stream, payload in payloads.items():
            if len(payload) != self.block_bytes:
                self.cancel()
                raise ValueError(
                    f"{stream.name} chunk packs to {len(payload)} bytes, not {self.block_bytes}"
                )
        with self._lock:
            seq = self.next_produce
            chunk = self._slot(seq)
            chunk.seq = seq
            chunk.payloads = payloads
            chunk.sent = set()
            chunk.state = ChunkState.FILLED
            self.next_produce += 1
            self.symbols_produced += self.chunk_symbols
        for stream in StreamId:
            self.filled[stream].release()
        return seq

    def sent_payload(self, stream_id, seq: int) -> bytes:
        with self._lock:
            chunk = self._slot(seq)
            if chunk.seq != seq or StreamId(stream_id) not in chunk.sent:
                raise ChunkAlreadyReleased(f"Chunk {seq} is no longer retained")
            return chunk.payloads[StreamId(stream_id)]

    def serve_block(self, stream_id, seq: int, timeout: Optional[float] = 0) -> DataFrame:
        """
        Build the data frame answering ``NEED_BLOCK(stream_id, seq)``. A repeated request for a
        block already sent returns the identical payload.

        Raises
        ------
        BufferDry
            If no produced chunk becomes available within ``timeout``
        """
        stream_id = StreamId(stream_id)
        if seq < self.next_serve[stream_id]:
            return DataFrame(stream_id, seq, self.sent_payload(stream_id, seq))
        if seq > self.next_serve[stream_id]:
            raise ValueError(
                f"{stream_id.name} block {seq} requested before {self.next_serve[stream_id]}"
            )
        blocking = timeout is None or timeout > 0
        if not self.filled[stream_id].acquire(blocking, timeout if blocking else None):
            self.dry += 1
            raise BufferDry(f"No produced {stream_id.name} block for request {seq}")
        with self._lock:
            chunk = self._slot(seq)
            chunk.sent.add(stream_id)
            if len(chunk.sent) == len(StreamId):
                chunk.state = ChunkState.SENT_PENDING_SIFT
            self.next_serve[stream_id] += 1
            self.symbols_sent[stream_id] += self.chunk_symbols
            payload = chunk.payloads[stream_id]
        return DataFrame(stream_id, seq, payload)

    def select_sifted(self, report: DetectionReport) -> SiftedRecord:
        """
        Look up the transmitted pairs at the reported slots and release every chunk the report
        fully covers.

        Raises
        ------
        IndexOutOfRange
            If an index lies beyond the slots sent on both streams
        ChunkAlreadyReleased
            If an index falls into a chunk that was already sifted
        """
        indices = report.indices
        with self._lock:
            if indices.size and int(indices[-1]) >= self.sent_slots:
                raise IndexOutOfRange(
                    f"Slot {int(indices[-1])} was never sent ({self.sent_slots} slots sent)"
                )
            seqs = (indices // np.uint64(self.chunk_symbols)).astype(np.int64)
            if seqs.size and seqs[0] < self.released_upto:
                raise ChunkAlreadyReleased(f"Chunk {int(seqs[0])} has already been sifted")
            pol = np.empty(indices.size, dtype=np.uint8)
            decoy = np.empty(indices.size, dtype=np.uint8)
            for seq in np.unique(seqs).tolist():
                chunk = self._slot(seq)
                mask = seqs == seq
                offsets = (indices[mask] - np.uint64(seq * self.chunk_symbols)).astype(np.int64)
                pol[mask] = _codes_at(chunk.payloads[StreamId.POL], offsets)
                decoy[mask] = _codes_at(chunk.payloads[StreamId.DECOY], offsets)
            self.symbols_sifted += indices.size
            released = self._release(report.covered_until)
        for _ in range(released):
            self.free.release()
        return SiftedRecord(indices, pol, decoy, report.basis)

    def _release(self, covered_until: Optional[int]) -> int:
        if covered_until is None:
            return 0
        last = min(covered_until, self.sent_slots) // self.chunk_symbols
        released = 0
        for seq in range(self.released_upto, last):
            chunk = self._slot(seq)
            chunk.state = ChunkState.RELEASED
            chunk.payloads = {}
            chunk.sent = set()
            released += 1
        self.released_upto = max(self.released_upto, last)
        return released

    def states(self) -> list[ChunkState]:
        with self._lock:
            return [c.state for c in self.chunks]

    def counters(self) -> dict:
        return {
            "symbols_produced": self.symbols_produced,
            "symbols_sent_pol": self.symbols_sent[StreamId.POL],
            "symbols_sent_decoy": self.symbols_sent[StreamId.DECOY],
            "symbols_sifted": self.symbols_sifted,
            "dry": self.dry,
        }


def serve_blocks(
    buffer: RetentionBuffer,
    requests: queue.Queue,
    send: Callable[[DataFrame], None],
    stop: threading.Event,
    retry: float = 0.01,
    paused: Optional[threading.Event] = None,
):
    """
    Block server loop: answer ``(stream_id, seq)`` requests with data frames until ``stop``.
    Requests hitting a dry buffer are retried, which delays the send. While ``paused`` is set
    nothing is sent.
    """
    while not stop.is_set():
        if paused is not None and paused.is_set():
            time.sleep(retry)
            continue
        try:
            stream_id, seq = requests.get(timeout=retry)
        except queue.Empty:
            continue
        while not stop.is_set():
            try:
                frame = buffer.serve_block(stream_id, seq, timeout=retry)
            except BufferDry:
                continue
            send(frame)
            break


def select_sifted(buffer: RetentionBuffer, report: DetectionReport) -> SiftedRecord:
    return buffer.select_sifted(report)


class SourceNode:
    """
    The three PC roles as threads: producer, block server and sift consumer.

    Parameters
    ----------
    symbols : SymbolSource
    buffer : RetentionBuffer
    send : Callable[[DataFrame], None]
        Sends a data frame to the board
    """

    def __init__(self, symbols: SymbolSource, buffer: RetentionBuffer, send):
        self.symbols = symbols
        self.buffer = buffer
        self.send = send
        self.requests: queue.Queue = queue.Queue()
        self.reports: queue.Queue = queue.Queue()
        self.sifted: list[SiftedRecord] = []
        self.stalls = 0
        self.error: Optional[BaseException] = None
        self.paused = threading.Event()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    def produce_chunk(self, timeout: Optional[float] = None) -> int:
        """
        Generate and store one chunk, or return -1 if none became writable within ``timeout``.
        Randomness is drawn only once a chunk is reserved, so the produced sequence does not
        depend on timing.
        """
        if not self.buffer.reserve(timeout):
            return -1
        n = self.buffer.chunk_symbols
        try:
            pol = self.symbols.symbols(StreamId.POL, n)
            decoy = self.symbols.symbols(StreamId.DECOY, n)
        except BaseException:
            self.buffer.cancel()
            raise
        return self.buffer.commit(pol, decoy)

    def _produce_loop(self, poll: float = 0.01):
        while not self._stop.is_set():
            if self.paused.is_set():
                time.sleep(poll)
                continue
            try:
                self.produce_chunk(timeout=poll)
            except SourceStall:
                self.stalls += 1
                time.sleep(poll)

    def _sift_loop(self, poll: float = 0.01):
        while not self._stop.is_set():
            try:
                report = self.reports.get(timeout=poll)
            except queue.Empty:
                continue
            try:
                self.sifted.append(self.buffer.select_sifted(report))
            except (IndexOutOfRange, ChunkAlreadyReleased) as e:
                logger.error(f"Sifting failed: {e}")
                self.error = e
                return

    def start(self):
        self._stop.clear()
        targets = {
            "producer": self._produce_loop,
            "server": lambda: serve_blocks(
                self.buffer, self.requests, self.send, self._stop, paused=self.paused
            ),
            "sifter": self._sift_loop,
        }
        for name, target in targets.items():
            thread = threading.Thread(target=target, name=f"qtw-{name}", daemon=True)
            thread.start()
            self._threads.append(thread)

    def stop(self, timeout: float = 5):
        self._stop.set()
        for thread in self._threads:
            thread.join(timeout)
        self._threads = []

    def sifted_record(self) -> SiftedRecord:
        return SiftedRecord.concatenate(self.sifted)
