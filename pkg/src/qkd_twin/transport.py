"""
Wire formats of the board link: binary data frames for the symbol streams and length-prefixed
JSON messages for the command socket.

Data frame layout (big-endian)::

    magic "QKD1" | stream_id u8 | seq u32 | length u32 | payload
"""
import struct
from dataclasses import dataclass
from enum import Enum
from itertools import count
from typing import Any, Optional

from serde import field, serde
from serde.json import from_json, to_json

from qkd_twin.constants import (
    COMMAND_PORT,
    DECOY_DATA_PORT,
    DEFAULT_BLOCK_BYTES,
    DEFAULT_HOST,
    DETECTIONS_PORT,
    POL_DATA_PORT,
)
from qkd_twin.memory import StreamId

MAGIC = b"QKD1"
HEADER = struct.Struct(">4sBII")
HEADER_SIZE = HEADER.size  # 13
MESSAGE_HEADER = struct.Struct(">I")
MAX_MESSAGE_SIZE = 64 * 1024 * 1024
PROTOCOL_VERSION = 1


class FrameError(ValueError):
    """Malformed data stream. ``frames`` holds the valid frames a decoder produced before it."""

    def __init__(self, *args, frames: Optional[list] = None):
        super().__init__(*args)
        self.frames = [] if frames is None else frames


class BadMagic(FrameError):
    pass


class LengthOverflow(FrameError):
    pass


class SequenceGap(FrameError):
    pass


@dataclass(frozen=True)
class DataFrame:
    stream_id: StreamId
    seq: int
    payload: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "stream_id", StreamId(self.stream_id))
        if not 0 <= self.seq < 2**32:
            raise ValueError(f"Sequence number {self.seq} does not fit in 32 bits")

    @property
    def length(self) -> int:
        return len(self.payload)


def encode_header(stream_id, seq: int, length: int) -> bytes:
    return HEADER.pack(MAGIC, int(stream_id), seq, length)


def encode_frame(frame: DataFrame) -> bytes:
    return encode_header(frame.stream_id, frame.seq, frame.length) + bytes(frame.payload)


def parse_header(data, max_length: int = DEFAULT_BLOCK_BYTES) -> tuple[StreamId, int, int]:
    """
    Validate a 13-byte header.

    Returns
    -------
    stream_id, seq, length
    """
    magic, stream, seq, length = HEADER.unpack(bytes(data[:HEADER_SIZE]))
    if magic != MAGIC:
        raise BadMagic(f"Bad frame magic {magic!r}")
    if stream not in StreamId._value2member_map_:
        raise FrameError(f"Unknown stream id {stream}")
    if length > max_length:
        raise LengthOverflow(f"Frame length {length} exceeds the limit of {max_length} bytes")
    return StreamId(stream), seq, length


def decode_frame(data, max_length: int = DEFAULT_BLOCK_BYTES) -> DataFrame:
    """
    Decode exactly one frame.

    Raises
    ------
    FrameError
        If the bytes are not one complete, valid frame
    """
    if len(data) < HEADER_SIZE:
        raise FrameError(f"Truncated header ({len(data)} bytes)")
    stream, seq, length = parse_header(data, max_length)
    if len(data) != HEADER_SIZE + length:
        raise FrameError(f"Frame declares {length} payload bytes, got {len(data) - HEADER_SIZE}")
    return DataFrame(stream, seq, bytes(data[HEADER_SIZE:]))


class FrameDecoder:
    """
    Incremental decoder over a byte stream that arrives in arbitrary pieces.

    Sequence numbers must be contiguous per stream starting from ``first_seq``. After any
    ``FrameError`` the decoder is unusable and the connection should be reset; the frames
    decoded from the same call before the fault travel on the error as ``frames``.
    """

    def __init__(self, max_length: int = DEFAULT_BLOCK_BYTES, first_seq: int = 0):
        self.max_length = max_length
        self.expected = {s: first_seq for s in StreamId}
        self._buffer = bytearray()
        self._failed = False

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    def feed(self, data) -> list[DataFrame]:
        if self._failed:
            raise FrameError("Decoder is in a failed state")
        self._buffer.extend(data)
        frames = []
        try:
            while len(self._buffer) >= HEADER_SIZE:
                stream, seq, length = parse_header(self._buffer, self.max_length)
                end = HEADER_SIZE + length
                if len(self._buffer) < end:
                    break
                if seq != self.expected[stream]:
                    raise SequenceGap(
                        f"{stream.name} frame {seq} received, expected {self.expected[stream]}"
                    )
                frames.append(DataFrame(stream, seq, bytes(self._buffer[HEADER_SIZE:end])))
                del self._buffer[:end]
                self.expected[stream] = seq + 1
        except FrameError as e:
            self._failed = True
            e.frames = frames
            raise
        return frames


class Opcode(str, Enum):
    HELLO = "HELLO"
    SET_PARAM = "SET_PARAM"
    START = "START"
    STOP = "STOP"
    STATUS = "STATUS"
    NEED_BLOCK = "NEED_BLOCK"
    DETECTIONS = "DETECTIONS"
    ACK = "ACK"
    ERROR = "ERROR"


REPLIES = (Opcode.ACK, Opcode.ERROR)
_ids = count(1)


@serde
@dataclass
class CommandMessage:
    """
    Command-plane message. Requests carry a fresh ``id``; the single ACK or ERROR answering
    a request carries the same ``id``.
    """

    opcode: Opcode
    id: int = 0
    params: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def request(cls, opcode, **params) -> "CommandMessage":
        return cls(Opcode(opcode), next(_ids), params)

    def ack(self, **params) -> "CommandMessage":
        return CommandMessage(Opcode.ACK, self.id, params)

    def error(self, exc: BaseException) -> "CommandMessage":
        return CommandMessage(
            Opcode.ERROR, self.id, {"error": type(exc).__name__, "message": str(exc)}
        )

    @property
    def is_reply(self) -> bool:
        return self.opcode in REPLIES

    def to_bytes(self) -> bytes:
        body = to_json(self).encode()
        if len(body) > MAX_MESSAGE_SIZE:
            raise LengthOverflow(f"Message of {len(body)} bytes is too large")
        return MESSAGE_HEADER.pack(len(body)) + body

    @classmethod
    def from_body(cls, body: bytes) -> "CommandMessage":
        try:
            return from_json(cls, body.decode())
        except Exception as e:
            raise FrameError(f"Malformed command message: {e}") from e


class MessageDecoder:
    """Incremental decoder of length-prefixed command messages."""

    def __init__(self, max_size: int = MAX_MESSAGE_SIZE):
        self.max_size = max_size
        self._buffer = bytearray()

    def feed(self, data) -> list[CommandMessage]:
        self._buffer.extend(data)
        messages = []
        while len(self._buffer) >= MESSAGE_HEADER.size:
            (size,) = MESSAGE_HEADER.unpack_from(self._buffer)
            if size > self.max_size:
                raise LengthOverflow(f"Message of {size} bytes is too large")
            end = MESSAGE_HEADER.size + size
            if len(self._buffer) < end:
                break
            body = bytes(self._buffer[MESSAGE_HEADER.size : end])
            messages.append(CommandMessage.from_body(body))
            del self._buffer[:end]
        return messages


@dataclass(frozen=True)
class EndpointConfig:
    """
    Addresses of the board link.

    Parameters
    ----------
    host : str
    command_port : int
    pol_port : int
    decoy_port : int
    detections_port : int
    token : Optional[str]
        Pre-shared token checked in the HELLO handshake, off by default
    """

    host: str = DEFAULT_HOST
    command_port: int = COMMAND_PORT
    pol_port: int = POL_DATA_PORT
    decoy_port: int = DECOY_DATA_PORT
    detections_port: int = DETECTIONS_PORT
    token: Optional[str] = None

    def __post_init__(self):
        ports = [self.command_port, self.pol_port, self.decoy_port, self.detections_port]
        # port 0 lets the OS pick a free port
        fixed = [p for p in ports if p != 0]
        if len(set(fixed)) != len(fixed):
            raise ValueError(f"Ports must be distinct (got {ports})")

    def data_port(self, stream_id) -> int:
        return self.pol_port if StreamId(stream_id) is StreamId.POL else self.decoy_port
