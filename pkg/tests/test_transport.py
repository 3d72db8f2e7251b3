import numpy as np
import pytest

from qkd_twin.memory import StreamId
from qkd_twin.transport import (
    HEADER_SIZE,
    BadMagic,
    CommandMessage,
    DataFrame,
    EndpointConfig,
    FrameDecoder,
    FrameError,
    LengthOverflow,
    MessageDecoder,
    Opcode,
    SequenceGap,
    decode_frame,
    encode_frame,
    parse_header,
)


def test_header_layout():
    data = encode_frame(DataFrame(StreamId.DECOY, 258, b"\x01\x02\x03"))
    assert HEADER_SIZE == 13
    assert data[:4] == b"QKD1"
    assert data[4] == 1
    assert data[5:9] == bytes([0, 0, 1, 2])
    assert data[9:13] == bytes([0, 0, 0, 3])
    assert data[13:] == b"\x01\x02\x03"


def test_decode_frame():
    frame = DataFrame(StreamId.POL, 5, bytes(range(100)))
    assert decode_frame(encode_frame(frame)) == frame


class TestHeaderErrors:
    def test_bad_magic(self):
        data = b"QKD2" + encode_frame(DataFrame(StreamId.POL, 0, b"x"))[4:]
        with pytest.raises(BadMagic):
            parse_header(data)

    def test_length_overflow(self):
        data = encode_frame(DataFrame(StreamId.POL, 0, bytes(17)))
        with pytest.raises(LengthOverflow):
            parse_header(data, max_length=16)

    def test_unknown_stream(self):
        data = bytearray(encode_frame(DataFrame(StreamId.POL, 0, b"")))
        data[4] = 9
        with pytest.raises(FrameError):
            parse_header(data)

    def test_truncated(self):
        data = encode_frame(DataFrame(StreamId.POL, 0, b"abcd"))
        with pytest.raises(FrameError):
            decode_frame(data[:10])
        with pytest.raises(FrameError):
            decode_frame(data[:-1])

    def test_sequence_range(self):
        with pytest.raises(ValueError):
            DataFrame(StreamId.POL, 2**32)


class TestFrameDecoder:
    def test_split_feeds(self):
        frames = [DataFrame(StreamId(i % 2), i // 2, bytes([i]) * (i + 1)) for i in range(6)]
        stream = b"".join(encode_frame(f) for f in frames)
        decoder = FrameDecoder()
        out = []
        for i in range(0, len(stream), 7):
            out.extend(decoder.feed(stream[i : i + 7]))
        assert out == frames
        assert decoder.buffered == 0

    def test_sequence_gap(self):
        decoder = FrameDecoder()
        decoder.feed(encode_frame(DataFrame(StreamId.POL, 0, b"a")))
        with pytest.raises(SequenceGap, match="expected 1"):
            decoder.feed(encode_frame(DataFrame(StreamId.POL, 2, b"c")))
        with pytest.raises(FrameError):
            decoder.feed(b"")

    def test_frames_before_gap_delivered(self):
        decoder = FrameDecoder()
        good = [DataFrame(StreamId.POL, seq, bytes([seq]) * 4) for seq in (0, 1)]
        data = b"".join(encode_frame(f) for f in good)
        data += encode_frame(DataFrame(StreamId.POL, 5, b"late"))
        with pytest.raises(SequenceGap, match="expected 2") as excinfo:
            decoder.feed(data)
        assert excinfo.value.frames == good
        assert decoder.expected[StreamId.POL] == 2

    @pytest.mark.parametrize("seed", range(20))
    def test_random_bytes_only_raise_frame_errors(self, seed):
        rng = np.random.default_rng(seed)
        frames = [
            DataFrame(StreamId(i % 2), i // 2, rng.bytes(int(rng.integers(0, 40))))
            for i in range(8)
        ]
        data = bytearray(b"".join(encode_frame(f) for f in frames))
        if seed % 2:
            data = bytearray(rng.bytes(len(data)))
        else:
            for pos in rng.integers(0, len(data), 3):
                data[int(pos)] = int(rng.integers(0, 256))
        decoder = FrameDecoder(max_length=64)
        decoded = []
        pos = 0
        try:
            while pos < len(data):
                step = int(rng.integers(1, 50))
                decoded.extend(decoder.feed(bytes(data[pos : pos + step])))
                pos += step
        except FrameError as e:
            decoded.extend(e.frames)
        # whatever got through is in sequence on both streams
        for stream in StreamId:
            seqs = [f.seq for f in decoded if f.stream_id is stream]
            assert seqs == list(range(len(seqs)))
        assert all(f.length <= 64 for f in decoded)

    def test_streams_counted_separately(self):
        decoder = FrameDecoder(first_seq=10)
        data = encode_frame(DataFrame(StreamId.POL, 10)) + encode_frame(
            DataFrame(StreamId.DECOY, 10)
        )
        assert len(decoder.feed(data)) == 2
        assert decoder.expected == {StreamId.POL: 11, StreamId.DECOY: 11}

    def test_oversized_frame_rejected_before_payload(self):
        decoder = FrameDecoder(max_length=8)
        header = encode_frame(DataFrame(StreamId.POL, 0, bytes(9)))[:HEADER_SIZE]
        with pytest.raises(LengthOverflow):
            decoder.feed(header)


class TestCommandMessage:
    def test_request_ids_unique(self):
        a = CommandMessage.request("STATUS")
        b = CommandMessage.request(Opcode.STATUS)
        assert a.id != b.id
        assert not a.is_reply

    def test_ack_and_error_echo_id(self):
        msg = CommandMessage.request("SET_PARAM", clock_hz=200e6)
        ack = msg.ack(applied=True)
        assert ack.opcode is Opcode.ACK
        assert ack.id == msg.id
        assert ack.is_reply
        err = msg.error(ValueError("bad clock"))
        assert err.opcode is Opcode.ERROR
        assert err.id == msg.id
        assert err.params == {"error": "ValueError", "message": "bad clock"}

    def test_decoder_split_and_batched(self):
        messages = [
            CommandMessage.request("NEED_BLOCK", stream=0, seq=3),
            CommandMessage.request("DETECTIONS", slots=[1, 2], bases=[0, 1]),
        ]
        data = b"".join(m.to_bytes() for m in messages)
        decoder = MessageDecoder()
        out = decoder.feed(data[:5])
        out += decoder.feed(data[5:])
        assert [m.opcode for m in out] == [Opcode.NEED_BLOCK, Opcode.DETECTIONS]
        assert out[0].params == {"stream": 0, "seq": 3}
        assert out[1].id == messages[1].id

    def test_malformed_body(self):
        decoder = MessageDecoder()
        with pytest.raises(FrameError):
            decoder.feed(b"\x00\x00\x00\x02{}")

    def test_message_too_large(self):
        decoder = MessageDecoder(max_size=4)
        with pytest.raises(LengthOverflow):
            decoder.feed(CommandMessage.request("STATUS").to_bytes())


def test_endpoint_ports():
    endpoint = EndpointConfig()
    assert endpoint.data_port(StreamId.POL) == 7001
    assert endpoint.data_port(StreamId.DECOY) == 7002
    EndpointConfig(command_port=0, pol_port=0, decoy_port=0, detections_port=0)
    with pytest.raises(ValueError):
        EndpointConfig(pol_port=7000)
