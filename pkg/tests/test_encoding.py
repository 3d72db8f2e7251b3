import itertools
import logging

import numpy as np
import pytest

from qkd_twin.encoding import (
    ChannelOffsets,
    ClockConfig,
    DecoySymbol,
    FrameBatch,
    InvalidSymbol,
    LengthMismatch,
    PolarizationSymbol,
    PositionMap,
    QubitSymbolPair,
    decode_lenient,
    encode_pair,
    frame_stream,
    pack_symbols,
    render_timeline,
    unpack_symbols,
)


class TestPacking:
    def test_lsb_first(self):
        assert pack_symbols([0b00, 0b01, 0b10, 0b00]).hex() == "24"
        assert pack_symbols([0b10]) == bytes([0b10])
        assert pack_symbols([0, 0, 0, 0, 1]) == bytes([0, 1])

    def test_empty(self):
        assert pack_symbols([]) == b""
        assert unpack_symbols(b"", 0).size == 0

    @pytest.mark.parametrize("code", [3, -1, 4])
    def test_invalid_code(self, code):
        with pytest.raises(InvalidSymbol):
            pack_symbols([0, 1, code])

    def test_inverse(self):
        rng = np.random.default_rng(4796)
        symbols = rng.integers(0, 3, 1001, dtype=np.uint8)
        packed = pack_symbols(symbols)
        assert len(packed) == 251
        np.testing.assert_array_equal(unpack_symbols(packed, symbols.size), symbols)

    def test_words_little_endian(self):
        # symbol i of a word sits at bits 2i..2i+1
        word = np.array([0b10 << 30 | 0b01 << 2], dtype="<u4")
        codes = unpack_symbols(word, 16)
        assert codes[1] == 0b01
        assert codes[15] == 0b10
        assert np.count_nonzero(codes) == 2

    def test_too_many(self):
        with pytest.raises(LengthMismatch):
            unpack_symbols(b"\x00", 5)

    def test_reserved_code(self):
        data = bytes([0b11_00_01_00])
        with pytest.raises(InvalidSymbol):
            unpack_symbols(data, 4)
        codes, n_reserved = decode_lenient(data, 4)
        assert n_reserved == 1
        np.testing.assert_array_equal(codes, [0, 1, 0, 0])
        np.testing.assert_array_equal(unpack_symbols(data, 4, strict=False), codes)


class TestClockConfig:
    def test_defaults(self):
        cfg = ClockConfig()
        assert cfg.repetition_hz == 50e6
        assert cfg.slot_ns == pytest.approx(20)

    def test_slot_too_short(self):
        with pytest.raises(ValueError):
            ClockConfig(slot_ticks=2)

    def test_out_of_range_warns(self, caplog):
        with caplog.at_level(logging.WARNING):
            ClockConfig(clock_hz=250e6)
        assert "outside" in caplog.text

    def test_offset_bound(self):
        cfg = ClockConfig()
        ChannelOffsets(laser=15).validate(cfg)
        with pytest.raises(ValueError):
            ChannelOffsets(laser=16).validate(cfg)
        with pytest.raises(ValueError):
            ChannelOffsets(polarization=-1)


@pytest.mark.parametrize(
    ("pol", "decoy"), list(itertools.product(PolarizationSymbol, DecoySymbol))
)
def test_encode_pair_table(pol, decoy):
    frame = encode_pair(QubitSymbolPair(pol, decoy))
    assert frame.pol_position in (0, 1, 2)
    assert frame.pol_position == int(pol)
    if decoy is DecoySymbol.VACUUM:
        assert frame.laser_tick is None
        assert frame.intensity_tick is None
        assert not frame.laser_pulse
    else:
        assert frame.laser_tick == 0
        assert frame.intensity_position in (0, 1)
        assert frame.intensity_position == int(decoy)


def test_encode_pair_positions_distinct():
    pol_positions = {encode_pair((p, DecoySymbol.HIGH)).pol_position for p in PolarizationSymbol}
    assert pol_positions == {0, 1, 2}
    intensity = {encode_pair((0, d)).intensity_position for d in DecoySymbol}
    assert intensity == {0, 1, None}


@pytest.mark.parametrize("line", ["laser", "polarization", "intensity"])
def test_offset_shifts_only_its_line(line):
    pair = QubitSymbolPair(PolarizationSymbol.V, DecoySymbol.LOW)
    base = encode_pair(pair)
    shifted = encode_pair(pair, offsets=ChannelOffsets(**{line: 5}))
    delta = {
        "laser": shifted.laser_tick - base.laser_tick,
        "polarization": shifted.pol_tick - base.pol_tick,
        "intensity": shifted.intensity_tick - base.intensity_tick,
    }
    assert delta.pop(line) == 5
    assert all(d == 0 for d in delta.values())
    assert shifted.pol_position == base.pol_position


def test_invalid_pair():
    with pytest.raises(InvalidSymbol):
        QubitSymbolPair(3, 0)
    with pytest.raises(InvalidSymbol):
        QubitSymbolPair(0, 3)


def test_position_map():
    positions = PositionMap(pol=(2, 0, 1), intensity=(1, 0, None))
    frame = encode_pair((PolarizationSymbol.H, DecoySymbol.HIGH), positions=positions)
    assert frame.pol_position == 2
    assert frame.intensity_position == 1
    with pytest.raises(ValueError):
        PositionMap(pol=(0, 0, 1))
    with pytest.raises(ValueError):
        PositionMap(intensity=(0, 1, 1))


class TestFrameStream:
    def test_frames(self):
        pol = pack_symbols([0, 1, 2, 0])
        decoy = pack_symbols([2, 0, 1, 0])
        frames = frame_stream(pol, decoy, n=4)
        assert [f.slot_index for f in frames] == [0, 1, 2, 3]
        assert [f.laser_pulse for f in frames] == [False, True, True, True]
        assert [int(f.pol) for f in frames] == [0, 1, 2, 0]

    def test_short_stream(self):
        with pytest.raises(LengthMismatch):
            frame_stream(b"\x00", b"\x00\x00", n=5)

    def test_batch_matches_frames(self):
        rng = np.random.default_rng(12)
        batch = FrameBatch(100, rng.integers(0, 3, 50), rng.integers(0, 3, 50))
        frames = batch.to_frames()
        assert len(frames) == len(batch)
        assert frames[0].slot_index == 100
        np.testing.assert_array_equal(batch.laser, [f.laser_pulse for f in frames])

    def test_batch_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            FrameBatch(0, [0, 1], [0])


class TestTimeline:
    def test_single_slot(self):
        frames = [encode_pair((PolarizationSymbol.D, DecoySymbol.LOW))]
        timeline = render_timeline(frames)
        assert timeline.shape == (3, 4)
        np.testing.assert_array_equal(timeline[0], [1, 0, 0, 0])
        np.testing.assert_array_equal(timeline[1], [0, 0, 1, 0])
        np.testing.assert_array_equal(timeline[2], [0, 1, 0, 0])

    def test_pulse_counts(self):
        rng = np.random.default_rng(7)
        batch = FrameBatch(0, rng.integers(0, 3, 200), rng.integers(0, 3, 200))
        timeline = render_timeline(batch)
        n_fired = int(np.count_nonzero(batch.laser))
        assert timeline[0].sum() == n_fired
        assert timeline[1].sum() == 200
        assert timeline[2].sum() == n_fired

    def test_offsets_extend(self):
        offsets = ChannelOffsets(intensity=6)
        frames = [encode_pair((0, DecoySymbol.HIGH), offsets=offsets)]
        timeline = render_timeline(frames, offsets=offsets)
        assert timeline.shape == (3, 10)
        assert timeline[2, 6] == 1
        assert timeline[0, 0] == 1
