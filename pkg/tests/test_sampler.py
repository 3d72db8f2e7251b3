import numpy as np
import pytest

from qkd_twin.encoding import ClockConfig, LengthMismatch
from qkd_twin.memory import InterruptKind, StreamId
from qkd_twin.sampler import (
    SamplerState,
    SpdReader,
    extract,
    qrng_words,
    sample_into,
    spd_sample,
    xor_combine,
)
from qkd_twin.util import within_sigma

CLOCK = ClockConfig()  # 5 ns ticks


class TestSampling:
    def test_two_tick_delay(self):
        # one edge in window 3
        bits = spd_sample([3 * CLOCK.tick_ns + 1.0], CLOCK, 10)
        assert bits.tolist() == [0, 0, 0, 0, 0, 1, 0, 0, 0, 0]

    def test_multiple_edges_one_window(self):
        t = 4 * CLOCK.tick_ns
        bits = spd_sample([t, t + 0.5, t + 1.0], CLOCK, 8)
        assert bits.sum() == 1
        assert bits[6] == 1

    def test_last_windows_stay_in_synchronizer(self):
        bits = spd_sample([8 * CLOCK.tick_ns, 9 * CLOCK.tick_ns], CLOCK, 10)
        assert bits.sum() == 0

    def test_stages_carry_over(self):
        state = SamplerState()
        first = sample_into(state, [9 * CLOCK.tick_ns], CLOCK, 10)
        second = sample_into(state, [], CLOCK, 10)
        assert first.sum() == 0
        assert second.tolist()[:2] == [0, 1]
        assert state.tick == 20

    def test_unordered_edges(self):
        with pytest.raises(ValueError):
            spd_sample([10.0, 5.0], CLOCK, 4)


def test_xor_combine():
    np.testing.assert_array_equal(xor_combine([0, 1, 1, 0], [0, 0, 1, 1]), [0, 1, 0, 1])
    with pytest.raises(LengthMismatch):
        xor_combine([0, 1], [1])


def test_xor_reduces_bias():
    n = 1_000_000
    rng = np.random.default_rng(4796)
    a = (rng.random(n) < 0.6).astype(np.uint8)
    b = (rng.random(n) < 0.6).astype(np.uint8)
    ones = xor_combine(a, b).mean()
    # 2 * 0.6 * 0.4
    assert within_sigma(ones, 0.48, n)


class TestExtraction:
    def test_threshold(self):
        state = SamplerState(threshold=4)
        sample_into(state, [], CLOCK, 3)
        assert extract(state) is None
        sample_into(state, [], CLOCK, 2)
        assert extract(state).size == 4
        assert state.accumulation_count == 1

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            SamplerState(threshold=0)

    def test_trigger_discards_and_arms_aux(self):
        reader = SpdReader(CLOCK, threshold=4, stream_id=StreamId.DECOY)
        reader.sample([0.0, 5 * CLOCK.tick_ns], 6)
        event = reader.trigger()
        assert event.kind is InterruptKind.TRIGGER_RESET
        assert event.stream_id is StreamId.DECOY
        assert event.tick == 6
        assert reader.state.accumulation_count == 0
        assert reader.state.sync.sum() == 0
        assert reader.aux_output is None
        # edge in the first window after the trigger
        reader.sample([6 * CLOCK.tick_ns], 6)
        bits = reader.extract()
        assert bits.tolist() == [1, 0, 0, 0]
        assert reader.aux_output == 1
        reader.sample([], 8)
        reader.extract()
        assert reader.aux_output == 1

    def test_trigger_forgets_history(self):
        post = [7 * CLOCK.tick_ns, 12 * CLOCK.tick_ns, 13 * CLOCK.tick_ns]
        outputs = []
        for history in ([], [0.0, 3 * CLOCK.tick_ns, 4 * CLOCK.tick_ns, 5 * CLOCK.tick_ns]):
            reader = SpdReader(CLOCK, threshold=8)
            reader.sample(history, 6)
            reader.trigger()
            reader.sample(post, 20)
            outputs.append(reader.extract().tolist())
        assert outputs[0] == outputs[1]
        assert outputs[0] == [0, 1, 0, 0, 0, 0, 1, 1]


def test_qrng_words():
    bits = np.zeros(70, dtype=np.uint8)
    bits[0] = 1
    bits[33] = 1
    words, rest = qrng_words(bits)
    assert words.dtype == np.dtype("<u4")
    assert words.tolist() == [1, 2]
    assert rest.size == 6
