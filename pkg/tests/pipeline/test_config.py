import pytest
import tomli
from serde.toml import to_toml

from qkd_twin.pipeline.config import *
from qkd_twin.rng_source import SourceKind


class TestClockOptions:
    def test_default_creation(self):
        conf = ClockOptions()
        assert conf.clock_hz == 200e6
        assert conf.slot_ticks == 4
        assert conf.clock_config().repetition_hz == 50e6
        toml_conf = ClockOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    def test_creation(self):
        conf = ClockOptions(clock_hz=100_000_000, slot_ticks=5)
        assert isinstance(conf.clock_hz, float)
        assert conf.clock_config().repetition_hz == 20e6

    def test_too_few_ticks(self):
        with pytest.raises(ValueError):
            ClockOptions(slot_ticks=2)


class TestOffsetOptions:
    def test_default_serialize(self):
        conf = OffsetOptions()
        assert to_toml(conf) == ""

    def test_serialize(self):
        conf = OffsetOptions(laser=1, intensity=3)
        toml_conf = OffsetOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf
        assert conf.channel_offsets().intensity == 3


class TestMemoryOptions:
    def test_default_creation(self):
        conf = MemoryOptions()
        assert conf.total_words == 32768
        assert conf.half_bytes == 65536
        assert conf.strict

    @pytest.mark.parametrize("total_words", [0, 1, 1000])
    def test_power_of_two(self, total_words):
        with pytest.raises(ValueError):
            MemoryOptions(total_words=total_words)


class TestBufferOptions:
    def test_default_creation(self):
        conf = BufferOptions()
        ring = conf.ring_config(MemoryOptions())
        assert ring.block_bytes == 19_660_800
        assert ring.chunks_per_block == 300
        toml_conf = BufferOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    def test_block_multiple_of_half(self):
        with pytest.raises(ValueError):
            BufferOptions(block_bytes=100_000).ring_config(MemoryOptions())


class TestTransportOptions:
    def test_default_creation(self):
        conf = TransportOptions()
        endpoint = conf.endpoint()
        assert (endpoint.command_port, endpoint.pol_port) == (7000, 7001)
        assert (endpoint.decoy_port, endpoint.detections_port) == (7002, 7003)
        assert endpoint.token is None

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("QTW_HOST", "10.0.0.2")
        monkeypatch.setenv("QTW_COMMAND_PORT", "7100")
        conf = TransportOptions(command_port=9000)
        assert conf.host == "10.0.0.2"
        assert conf.command_port == 7100
        assert conf.pol_port == 7001

    def test_duplicate_ports(self):
        with pytest.raises(ValueError):
            TransportOptions(pol_port=7000)

    def test_serialize(self):
        conf = TransportOptions(token="secret", link_bps=1e9)
        toml_conf = TransportOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf


class TestSourceOptions:
    def test_default_creation(self):
        conf = SourceOptions()
        assert conf.kind is SourceKind.CSPRNG
        assert conf.bias_config().p_decoy == (0.7, 0.2, 0.1)
        toml_conf = SourceOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    def test_creation(self):
        conf = SourceOptions(kind="QRNG_EMULATED", rate_bps=1e9, p_pol=[0.5, 0.25, 0.25])
        assert conf.kind is SourceKind.QRNG_EMULATED
        toml_conf = SourceOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    @pytest.mark.parametrize(
        "kwargs", [dict(p_pol=[0.5, 0.5]), dict(p_decoy=[0.5, 0.6, 0.1]), dict(kind="DICE")]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SourceOptions(**kwargs)


class TestChannelOptions:
    def test_models(self):
        conf = ChannelOptions(transmittance=0.3, p_key_basis=0.9)
        assert conf.channel_model(seed=1).detection_probability == pytest.approx(0.3)
        assert conf.measurement_model(seed=1).p_key_basis == 0.9
        toml_conf = ChannelOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    def test_invalid_model(self):
        with pytest.raises(ValueError):
            ChannelOptions(transmittance=2).channel_model()


class TestStallOptions:
    def test_active(self):
        conf = StallOptions(start=1, duration=10)
        assert not conf.active(0.5)
        assert conf.active(1)
        assert conf.active(10.9)
        assert not conf.active(11)

    def test_invalid(self):
        with pytest.raises(ValueError):
            StallOptions(duration=-1)


class TestScenarioOptions:
    def test_error_creation(self):
        with pytest.raises(TypeError):
            conf = ScenarioOptions()

    def test_default_creation(self):
        conf = ScenarioOptions(name="test")
        assert conf.mode is Mode.TX_LOOPBACK
        assert conf.time_model is TimeModel.AS_FAST_AS_POSSIBLE
        assert conf.seed is None
        assert conf.output_directory is None
        assert not conf.real_time
        toml_conf = ScenarioOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    def test_creation(self, tmp_path):
        conf = ScenarioOptions(
            name="test",
            mode="SOAK",
            duration=600,
            seed=4796,
            time_model="REAL_TIME_THROTTLED",
            output_directory=tmp_path,
            memory=dict(total_words=1024),
            buffer=dict(block_bytes=8192, n_blocks=4),
            source=dict(kind="QRNG_EMULATED", rate_bps=5e8),
            stall=dict(start=2, duration=20),
        )
        assert conf.mode is Mode.SOAK
        assert conf.real_time
        assert conf.memory == MemoryOptions(total_words=1024)
        assert conf.buffer == BufferOptions(block_bytes=8192, n_blocks=4)
        assert conf.stall == StallOptions(start=2, duration=20)
        toml_conf = ScenarioOptions(**tomli.loads(to_toml(conf)))
        assert conf == toml_conf

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(mode="LOOP"),
            dict(duration=0),
            dict(qber_threshold=1.5),
            dict(offsets=dict(laser=16)),
            dict(memory=dict(total_words=1024), buffer=dict(block_bytes=1000)),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ScenarioOptions(name="test", **kwargs)
