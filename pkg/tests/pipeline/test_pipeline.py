import json
import sys

import numpy as np
import pytest

import qkd_twin as qtw
from qkd_twin.cli import qtw as cli
from qkd_twin.pipeline.config import Mode
from qkd_twin.pipeline.pipeline import Scenario, run_scenario
from qkd_twin.pipeline.templates import TEMPLATES
from qkd_twin.transport import HEADER_SIZE
from qkd_twin.util import headroom_seconds, within_sigma

# small memories and blocks keep the same buffer geometry at a fraction of the size:
# ten blocks of four 2 KiB halves give 6.55 ms of headroom at 100 Mb/s
SMALL = dict(
    memory=dict(total_words=1024),
    buffer=dict(block_bytes=8192, n_blocks=10),
    channel=dict(report_slots=100_000),
)
SMALL_HEADROOM = headroom_seconds(10, 8192, 100e6)


def small_scenario(tmp_path, **kwargs):
    config = dict(name="test", seed=4796, output_directory=tmp_path, **SMALL)
    config.update(kwargs)
    return Scenario(**config)


def test_incompatible_version():
    with pytest.raises(ValueError, match="not compatible"):
        Scenario(name="test", version="9.0.0")


class TestScenario:
    def test_file_roundtrip(self, tmp_path):
        scenario = small_scenario(tmp_path, mode="SOAK", stall=dict(start=0.01, duration=0.003))
        path = tmp_path / "soak.toml"
        scenario.to_file(path)
        loaded = Scenario.from_file(path)
        assert loaded.stall == scenario.stall
        assert loaded.memory == scenario.memory
        assert loaded.version == qtw.__version__

    def test_seeds(self, tmp_path):
        seeds = small_scenario(tmp_path).seeds()
        assert seeds == small_scenario(tmp_path).seeds()
        assert len(set(seeds.values())) == len(seeds)
        assert set(Scenario(name="unseeded").seeds().values()) == {None}

    def test_run_slots(self, tmp_path):
        assert small_scenario(tmp_path, duration=0.02).run_slots == 1_000_000

    def test_headroom(self, tmp_path):
        assert small_scenario(tmp_path).headroom == pytest.approx(SMALL_HEADROOM)
        assert Scenario(name="default").headroom == pytest.approx(15.73, abs=5e-3)

    @pytest.mark.parametrize("mode", list(Mode))
    def test_templates_valid(self, mode):
        template = TEMPLATES[mode]
        scenario = Scenario.from_str(template.to_toml())
        assert scenario.mode is mode
        assert scenario.seed == 4796


class TestSoak:
    def test_short_stall_absorbed(self, tmp_path):
        stall = 0.5 * SMALL_HEADROOM
        scenario = small_scenario(
            tmp_path, mode="SOAK", duration=0.05, stall=dict(start=0.01, duration=stall)
        )
        result = scenario.run(quiet=True)
        assert result.exit_code == 0
        assert result.stats.underruns == 0
        assert result.stats.sent == scenario.run_slots
        assert result.summary.error is None
        assert result.summary.ended_at is None

    def test_long_stall_underruns(self, tmp_path):
        stall = 1.5 * SMALL_HEADROOM
        scenario = small_scenario(
            tmp_path, mode="SOAK", duration=0.05, stall=dict(start=0.01, duration=stall)
        )
        result = scenario.run(quiet=True)
        assert result.exit_code == 1
        assert result.stats.underruns == 1
        # the buffer drains within a block of its headroom
        underrun_at = result.summary.extra["underrun_at"]
        assert 0.01 + SMALL_HEADROOM * 0.8 < underrun_at < 0.01 + stall
        # the series and the summary stop where the run did
        assert result.summary.ended_at == pytest.approx(underrun_at)
        assert result.summary.data_mbps_mean > 0
        assert "ended early" in result.paths["txt"].read_text()

    def test_report_files(self, tmp_path):
        scenario = small_scenario(tmp_path, mode="SOAK", duration=0.02)
        result = scenario.run(quiet=True)
        assert result.paths["csv"] == tmp_path / "test_throughput.csv"
        assert (tmp_path / "test_debug.log").is_file()
        doc = json.loads(result.paths["json"].read_text())
        assert doc["exit_code"] == 0
        assert doc["mode"] == "SOAK"
        assert doc["sent"] == 1_000_000
        # preload frames carry their headers
        assert doc["preload_bits"] == 2 * 10 * (HEADER_SIZE + 8192) * 8


class TestTxRxFull:
    def test_error_free(self, tmp_path):
        scenario = small_scenario(tmp_path, mode="TX_RX_FULL", duration=0.05)
        stats, exit_code = run_scenario(scenario)
        assert exit_code == 0
        assert stats.qber == 0.0
        assert stats.sifted < stats.detections < stats.sent
        # vacuum slots never click, the others with the channel transmittance
        p_click = 0.1 * (1 - 0.1)
        assert within_sigma(stats.detections / stats.sent, p_click, stats.sent)
        assert stats.yields["VACUUM"] == 0.0

    def test_qber_threshold(self, tmp_path):
        scenario = small_scenario(
            tmp_path,
            mode="TX_RX_FULL",
            duration=0.05,
            channel=dict(report_slots=100_000, error_rate=0.2),
        )
        result = scenario.run(quiet=True)
        assert result.exit_code == 1
        assert result.stats.qber > 0.11

    def test_reproducible(self, tmp_path):
        first = small_scenario(tmp_path / "a", mode="TX_RX_FULL", duration=0.01).run(quiet=True)
        second = small_scenario(tmp_path / "b", mode="TX_RX_FULL", duration=0.01).run(quiet=True)
        assert first.stats.detections == second.stats.detections
        assert first.stats.sifted == second.stats.sifted


class TestQrng:
    def test_bin_file(self, tmp_path):
        scenario = small_scenario(tmp_path, mode="QRNG_BOTTOM_UP", duration=0.005)
        result = scenario.run(quiet=True)
        assert result.exit_code == 0
        extra = result.summary.extra
        data = (tmp_path / "test_qrng.bin").read_bytes()
        assert len(data) * 8 == extra["qrng_bits"]
        assert len(data) % 2048 == 0
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8))
        assert within_sigma(bits.mean(), 0.5, bits.size)

    def test_deterministic(self, tmp_path):
        outputs = []
        for sub in ("a", "b"):
            scenario = small_scenario(tmp_path / sub, mode="QRNG_BOTTOM_UP", duration=0.005)
            scenario.run(quiet=True)
            outputs.append((tmp_path / sub / "test_qrng.bin").read_bytes())
        assert outputs[0] == outputs[1]


class TestLoopback:
    def test_sockets(self, tmp_path):
        scenario = small_scenario(
            tmp_path,
            mode="TX_LOOPBACK",
            duration=0.02,
            transport=dict(command_port=0, pol_port=0, decoy_port=0, detections_port=0),
        )
        result = scenario.run(quiet=True)
        assert result.exit_code == 0, result.summary.errors
        assert result.stats.sent == 1_000_000
        extra = result.summary.extra
        # whole blocks of both streams went over the data sockets
        assert extra["data_bytes"] % 8192 == 0
        assert extra["data_bytes"] >= 2 * 1_000_000 // 4
        assert sum(extra["sent_per_level"]) == 1_000_000

    @pytest.mark.slow
    # refills arrive a whole block at a time, so short runs average over fewer of them
    @pytest.mark.parametrize(("duration", "rel"), [(30, 0.05), (300, 0.01)])
    def test_real_time_sustained(self, tmp_path, duration, rel):
        scenario = Scenario(
            name="loopback",
            mode="TX_LOOPBACK",
            duration=duration,
            seed=4796,
            time_model="REAL_TIME_THROTTLED",
            output_directory=tmp_path,
            transport=dict(command_port=0, pol_port=0, decoy_port=0, detections_port=0),
        )
        result = scenario.run(quiet=True)
        assert result.exit_code == 0
        throughput = result.stats.throughput
        assert len(throughput) == duration
        assert result.stats.underruns == 0
        assert result.summary.ended_at is None
        assert result.stats.sequence_gaps == 0
        assert result.summary.data_mbps_mean == pytest.approx(200, rel=rel)


@pytest.mark.slow
@pytest.mark.parametrize(("stall", "underruns"), [(10, 0), (20, 1)])
def test_soak_default_buffer(tmp_path, stall, underruns):
    scenario = Scenario(
        name="soak",
        mode="SOAK",
        duration=25,
        seed=4796,
        output_directory=tmp_path,
        stall=dict(start=1, duration=stall),
    )
    result = scenario.run(quiet=True)
    assert result.stats.underruns == underruns
    if underruns:
        assert 1 + 14 < result.summary.extra["underrun_at"] < 1 + 16.5


class TestCli:
    def test_new(self, tmp_path, monkeypatch):
        path = tmp_path / "soak.toml"
        monkeypatch.setattr(sys, "argv", ["qtw", "new", str(path), "-t", "SOAK"])
        assert cli.main() == 0
        scenario = Scenario.from_file(path)
        assert scenario.mode is Mode.SOAK
        assert scenario.name == "soak"
        monkeypatch.setattr(sys, "argv", ["qtw", "new", str(path)])
        assert cli.main() == 1

    def test_run(self, tmp_path, monkeypatch, capsys):
        path = tmp_path / "soak.toml"
        small_scenario(tmp_path, name="soak", mode="SOAK", duration=1).to_file(path)
        out = tmp_path / "out"
        argv = ["qtw", "run", "-c", str(path), "-d", "0.02", "-o", str(out), "-q"]
        monkeypatch.setattr(sys, "argv", argv)
        assert cli.main() == 0
        assert "PASS" in capsys.readouterr().out
        assert (out / "soak_summary.json").is_file()

    def test_run_stall_fails(self, tmp_path, monkeypatch):
        path = tmp_path / "soak.toml"
        small_scenario(
            tmp_path, name="soak", mode="SOAK", duration=0.05, stall=dict(start=0.01)
        ).to_file(path)
        stall = str(1.5 * SMALL_HEADROOM)
        argv = ["qtw", "run", "-c", str(path), "--inject-stall", stall, "-o", str(tmp_path), "-q"]
        monkeypatch.setattr(sys, "argv", argv)
        assert cli.main() == 1
