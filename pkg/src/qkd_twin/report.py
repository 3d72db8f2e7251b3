"""
Run artifacts: the 1 s throughput series, the JSON summary and the text summary.
"""
import logging
from dataclasses import dataclass
from os import PathLike
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd
from serde import field, serde
from serde.json import to_json

from qkd_twin.receiver import RunStats
from qkd_twin.util import get_paths

logger = logging.getLogger(__name__)

THROUGHPUT_COLUMNS = ["t_start", "data_bits", "control_bits", "data_mbps", "aggregate_mbps"]


class ThroughputMeter:
    """
    Collects traffic in fixed time bins over the run.

    Traffic stamped before the clock starts (the buffer preload) is kept apart in
    ``preload_bits`` and does not enter the bins; traffic past the end of the run is folded
    into the last bin. A run that stops early is cut at ``ended_at`` by ``close``.

    Parameters
    ----------
    duration : float
        Run length in seconds; the series has ``ceil(duration / bin_s)`` rows
    bin_s : float
        Bin width in seconds, by default 1
    """

    def __init__(self, duration: float, bin_s: float = 1.0):
        if duration <= 0 or bin_s <= 0:
            raise ValueError("duration and bin width must be positive")
        self.duration = duration
        self.bin_s = bin_s
        self.n_bins = max(int(np.ceil(duration / bin_s - 1e-9)), 1)
        self.data_bits = np.zeros(self.n_bins, dtype=np.int64)
        self.control_bits = np.zeros(self.n_bins, dtype=np.int64)
        self.preload_bits = {"data": 0, "control": 0}
        self.ended_at: Optional[float] = None
        self._last = (0, 0)

    def add(self, t: float, data_bytes: int = 0, control_bytes: int = 0):
        """Account traffic that happened at time ``t``."""
        if t < 0:
            self.preload_bits["data"] += 8 * data_bytes
            self.preload_bits["control"] += 8 * control_bytes
            return
        idx = min(int(t // self.bin_s), self.n_bins - 1)
        self.data_bits[idx] += 8 * data_bytes
        self.control_bits[idx] += 8 * control_bytes

    def baseline(self, data_bytes: int, control_bytes: int):
        """Mark cumulative counters read just before the clock starts."""
        self.add(-1, data_bytes - self._last[0], control_bytes - self._last[1])
        self._last = (data_bytes, control_bytes)

    def record(self, t: float, data_bytes: int, control_bytes: int):
        """Account the growth of cumulative counters since the previous call."""
        self.add(max(t, 0), data_bytes - self._last[0], control_bytes - self._last[1])
        self._last = (data_bytes, control_bytes)

    def close(self, t_end: float):
        """
        Mark the logical time at which the run stopped. Bins past it are dropped and the last
        bin is rated over the part of it the run reached.
        """
        if t_end < self.duration:
            self.ended_at = max(t_end, 0.0)

    def frame(self) -> pd.DataFrame:
        end = self.duration if self.ended_at is None else self.ended_at
        n = min(max(int(np.ceil(end / self.bin_s - 1e-9)), 1), self.n_bins)
        data_bits = self.data_bits[:n].copy()
        control_bits = self.control_bits[:n].copy()
        data_bits[-1] += self.data_bits[n:].sum()
        control_bits[-1] += self.control_bits[n:].sum()
        t_start = np.arange(n) * self.bin_s
        # the last bin may be shorter than the others
        widths = np.minimum(self.bin_s, end - t_start)
        widths = np.where(widths > 0, widths, self.bin_s)
        return pd.DataFrame(
            {
                "t_start": t_start,
                "data_bits": data_bits,
                "control_bits": control_bits,
                "data_mbps": data_bits / widths / 1e6,
                "aggregate_mbps": (data_bits + control_bits) / widths / 1e6,
            },
            columns=THROUGHPUT_COLUMNS,
        )


def steady_state_mbps(throughput: pd.DataFrame, column: str = "data_mbps") -> Optional[float]:
    """Mean rate without the first and last bins, or of all bins for short runs."""
    if len(throughput) == 0:
        return None
    values = throughput[column].to_numpy()
    if values.size > 2:
        values = values[1:-1]
    return float(values.mean())


@serde
@dataclass
class RunSummary:
    """
    JSON summary of one run.

    ``wall_seconds`` and ``started`` are the only fields that change between replays of a
    seeded run. ``ended_at`` is set, in logical seconds, when the run stopped before its
    duration; the throughput series then ends there too.
    """

    name: str
    mode: str
    version: str
    seed: Optional[int]
    duration: float
    time_model: str
    exit_code: int
    sent: int
    detections: int
    sifted: int
    qber: Optional[float]
    underruns: int
    sequence_gaps: int
    yields: dict[str, Optional[float]] = field(default_factory=dict)
    data_mbps_mean: Optional[float] = None
    aggregate_mbps_mean: Optional[float] = None
    steady_data_mbps: Optional[float] = None
    preload_bits: int = 0
    ended_at: Optional[float] = None
    errors: list[str] = field(default_factory=list)
    error: Optional[str] = None
    extra: dict[str, Any] = field(default_factory=dict)
    started: Optional[str] = None
    wall_seconds: Optional[float] = None


def summarize(stats: RunStats, **kwargs) -> RunSummary:
    throughput = stats.throughput
    means = {}
    if len(throughput):
        means = {
            "data_mbps_mean": float(throughput["data_mbps"].mean()),
            "aggregate_mbps_mean": float(throughput["aggregate_mbps"].mean()),
            "steady_data_mbps": steady_state_mbps(throughput),
        }
    return RunSummary(
        sent=stats.sent,
        detections=stats.detections,
        sifted=stats.sifted,
        qber=stats.qber,
        underruns=stats.underruns,
        sequence_gaps=stats.sequence_gaps,
        yields=dict(stats.yields),
        **means,
        **kwargs,
    )


def format_summary(summary: RunSummary) -> str:
    status = "PASS" if summary.exit_code == 0 else "FAIL"
    lines = [
        f"{summary.name} ({summary.mode}, {summary.time_model}): {status}",
        f"  qkd_twin version  {summary.version}",
        f"  seed              {summary.seed}",
        f"  duration          {summary.duration:g} s",
        f"  slots sent        {summary.sent}",
        f"  detections        {summary.detections}",
        f"  sifted            {summary.sifted}",
        f"  QBER              {'n/a' if summary.qber is None else f'{summary.qber:.5f}'}",
        f"  underruns         {summary.underruns}",
        f"  sequence gaps     {summary.sequence_gaps}",
    ]
    if summary.ended_at is not None:
        lines.append(f"  ended early at    {summary.ended_at:.3f} s")
    if summary.data_mbps_mean is not None:
        lines.append(f"  data plane        {summary.data_mbps_mean:.2f} Mb/s (mean)")
        lines.append(f"  aggregate         {summary.aggregate_mbps_mean:.2f} Mb/s (mean)")
        lines.append(f"  steady state      {summary.steady_data_mbps:.2f} Mb/s")
    for level, value in summary.yields.items():
        lines.append(f"  yield {level:<11} {'n/a' if value is None else f'{value:.5f}'}")
    for key, value in summary.extra.items():
        lines.append(f"  {key:<17} {value}")
    if summary.error is not None:
        lines.append(f"  error             {summary.error}")
    for error in summary.errors:
        lines.append(f"  ! {error}")
    return "\n".join(lines) + "\n"


def emit_report(
    stats: RunStats, summary: RunSummary, output_directory: Optional[PathLike] = None
) -> dict[str, Path]:
    """
    Write the throughput CSV, the JSON summary and the text summary.

    Parameters
    ----------
    stats : RunStats
    summary : RunSummary
    output_directory : Optional[PathLike]
        By default the current directory

    Returns
    -------
    dict[str, Path]
        Paths keyed by "csv", "json" and "txt"

    Raises
    ------
    OSError
        If any file cannot be written
    """
    paths = {
        "csv": get_paths(summary.name, "throughput", output_directory, ".csv"),
        "json": get_paths(summary.name, "summary", output_directory, ".json"),
        "txt": get_paths(summary.name, "summary", output_directory, ".txt"),
    }
    throughput = stats.throughput
    if len(throughput) == 0:
        throughput = pd.DataFrame(columns=THROUGHPUT_COLUMNS)
    throughput.to_csv(paths["csv"], index=False)
    paths["json"].write_text(to_json(summary))
    paths["txt"].write_text(format_summary(summary))
    logger.debug(f"Report written to {paths['json'].parent}")
    return paths
