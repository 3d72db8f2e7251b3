from os import PathLike
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike
from packaging import version


def check_version(config: str, qtw: str) -> bool:
    """
    Checks compatibility between versions following semantic versioning.

    Parameters
    ----------
    config : str
        Version string for the configuration
    qtw : str
        Version string for `qkd_twin`

    Returns
    -------
    bool
    """
    config_maj, config_min, config_pat = version.parse(config).release
    qtw_maj, qtw_min, qtw_pat = version.parse(qtw).release
    if qtw_maj == 0:
        flag = config_maj == qtw_maj and config_min == qtw_min and qtw_pat >= config_pat
    else:
        flag = config_maj == qtw_maj and qtw_min >= config_min
        if qtw_min == config_min:
            flag = flag and qtw_pat >= config_pat
    return flag


def get_paths(name: str, /, suffix=None, output_directory: PathLike = None, filetype=".csv"):
    """
    Build an output path ``<output_directory>/<name>_<suffix><filetype>``, creating the
    directory if needed.
    """
    _suffix = "" if suffix is None else f"_{suffix}"
    if output_directory is None:
        output_directory = Path.cwd()
    else:
        output_directory = Path(output_directory)
        output_directory.mkdir(parents=True, exist_ok=True)
    return output_directory / f"{name}{_suffix}{filetype}"


def stream_rate_bps(repetition_hz: float, symbol_bits: int = 2) -> float:
    """Data rate of one symbol stream in bits per second."""
    return repetition_hz * symbol_bits


def headroom_seconds(n_blocks: int, block_bytes: int, rate_bps: float) -> float:
    """
    Time the staging buffer can feed the emulator without a single new block.

    Parameters
    ----------
    n_blocks : int
        Number of blocks in the staging buffer
    block_bytes : int
        Size of each block in bytes
    rate_bps : float
        Consumption rate of one stream in bits per second

    Returns
    -------
    float
        Headroom in seconds (15.73 s for 187.5 MiB at 100 Mb/s)
    """
    return n_blocks * block_bytes * 8 / rate_bps


def binomial_sigma(n: int, p: float) -> float:
    """Standard deviation of a binomial proportion estimate."""
    return np.sqrt(p * (1 - p) / n)


def within_sigma(observed: ArrayLike, expected: ArrayLike, n: int, k: float = 4) -> bool:
    """True if every observed frequency is within ``k`` binomial sigma of its target."""
    observed = np.atleast_1d(observed)
    expected = np.atleast_1d(expected)
    sigmas = binomial_sigma(n, expected)
    # degenerate targets (p = 0 or 1) must match exactly
    return bool(np.all(np.abs(observed - expected) <= k * sigmas))
