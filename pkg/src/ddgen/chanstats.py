"""Double-directional channel statistics and the CDF-distance metric.

The two spread measures are power-weighted: the RMS delay spread is the
weighted standard deviation of the path delays, and the angular spread is
the unit-circle spread sqrt(sum_n w_n |e^{j a_n} - mu|^2) with mu the
weighted mean phasor, which is dimensionless and bounded by [0, 1] and
immune to the 2*pi wrap-around of a naive angular standard deviation.

All evaluation compares pooled sample sets through their empirical CDFs on
a shared grid; the reported distance is the mean squared pointwise CDF
difference in dB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gscm

CDF_FLOOR_DB = -120.0
CDF_GRID_SIZE = 512


@dataclass(frozen=True)
class StatBundle:
    """The five spread statistics plus per-path gains for one sample."""

    delay_spread: float      # seconds
    az_dod_spread: float     # dimensionless, [0, 1]
    zn_dod_spread: float
    az_doa_spread: float
    zn_doa_spread: float
    gains_db: np.ndarray


def _weights(powers_linear):
    p = np.asarray(powers_linear, dtype=np.float64)
    if p.size == 0 or not np.any(p > 0):
        raise ValueError("need at least one strictly positive power")
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    return p / p.sum()


def rms_delay_spread(powers_linear, delays):
    """Power-weighted RMS spread of the path delays, in the delay unit."""
    w = _weights(powers_linear)
    tau = np.asarray(delays, dtype=np.float64)
    mean = float(np.dot(w, tau))
    return math.sqrt(float(np.dot(w, (tau - mean) ** 2)))


def rms_angular_spread(powers_linear, angles):
    """Unit-circle power-weighted angular spread, dimensionless in [0, 1]."""
    w = _weights(powers_linear)
    ang = np.asarray(angles, dtype=np.float64)
    phasor = np.exp(1j * ang)
    mu = np.dot(w, phasor)
    val = float(np.dot(w, np.abs(phasor - mu) ** 2))
    return math.sqrt(min(max(val, 0.0), 1.0))


@dataclass(frozen=True)
class EmpiricalCdf:
    grid: np.ndarray    # ascending evaluation points
    values: np.ndarray  # fraction of samples <= grid point


def pooled_grid(sample_sets, grid_size=CDF_GRID_SIZE):
    """Equally spaced grid spanning the min/max of all given sample sets."""
    if grid_size < 2:
        raise ValueError("grid needs at least 2 points")
    lo = min(float(np.min(s)) for s in sample_sets if len(s))
    hi = max(float(np.max(s)) for s in sample_sets if len(s))
    return np.linspace(lo, hi, grid_size)


def empirical_cdf(samples, grid_size=CDF_GRID_SIZE, grid=None):
    """Empirical CDF evaluated on a grid (own-range grid unless one is given)."""
    s = np.sort(np.asarray(samples, dtype=np.float64))
    if s.size == 0:
        raise ValueError("empty sample set")
    if grid is None:
        grid = pooled_grid([s], grid_size)
    values = np.searchsorted(s, grid, side="right") / s.size
    return EmpiricalCdf(grid=np.asarray(grid, dtype=np.float64), values=values)


def cdf_pair(a_samples, b_samples, grid_size=CDF_GRID_SIZE):
    """Two CDFs on the shared grid spanning the pooled range of both sets."""
    grid = pooled_grid([np.asarray(a_samples), np.asarray(b_samples)], grid_size)
    return empirical_cdf(a_samples, grid=grid), empirical_cdf(b_samples, grid=grid)


def cdf_mse_db(a, b, floor_db=CDF_FLOOR_DB):
    """Mean squared pointwise CDF difference in dB, clamped at floor_db."""
    if a.grid.shape != b.grid.shape or not np.array_equal(a.grid, b.grid):
        raise ValueError("CDFs must share the same grid")
    mse = float(np.mean((a.values - b.values) ** 2))
    floor_lin = 10.0 ** (floor_db / 10.0)
    if mse <= floor_lin:
        return floor_db
    return 10.0 * math.log10(mse)


# ---------------------------------------------------------------------------
# per-sample statistics

def sample_stats(sample):
    """StatBundle for one ChannelSample (seconds / radians / dB units)."""
    gains = np.array([p.gain_db for p in sample.paths])
    powers = 10.0 ** (gains / 10.0)
    delays = np.array([p.delay for p in sample.paths])
    return StatBundle(
        delay_spread=rms_delay_spread(powers, delays),
        az_dod_spread=rms_angular_spread(powers, [p.az_dod for p in sample.paths]),
        zn_dod_spread=rms_angular_spread(powers, [p.zn_dod for p in sample.paths]),
        az_doa_spread=rms_angular_spread(powers, [p.az_doa for p in sample.paths]),
        zn_doa_spread=rms_angular_spread(powers, [p.zn_doa for p in sample.paths]),
        gains_db=gains,
    )


def window_stats(window):
    """One StatBundle per sample; powers come from dB gains via 10^(g/10)."""
    if not window:
        raise ValueError("empty window")
    return [sample_stats(s) for s in window]


def stats_from_row(row, n_paths):
    """StatBundle from one dataset row (ns/degree/dBm) converted to SI units."""
    row = np.asarray(row, dtype=np.float64)
    gains = row[gscm.gain_cols(n_paths)]
    powers = 10.0 ** (gains / 10.0)
    delays = row[gscm.delay_cols(n_paths)] * 1e-9
    rad = np.pi / 180.0
    return StatBundle(
        delay_spread=rms_delay_spread(powers, delays),
        az_dod_spread=rms_angular_spread(powers, row[gscm.az_dod_cols(n_paths)] * rad),
        zn_dod_spread=rms_angular_spread(powers, row[gscm.zn_dod_cols(n_paths)] * rad),
        az_doa_spread=rms_angular_spread(powers, row[gscm.az_doa_cols(n_paths)] * rad),
        zn_doa_spread=rms_angular_spread(powers, row[gscm.zn_doa_cols(n_paths)] * rad),
        gains_db=gains,
    )


STAT_NAMES = ("delay_spread", "az_dod_spread", "zn_dod_spread",
              "az_doa_spread", "zn_doa_spread")
