"""Localisation error statistics and distribution-deviation measures.

Errors are planar distances in meters.  Deviation between a predicted and a
reference coordinate distribution is scored three ways: quadratic-cost 1-D
Wasserstein distance on raw samples, KL divergence on shared-edge histograms,
and plug-in mutual information from a 2-D joint histogram.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

QUANTILE_GRID = 1024   # resampling resolution when sample counts differ
KL_EPS = 1e-9


# ---------------------------------------------------------------------------
# error statistics


def percentile_error(errors, p: float) -> float:
    """Nearest-rank percentile: the ceil(p*N)-th order statistic."""
    vals = np.sort(np.asarray(errors, dtype=float))
    if vals.size == 0:
        raise ValueError("percentile of empty error list")
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    rank = int(math.ceil(p * vals.size))
    return float(vals[rank - 1])


@dataclass
class ErrorStats:
    """Summary of one method's error distribution."""

    samples: np.ndarray   # sorted ascending, meters
    p50: float
    p90: float
    mean: float
    count: int

    @classmethod
    def from_errors(cls, errors) -> "ErrorStats":
        vals = np.sort(np.asarray(errors, dtype=float))
        if vals.size == 0:
            raise ValueError("no error samples")
        return cls(samples=vals,
                   p50=percentile_error(vals, 0.5),
                   p90=percentile_error(vals, 0.9),
                   mean=float(vals.mean()),
                   count=int(vals.size))


def planar_error(range_gt: float, azimuth_gt_deg: float,
                 range_est: float, azimuth_est_deg: float) -> float:
    """Euclidean distance in the ground plane between two polar coordinates."""
    ag, ae = math.radians(azimuth_gt_deg), math.radians(azimuth_est_deg)
    return math.hypot(range_est * math.sin(ae) - range_gt * math.sin(ag),
                      range_est * math.cos(ae) - range_gt * math.cos(ag))


def penalized_errors(errors, n_miss: int, penalty: float) -> list[float]:
    """Append one fixed-penalty entry per missed detection."""
    if n_miss < 0:
        raise ValueError(f"n_miss must be >= 0, got {n_miss}")
    return list(map(float, errors)) + [float(penalty)] * n_miss


# ---------------------------------------------------------------------------
# histograms


@dataclass
class Histogram:
    """Uniform-bin histogram with normalized mass."""

    edges: np.ndarray
    counts: np.ndarray
    mass: np.ndarray

    @classmethod
    def from_samples(cls, values, n_bins: int, lo: float, hi: float) -> "Histogram":
        if n_bins < 2:
            raise ValueError(f"need >= 2 bins, got {n_bins}")
        if not hi > lo:
            raise ValueError(f"empty bin range [{lo}, {hi}]")
        vals = np.asarray(values, dtype=float)
        if vals.size == 0:
            raise ValueError("no samples to bin")
        counts, edges = np.histogram(vals, bins=n_bins, range=(lo, hi))
        total = counts.sum()
        if total == 0:
            raise ValueError("all samples fall outside the bin range")
        return cls(edges=edges, counts=counts, mass=counts / total)


def _check_shared_edges(p: Histogram, q: Histogram) -> None:
    if p.edges.shape != q.edges.shape or not np.array_equal(p.edges, q.edges):
        raise ValueError("histograms must share bin edges")


# ---------------------------------------------------------------------------
# deviation measures


def _quantiles(obj, grid: np.ndarray) -> np.ndarray:
    """Empirical quantile function evaluated on a grid of levels in (0, 1)."""
    if isinstance(obj, Histogram):
        cum = np.concatenate([[0.0], np.cumsum(obj.mass)])
        cum[-1] = 1.0   # guard cumulative rounding
        return np.interp(grid, cum, obj.edges)
    vals = np.sort(np.asarray(obj, dtype=float))
    if vals.size == 0:
        raise ValueError("empty sample set")
    idx = np.ceil(grid * vals.size).astype(int) - 1
    return vals[np.clip(idx, 0, vals.size - 1)]


def wasserstein_1d(p, q, cost: str = "quadratic") -> float:
    """1-D optimal transport cost between two distributions.

    Accepts raw samples or Histogram on either side.  Equal-size sample sets
    use the exact sorted coupling; anything else is resampled on a midpoint
    quantile grid.  The quadratic cost returns the mean squared displacement
    (no square root), matching the integral of c over quantile levels.
    """
    if cost == "quadratic":
        cfun = np.square
    elif cost == "absolute":
        cfun = np.abs
    else:
        raise ValueError(f"cost must be quadratic or absolute, got {cost!r}")

    if not isinstance(p, Histogram) and not isinstance(q, Histogram):
        xs = np.sort(np.asarray(p, dtype=float))
        ys = np.sort(np.asarray(q, dtype=float))
        if xs.size == 0 or ys.size == 0:
            raise ValueError("empty sample set")
        if xs.size == ys.size:
            return float(cfun(xs - ys).mean())
    grid = (np.arange(QUANTILE_GRID) + 0.5) / QUANTILE_GRID
    return float(cfun(_quantiles(p, grid) - _quantiles(q, grid)).mean())


def kl_div(p: Histogram, q: Histogram) -> float:
    """KL divergence sum p_i ln(p_i / (q_i + eps)) in nats.

    Additive smoothing on q avoids infinities on empty bins; the result is
    clamped at zero since smoothing can push exact-equality cases a hair
    negative.
    """
    _check_shared_edges(p, q)
    pm = p.mass
    pos = pm > 0
    total = float(np.sum(pm[pos] * np.log(pm[pos] / (q.mass[pos] + KL_EPS))))
    return max(total, 0.0)


def mutual_info(y, y_est, n_bins: int = 32) -> float:
    """Plug-in mutual information of paired samples from a joint histogram."""
    ys = np.asarray(y, dtype=float)
    es = np.asarray(y_est, dtype=float)
    if ys.shape != es.shape or ys.ndim != 1:
        raise ValueError(f"paired 1-D samples required, got {ys.shape} and {es.shape}")
    if ys.size < 2:
        raise ValueError(f"need >= 2 pairs, got {ys.size}")
    if n_bins < 2:
        raise ValueError(f"need >= 2 bins, got {n_bins}")
    if ys.min() == ys.max() or es.min() == es.max():
        raise ValueError("degenerate samples: zero-width value range")
    joint, _, _ = np.histogram2d(ys, es, bins=n_bins)
    pxy = joint / joint.sum()
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    mask = pxy > 0
    return float(np.sum(pxy[mask] * np.log(pxy[mask] / (px @ py)[mask])))


# ---------------------------------------------------------------------------
# report table


@dataclass
class ReportRow:
    method: str
    p50: float
    p90: float
    d_w_range: float
    d_w_angle: float
    d_kl: float
    mi: float


def write_report(rows: list[ReportRow], path) -> None:
    """CSV summary table, one row per evaluated method."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["method", "p50", "p90", "D_W_range", "D_W_angle",
                     "D_KL", "MI"])
        for r in rows:
            wr.writerow([r.method, repr(r.p50), repr(r.p90), repr(r.d_w_range),
                         repr(r.d_w_angle), repr(r.d_kl), repr(r.mi)])


def read_report(path) -> list[ReportRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(ReportRow(
                method=row["method"], p50=float(row["p50"]),
                p90=float(row["p90"]), d_w_range=float(row["D_W_range"]),
                d_w_angle=float(row["D_W_angle"]), d_kl=float(row["D_KL"]),
                mi=float(row["MI"])))
    return out
