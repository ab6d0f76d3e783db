"""Statistical detection chain (CA-CFAR, density clustering, centroids,
genie-aided selection) and the radio-visual fusion teacher."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from rvl import radio, scene
from rvl.selflabel import SelfLabel

FUSION_GATE_DEG = 3.0
CFAR_EPS = 1e-12   # keeps the relative threshold meaningful on zero backgrounds


class NoDetections(Exception):
    """Raised when a selection step has nothing to pick from; the caller
    scores the miss (range-window-span penalty in the error metrics)."""


@dataclass
class CfarConfig:
    guard: tuple[int, int] = (1, 1)
    train: tuple[int, int] = (4, 4)
    p_fa: float | None = 1e-3
    alpha: float | None = None   # overrides p_fa when set

    def __post_init__(self) -> None:
        if isinstance(self.guard, int):
            self.guard = (self.guard, self.guard)
        if isinstance(self.train, int):
            self.train = (self.train, self.train)
        if min(self.guard) < 0 or min(self.train) < 1:
            raise ValueError(f"need guard >= 0 and train >= 1, got "
                             f"guard={self.guard} train={self.train}")
        if self.alpha is not None:
            if self.alpha <= 1.0:
                raise ValueError(f"alpha must be > 1, got {self.alpha}")
        elif self.p_fa is None or not 0.0 < self.p_fa < 1.0:
            raise ValueError(f"p_fa must be in (0, 1), got {self.p_fa}")


@dataclass
class Detection:
    bin: tuple[int, int]
    value: float
    cluster: int
    range_m: float
    azimuth_deg: float


def cfar_alpha(p_fa: float, n: int) -> float:
    """Cell-averaging threshold factor for exponential noise and n
    training cells: alpha = n (P_fa^{-1/n} - 1)."""
    return n * (p_fa ** (-1.0 / n) - 1.0)


def _window_sums(sat: np.ndarray, r0, r1, c0, c1):
    """Inclusive-window sums from a summed-area table with +1 padding."""
    return sat[r1 + 1, c1 + 1] - sat[r0, c1 + 1] - sat[r1 + 1, c0] + sat[r0, c0]


def ca_cfar_2d(heatmap: np.ndarray, cfg: CfarConfig) -> np.ndarray:
    """Boolean detection bitmap: cell > alpha * mean(training ring).

    The training ring is the (guard+train) window minus the guard window;
    both windows clip at the borders, and when alpha is derived from p_fa
    it is recomputed per cell from the clipped training count.
    """
    h = np.asarray(heatmap, dtype=float)
    if h.ndim != 2:
        raise ValueError(f"expected a 2-D heatmap, got shape {h.shape}")
    rows, cols = h.shape
    gr, gc = cfg.guard
    tr, tc = cfg.train
    if 2 * (gr + tr) + 1 > rows or 2 * (gc + tc) + 1 > cols:
        raise ValueError(f"CFAR window {2*(gr+tr)+1}x{2*(gc+tc)+1} exceeds "
                         f"heatmap {rows}x{cols}")

    sat = np.zeros((rows + 1, cols + 1))
    sat[1:, 1:] = h.cumsum(axis=0).cumsum(axis=1)
    ri = np.arange(rows)[:, None]
    ci = np.arange(cols)[None, :]

    def window(rad_r, rad_c):
        r0 = np.clip(ri - rad_r, 0, rows - 1)
        r1 = np.clip(ri + rad_r, 0, rows - 1)
        c0 = np.clip(ci - rad_c, 0, cols - 1)
        c1 = np.clip(ci + rad_c, 0, cols - 1)
        sums = _window_sums(sat, r0, r1, c0, c1)
        counts = (r1 - r0 + 1) * (c1 - c0 + 1)
        return sums, counts

    outer_sum, outer_n = window(gr + tr, gc + tc)
    inner_sum, inner_n = window(gr, gc)
    train_sum = outer_sum - inner_sum
    train_n = outer_n - inner_n
    mean = train_sum / train_n + CFAR_EPS
    if cfg.alpha is not None:
        alpha = cfg.alpha
    else:
        alpha = train_n * (cfg.p_fa ** (-1.0 / train_n) - 1.0)
    return h > alpha * mean


def dbscan(bins: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering of (n, 2) bin coordinates; returns int labels with
    noise as -1.

    Core points have >= min_pts points (self included) within eps; clusters
    are connected components of the core-core graph, numbered by first core
    index; border points join the cluster of their lowest-index core
    neighbour.
    """
    if eps <= 0 or min_pts < 1:
        raise ValueError(f"need eps > 0 and min_pts >= 1, got {eps}, {min_pts}")
    pts = np.asarray(bins, dtype=float).reshape(-1, 2)
    n = len(pts)
    labels = np.full(n, -1, dtype=int)
    if n == 0:
        return labels
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    adj = d2 <= eps * eps
    core = adj.sum(axis=1) >= min_pts

    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        # breadth-first over core neighbours
        labels[i] = cluster
        frontier = [i]
        while frontier:
            nxt = []
            for j in frontier:
                for k in np.nonzero(adj[j] & core & (labels == -1))[0]:
                    labels[k] = cluster
                    nxt.append(int(k))
            frontier = nxt
        cluster += 1

    for i in range(n):
        if core[i] or labels[i] != -1:
            continue
        neigh = np.nonzero(adj[i] & core)[0]
        if len(neigh):
            labels[i] = labels[neigh[0]]
    return labels


def centroids(bins: np.ndarray, labels: np.ndarray, heatmap: np.ndarray,
              rcfg: radio.RadioConfig) -> list[Detection]:
    """Value-weighted mean bin per cluster, converted by the axis contract.

    Noise points are dropped; a detection's value is the cluster's peak
    cell and its bin is the nearest grid cell to the centroid.
    """
    bins = np.asarray(bins, dtype=int).reshape(-1, 2)
    labels = np.asarray(labels, dtype=int)
    h = np.asarray(heatmap, dtype=float)
    out = []
    for cid in sorted(set(labels[labels >= 0])):
        members = bins[labels == cid]
        values = h[members[:, 0], members[:, 1]]
        total = values.sum()
        if total <= 0:
            weights = np.full(len(members), 1.0 / len(members))
        else:
            weights = values / total
        rowf, colf = (weights[:, None] * members).sum(axis=0)
        out.append(Detection(
            bin=(int(math.floor(rowf + 0.5)), int(math.floor(colf + 0.5))),
            value=float(values.max()),
            cluster=int(cid),
            range_m=float(radio.row_range(rcfg, rowf)),
            azimuth_deg=float(radio.col_azimuth(rcfg, colf))))
    return out


def genie_select(detections: list[Detection], gt: scene.GroundTruth) -> Detection:
    """Detection nearest groundtruth in (range, arc-length) metric; ties go
    to the larger value, then the lower row index."""
    if not detections:
        raise NoDetections("no detections to select from")

    def key(det: Detection):
        dr = det.range_m - gt.range_m
        darc = math.radians(det.azimuth_deg - gt.azimuth_deg) * gt.range_m
        return (math.hypot(dr, darc), -det.value, det.bin[0], det.bin[1])

    return min(detections, key=key)


def detection_chain(heatmap: np.ndarray, cfar_cfg: CfarConfig,
                    rcfg: radio.RadioConfig, eps: float = 2.0,
                    min_pts: int = 1) -> list[Detection]:
    """CFAR bitmap -> clusters -> centroid detections for one heatmap."""
    bitmap = ca_cfar_2d(heatmap, cfar_cfg)
    bins = np.argwhere(bitmap)
    if len(bins) == 0:
        return []
    labels = dbscan(bins, eps=eps, min_pts=min_pts)
    return centroids(bins, labels, heatmap, rcfg)


def fusion_teacher(pair_id: int, bbox: tuple[int, int, int, int],
                   detections: list[Detection], heatmap: np.ndarray,
                   cam: scene.CameraModel, rcfg: radio.RadioConfig) -> SelfLabel:
    """Vision bbox azimuth matched to the nearest radar detection within a
    +-3 degree gate; without a match, range falls back to the brightest row
    of the azimuth column.  Always emits a label."""
    c0, _, c1, _ = bbox
    vis_az = scene.column_azimuth(cam, (c0 + c1 + 1) / 2.0)
    gated = [d for d in detections if abs(d.azimuth_deg - vis_az) <= FUSION_GATE_DEG]
    if gated:
        best = min(gated, key=lambda d: (abs(d.azimuth_deg - vis_az), -d.value))
        return SelfLabel(id=pair_id, range_est=best.range_m,
                         azimuth_est=best.azimuth_deg,
                         heatmap_bin_est=best.bin, source="fusion_teacher")
    col = radio.azimuth_to_col(rcfg, vis_az)
    row = int(np.argmax(np.asarray(heatmap, dtype=float)[:, col]))
    return SelfLabel(id=pair_id, range_est=float(radio.row_range(rcfg, row)),
                     azimuth_est=float(vis_az), heatmap_bin_est=(row, col),
                     source="fusion_teacher")


# ---------------------------------------------------------------------------
# detections table


def write_detections(rows: list[tuple[int, Detection]], path) -> None:
    """CSV of per-pair detections: id, row, col, range, azimuth, cluster, value."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "row", "col", "range", "azimuth", "cluster", "value"])
        for pid, d in rows:
            wr.writerow([pid, d.bin[0], d.bin[1], repr(d.range_m),
                         repr(d.azimuth_deg), d.cluster, repr(d.value)])


def read_detections(path) -> list[tuple[int, Detection]]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.append((int(r["id"]), Detection(
                bin=(int(r["row"]), int(r["col"])), value=float(r["value"]),
                cluster=int(r["cluster"]), range_m=float(r["range"]),
                azimuth_deg=float(r["azimuth"]))))
    return out
