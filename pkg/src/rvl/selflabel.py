"""Cross-modal attention and self-supervised target coordinates.

The attention map slides the masked-vision feature template over the radio
feature map; its argmax, rescaled to the heatmap grid, is the self-label.
A one-off median calibration removes systematic offsets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from rvl import autodiff as ad
from rvl import radio, scene
from rvl.autodiff import Tensor


@dataclass
class SelfLabel:
    id: int
    range_est: float
    azimuth_est: float
    heatmap_bin_est: tuple[int, int]
    source: str = "attention"   # attention | cfar_genie | fusion_teacher | groundtruth
    calibrated: bool = False


@dataclass
class Calibration:
    range_offset: float
    azimuth_offset: float
    n_cal: int


# ---------------------------------------------------------------------------
# attention


def feature_mask_rect(mask: np.ndarray, feat_dims: tuple[int, int],
                      pad_feat: int = 1) -> tuple[int, int, int, int]:
    """Bounding rect (r0, r1, c0, c1) of the mask on the feature grid,
    padded by pad_feat bins and clipped.  Bounds are inclusive.

    A feature bin is covered when any image pixel under it is masked.
    """
    h, w = feat_dims
    big_h, big_w = mask.shape
    if big_h % h or big_w % w:
        raise ValueError(f"image dims {mask.shape} not divisible by feature dims {feat_dims}")
    coarse = mask.reshape(h, big_h // h, w, big_w // w).max(axis=(1, 3)) > 0
    rows = np.flatnonzero(coarse.any(axis=1))
    cols = np.flatnonzero(coarse.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask covers no feature bin")
    r0 = max(int(rows[0]) - pad_feat, 0)
    r1 = min(int(rows[-1]) + pad_feat, h - 1)
    c0 = max(int(cols[0]) - pad_feat, 0)
    c1 = min(int(cols[-1]) + pad_feat, w - 1)
    return r0, r1, c0, c1


def crop_template(feat_v: Tensor, mask: np.ndarray, pad_feat: int = 1) -> Tensor:
    """Extract the (C, th, tw) target template from vision features."""
    _, h, w = feat_v.shape
    r0, r1, c0, c1 = feature_mask_rect(mask, (h, w), pad_feat)
    return feat_v[:, r0:r1 + 1, c0:c1 + 1]


def attention_map(f_r: Tensor, template: Tensor) -> Tensor:
    """Channel-wise sliding correlation of radio features with the template.

    Both the per-bin radio vectors and the per-bin template vectors are L2
    normalized first, and the output is scaled by the template area, so a
    score is the mean cosine similarity over the template, in [-1, 1].
    Output has the radio feature dims (same-size padding).
    """
    f_r = Tensor._lift(f_r)
    template = Tensor._lift(template)
    if f_r.data.ndim != 3 or template.data.ndim != 3:
        raise ValueError(f"expected (C, h, w) features, got {f_r.shape} and {template.shape}")
    c, h, w = f_r.shape
    ct, th, tw = template.shape
    if ct != c:
        raise ValueError(f"channel mismatch: {c} vs {ct}")
    if th > h or tw > w:
        raise ValueError(f"template {template.shape} larger than feature map {f_r.shape}")
    if th == 0 or tw == 0:
        raise ValueError("empty template")

    fr_n = f_r.l2_normalize(axis=0)
    t_n = template.l2_normalize(axis=0)
    x = ad.pad2d(fr_n.reshape(1, c, h, w),
                 ((th - 1) // 2, th // 2, (tw - 1) // 2, tw // 2))
    out = ad.conv2d(x, t_n.reshape(1, c, th, tw))
    return out.reshape(h, w) * (1.0 / (th * tw))


def attention_score(amap: Tensor) -> Tensor:
    """S = max over spatial bins of the attention map."""
    return Tensor._lift(amap).max_all()


# ---------------------------------------------------------------------------
# self-labels


def rescale_bin(feat_bin: tuple[int, int], feat_dims: tuple[int, int],
                image_dims: tuple[int, int]) -> tuple[int, int]:
    """Map a feature-grid bin to the full grid with half-bin centering."""
    fr, fc = feat_bin
    h, w = feat_dims
    big_h, big_w = image_dims
    row = int(math.floor(fr * (big_h / h) + big_h / (2.0 * h)))
    col = int(math.floor(fc * (big_w / w) + big_w / (2.0 * w)))
    return min(row, big_h - 1), min(col, big_w - 1)


def self_coordinates(model, pair, rcfg: radio.RadioConfig,
                     pad_feat: int = 1) -> SelfLabel:
    """Attention argmax of one pair, rescaled to heatmap coordinates.

    `model` provides encode_radio / encode_vision (see the ssl module).
    """
    from rvl.dataset import log_compress
    f_r = model.encode_radio(Tensor(log_compress(pair.heatmap)[None, None]))
    masked = pair.image.astype(float) * pair.mask.astype(float)[None]
    f_v = model.encode_vision(Tensor(masked[None]))
    template = crop_template(f_v.reshape(*f_v.shape[1:]), pair.mask, pad_feat)
    amap = attention_map(f_r.reshape(*f_r.shape[1:]), template).data

    if amap.max() - amap.min() < 1e-12:
        raise ValueError("no attention peak: attention map is constant")
    fr, fc = np.unravel_index(int(np.argmax(amap)), amap.shape)
    row, col = rescale_bin((int(fr), int(fc)), amap.shape, pair.heatmap.shape)
    return SelfLabel(
        id=pair.id,
        range_est=float(radio.row_range(rcfg, row)),
        azimuth_est=float(radio.col_azimuth(rcfg, col)),
        heatmap_bin_est=(row, col),
        source="attention")


def calibrate(reference: list[tuple[SelfLabel, scene.GroundTruth]]) -> Calibration:
    """Median offsets gt - est over a reference subset (at least 10 pairs)."""
    if len(reference) < 10:
        raise ValueError(f"calibration needs >= 10 reference pairs, got {len(reference)}")
    d_rng = [gt.range_m - lab.range_est for lab, gt in reference]
    d_az = [gt.azimuth_deg - lab.azimuth_est for lab, gt in reference]
    return Calibration(range_offset=float(np.median(d_rng)),
                       azimuth_offset=float(np.median(d_az)),
                       n_cal=len(reference))


def apply_calibration(label: SelfLabel, cal: Calibration,
                      rcfg: radio.RadioConfig) -> SelfLabel:
    rng = label.range_est + cal.range_offset
    az = label.azimuth_est + cal.azimuth_offset
    return replace(label, range_est=rng, azimuth_est=az,
                   heatmap_bin_est=(radio.range_to_row(rcfg, rng),
                                    radio.azimuth_to_col(rcfg, az)),
                   calibrated=True)


def build_loc_dataset(pairs, labels: list[SelfLabel]):
    """Aligned (heatmap, (range, azimuth)) records for localiser training."""
    by_id = {lab.id: lab for lab in labels}
    out = []
    for p in pairs:
        if p.id not in by_id:
            raise ValueError(f"missing label for pair id {p.id}")
        lab = by_id[p.id]
        out.append((p.heatmap, (lab.range_est, lab.azimuth_est)))
    return out


# ---------------------------------------------------------------------------
# label table persistence


def write_labels_csv(labels: list[SelfLabel], path: Path) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "range_est", "azimuth_est", "bin_row", "bin_col",
                     "source", "calibrated"])
        for lab in labels:
            wr.writerow([lab.id, repr(lab.range_est), repr(lab.azimuth_est),
                         lab.heatmap_bin_est[0], lab.heatmap_bin_est[1],
                         lab.source, int(lab.calibrated)])


def read_labels_csv(path: Path) -> list[SelfLabel]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label table not found: {path}")
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(SelfLabel(
                id=int(row["id"]),
                range_est=float(row["range_est"]),
                azimuth_est=float(row["azimuth_est"]),
                heatmap_bin_est=(int(row["bin_row"]), int(row["bin_col"])),
                source=row["source"],
                calibrated=bool(int(row["calibrated"]))))
    return out
