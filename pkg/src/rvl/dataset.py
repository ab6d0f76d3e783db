"""Paired radio-visual records: synthesis, on-disk persistence, splits, batches.

On-disk layout is one directory per record holding a JSON manifest plus raw
array files.  Array container: magic "RVHM", then version, ndim and the dims
as little-endian u32, then the payload as little-endian float32, row-major.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rvl import radio, scene

RVHM_MAGIC = b"RVHM"
RVHM_VERSION = 1


class RvhmFormatError(ValueError):
    """Raised when an array file or manifest fails structural validation."""


@dataclass
class RadioVisualPair:
    id: int
    heatmap: np.ndarray   # (H, W) float32
    image: np.ndarray     # (3, H, W) float32
    mask: np.ndarray      # (H, W) float32, groundtruth variant
    gt: scene.GroundTruth
    seed: int

    def __eq__(self, other) -> bool:
        return (isinstance(other, RadioVisualPair)
                and self.id == other.id and self.seed == other.seed
                and self.gt == other.gt
                and np.array_equal(self.heatmap, other.heatmap)
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.mask, other.mask))


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.train_fraction < 1.0):
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")


# ---------------------------------------------------------------------------
# array container


def write_array(path: Path, arr: np.ndarray) -> None:
    arr32 = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(RVHM_MAGIC)
        f.write(struct.pack("<II", RVHM_VERSION, arr32.ndim))
        f.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        f.write(arr32.tobytes())


def read_array(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"array file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 12 or blob[:4] != RVHM_MAGIC:
        raise RvhmFormatError(f"bad magic in {path.name}")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != RVHM_VERSION:
        raise RvhmFormatError(f"unsupported version {version} in {path.name}")
    if ndim > 8:
        raise RvhmFormatError(f"implausible ndim {ndim} in {path.name}")
    header_end = 12 + 4 * ndim
    if len(blob) < header_end:
        raise RvhmFormatError(f"truncated dims header in {path.name}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    count = int(np.prod(dims)) if ndim else 1
    if len(blob) != header_end + 4 * count:
        raise RvhmFormatError(
            f"truncated payload in {path.name}: expected {count} float32 values")
    data = np.frombuffer(blob, dtype="<f4", offset=header_end)
    return data.reshape(dims).copy()


# ---------------------------------------------------------------------------
# pair persistence


def log_compress(heatmap: np.ndarray) -> np.ndarray:
    """log(1 + P) dynamic-range compression; applied to heatmaps before
    they enter any learned network, since nearby clutter can be orders of
    magnitude brighter than the target."""
    return np.log1p(np.asarray(heatmap, dtype=float))


def pair_dir(root: Path, pair_id: int) -> Path:
    return Path(root) / f"{pair_id:06d}"


def write_pair(pair: RadioVisualPair, root: Path) -> Path:
    d = pair_dir(root, pair.id)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "id": pair.id,
        "heatmap_dims": list(pair.heatmap.shape),
        "image_dims": list(pair.image.shape),
        "range_m": pair.gt.range_m,
        "azimuth_deg": pair.gt.azimuth_deg,
        "bbox": list(pair.gt.bbox),
        "heatmap_bin": list(pair.gt.heatmap_bin),
        "seed": pair.seed,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    write_array(d / "heatmap.rvhm", pair.heatmap)
    write_array(d / "image.rvhm", pair.image)
    write_array(d / "mask.rvhm", pair.mask)
    return d


def read_pair(root: Path, pair_id: int) -> RadioVisualPair:
    d = pair_dir(root, pair_id)
    mf_path = d / "manifest.json"
    if not mf_path.exists():
        raise FileNotFoundError(f"manifest not found for pair {pair_id}: {mf_path}")
    manifest = json.loads(mf_path.read_text())
    heatmap = read_array(d / "heatmap.rvhm")
    image = read_array(d / "image.rvhm")
    mask = read_array(d / "mask.rvhm")
    for name, arr, key in (("heatmap", heatmap, "heatmap_dims"),
                           ("image", image, "image_dims")):
        if list(arr.shape) != list(manifest[key]):
            raise RvhmFormatError(
                f"{name} dims {list(arr.shape)} disagree with manifest "
                f"{manifest[key]} for pair {pair_id}")
    gt = scene.GroundTruth(
        range_m=manifest["range_m"],
        azimuth_deg=manifest["azimuth_deg"],
        bbox=tuple(manifest["bbox"]),
        heatmap_bin=tuple(manifest["heatmap_bin"]),
    )
    return RadioVisualPair(id=manifest["id"], heatmap=heatmap, image=image,
                           mask=mask, gt=gt, seed=manifest["seed"])


def write_index(root: Path, ids: list[int]) -> None:
    (Path(root) / "index.json").write_text(json.dumps({"ids": ids}))


def read_index(root: Path) -> list[int]:
    path = Path(root) / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset index not found: {path}")
    return list(json.loads(path.read_text())["ids"])


# ---------------------------------------------------------------------------
# synthesis driver


def synthesize_pair(pair_id: int, seed: int, scene_cfg: scene.SceneConfig,
                    cam: scene.CameraModel, rcfg: radio.RadioConfig,
                    mask_pad: int = 5, image_noise: float = 0.0) -> RadioVisualPair:
    """Scene -> channel -> heatmap -> image -> mask for one record.

    The heatmap is scaled by the coherent processing gain so a unit target
    peaks near 1.  Raises if the target is outside the camera or radar view.
    """
    sc = scene.generate_scene(scene_cfg, seed)
    gt = scene.groundtruth_of(sc, cam, rcfg)
    ch = radio.synth_channel(sc, rcfg, seed=seed + 7_777_777)
    hm = radio.range_angle_heatmap(ch, rcfg) / radio.heatmap_norm(rcfg)
    img = scene.render_image(sc, cam, noise_sigma=image_noise, seed=seed + 13)
    mask = scene.mask_from_bbox(gt.bbox, mask_pad, (cam.image_height, cam.image_width))
    return RadioVisualPair(
        id=pair_id,
        heatmap=hm.astype(np.float32),
        image=img.astype(np.float32),
        mask=mask.astype(np.float32),
        gt=gt, seed=seed)


def synthesize_pairs(n_pairs: int, seed: int, scene_cfg: scene.SceneConfig,
                     cam: scene.CameraModel, rcfg: radio.RadioConfig,
                     mask_pad: int = 5, image_noise: float = 0.0) -> list[RadioVisualPair]:
    """Generate n valid pairs; seeds whose target falls outside a view are
    skipped deterministically."""
    pairs = []
    attempt = 0
    while len(pairs) < n_pairs:
        try:
            pairs.append(synthesize_pair(
                len(pairs), seed + attempt, scene_cfg, cam, rcfg,
                mask_pad=mask_pad, image_noise=image_noise))
        except ValueError:
            pass
        attempt += 1
        if attempt > 10 * n_pairs + 100:
            raise RuntimeError(
                f"scene/radio configs reject too many draws: "
                f"{len(pairs)}/{n_pairs} pairs after {attempt} attempts")
    return pairs


# ---------------------------------------------------------------------------
# splits and batches


def make_splits(ids: list[int], spec: SplitSpec) -> tuple[list[int], list[int]]:
    """Deterministic shuffled split; train size round(fraction * N)."""
    if len(ids) < 2:
        raise ValueError(f"need at least 2 ids to split, got {len(ids)}")
    rs = np.random.RandomState(spec.seed)
    perm = rs.permutation(len(ids))
    n_train = int(math.floor(spec.train_fraction * len(ids) + 0.5))
    shuffled = [ids[i] for i in perm]
    return shuffled[:n_train], shuffled[n_train:]


def batches(ids: list[int], batch_size: int, epoch_seed: int) -> list[list[int]]:
    """Deterministic per-epoch permutation chunked into full batches; the
    final partial batch is dropped so every batch has the same negative
    count in the contrastive losses."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if batch_size > len(ids):
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {len(ids)}")
    rs = np.random.RandomState(epoch_seed)
    perm = rs.permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    n_full = len(ids) // batch_size
    return [shuffled[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


# ---------------------------------------------------------------------------
# detector-noise emulation


def bbox_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    """Intersection over union of two inclusive (c0, r0, c1, r1) boxes."""
    ac0, ar0, ac1, ar1 = a
    bc0, br0, bc1, br1 = b
    iw = min(ac1, bc1) - max(ac0, bc0) + 1
    ih = min(ar1, br1) - max(ar0, br0) + 1
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = ((ac1 - ac0 + 1) * (ar1 - ar0 + 1)
             + (bc1 - bc0 + 1) * (br1 - br0 + 1) - inter)
    return inter / union


def jitter_bbox(bbox: tuple[int, int, int, int], rng: np.random.RandomState,
                sigma_px: float, size_jitter: float,
                dims: tuple[int, int]) -> tuple[int, int, int, int]:
    """Detector-style box noise: Gaussian centre shift plus uniform size
    scaling, clipped to the image.  Zero parameters reproduce the input."""
    if sigma_px < 0 or size_jitter < 0:
        raise ValueError("jitter parameters must be >= 0")
    c0, r0, c1, r1 = bbox
    height, width = dims
    # exclusive-edge centre keeps noiseless edges exactly on integers, so
    # rounding has a full half-pixel margin instead of flipping on any noise
    cx = (c0 + c1 + 1) / 2.0 + (rng.normal(0.0, sigma_px) if sigma_px else 0.0)
    cy = (r0 + r1 + 1) / 2.0 + (rng.normal(0.0, sigma_px) if sigma_px else 0.0)
    hw = (c1 - c0 + 1) / 2.0 * (1.0 + rng.uniform(-size_jitter, size_jitter)
                                if size_jitter else 1.0)
    hh = (r1 - r0 + 1) / 2.0 * (1.0 + rng.uniform(-size_jitter, size_jitter)
                                if size_jitter else 1.0)
    nc0 = int(math.floor(cx - hw + 0.5))
    nr0 = int(math.floor(cy - hh + 0.5))
    nc1 = int(math.floor(cx + hw + 0.5)) - 1
    nr1 = int(math.floor(cy + hh + 0.5)) - 1
    nc0, nc1 = max(nc0, 0), min(nc1, width - 1)
    nr0, nr1 = max(nr0, 0), min(nr1, height - 1)
    if nc1 < nc0:
        nc0 = nc1 = min(max(nc0, 0), width - 1)
    if nr1 < nr0:
        nr0 = nr1 = min(max(nr0, 0), height - 1)
    return nc0, nr0, nc1, nr1


def with_jittered_masks(pairs: list[RadioVisualPair], sigma_px: float,
                        size_jitter: float, mask_pad: int,
                        seed: int) -> list[RadioVisualPair]:
    """Copy of the dataset with masks rebuilt from noisy boxes; zero noise
    returns masks bit-identical to the groundtruth variant."""
    rng = np.random.RandomState(seed)
    out = []
    for p in pairs:
        dims = (p.image.shape[1], p.image.shape[2])
        box = jitter_bbox(p.gt.bbox, rng, sigma_px, size_jitter, dims)
        mask = scene.mask_from_bbox(box, mask_pad, dims).astype(np.float32)
        out.append(RadioVisualPair(id=p.id, heatmap=p.heatmap, image=p.image,
                                   mask=mask, gt=p.gt, seed=p.seed))
    return out
