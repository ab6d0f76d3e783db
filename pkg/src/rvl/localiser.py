"""Radio-only target regression: a fixed small conv net trained with MSE on
(range, azimuth) labels, self-supervised or otherwise.

Labels are min-max normalized to [0,1] by the radar range window and the
azimuth field of view before the loss; predictions are clamped back into
the window on the way out.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rvl import autodiff as ad
from rvl import radio
from rvl.autodiff import Tensor

# architecture fixed by an offline hyper-parameter search
CONV_CHANNELS = (8, 16, 8, 32)
CONV_KERNELS = (4, 3, 2, 4)
CONV_STRIDES = (2, 2, 2, 1)
LINEAR_SIZES = (128, 16, 64, 64)


@dataclass
class LocaliserConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.lr <= 0 or self.steps < 1:
            raise ValueError("lr must be > 0 and steps >= 1")


def conv_output_dims(input_dims: tuple[int, int]) -> list[tuple[int, int, int]]:
    """(channels, height, width) after each conv stage."""
    h, w = input_dims
    out = []
    for c, k, s in zip(CONV_CHANNELS, CONV_KERNELS, CONV_STRIDES):
        if h < k or w < k:
            raise ValueError(f"input dims {input_dims} too small for the conv stack")
        h = (h - k) // s + 1
        w = (w - k) // s + 1
        out.append((c, h, w))
    return out


def normalize_labels(rcfg: radio.RadioConfig, labels: np.ndarray) -> np.ndarray:
    """(N, 2) metric labels (range m, azimuth deg) -> [0,1] window units."""
    labels = np.asarray(labels, dtype=float)
    r_min, r_max = rcfg.range_window
    fov = rcfg.azimuth_fov_deg
    out = np.empty_like(labels)
    out[..., 0] = (labels[..., 0] - r_min) / (r_max - r_min)
    out[..., 1] = (labels[..., 1] + fov / 2.0) / fov
    return out


def denormalize_labels(rcfg: radio.RadioConfig, units: np.ndarray) -> np.ndarray:
    units = np.asarray(units, dtype=float)
    r_min, r_max = rcfg.range_window
    fov = rcfg.azimuth_fov_deg
    out = np.empty_like(units)
    out[..., 0] = r_min + units[..., 0] * (r_max - r_min)
    out[..., 1] = units[..., 1] * fov - fov / 2.0
    return out


class Localiser:
    """The regression net; input one (H, W) heatmap channel, output two
    window-normalized coordinates."""

    def __init__(self, input_dims: tuple[int, int], seed: int):
        rs = np.random.RandomState(seed)
        self.input_dims = tuple(input_dims)
        stages = conv_output_dims(self.input_dims)
        self.conv_w: list[Tensor] = []
        self.conv_b: list[Tensor] = []
        in_c = 1
        for (c, _, _), k in zip(stages, CONV_KERNELS):
            w = rs.standard_normal((c, in_c, k, k)) * math.sqrt(2.0 / (in_c * k * k))
            self.conv_w.append(Tensor(w, requires_grad=True))
            self.conv_b.append(Tensor(np.zeros(c), requires_grad=True))
            in_c = c
        c, h, w = stages[-1]
        flat = c * h * w
        self.lin_w: list[Tensor] = []
        self.lin_b: list[Tensor] = []
        dims = (flat,) + LINEAR_SIZES + (2,)
        for d_in, d_out in zip(dims, dims[1:]):
            m = rs.standard_normal((d_in, d_out)) * math.sqrt(2.0 / d_in)
            self.lin_w.append(Tensor(m, requires_grad=True))
            self.lin_b.append(Tensor(np.zeros(d_out), requires_grad=True))

    def params(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        for w, b in zip(self.lin_w, self.lin_b):
            out += [w, b]
        return out

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}.w"], out[f"conv{i}.b"] = w, b
        for i, (w, b) in enumerate(zip(self.lin_w, self.lin_b)):
            out[f"lin{i}.w"], out[f"lin{i}.b"] = w, b
        return out

    def forward(self, x: Tensor) -> Tensor:
        x = Tensor._lift(x)
        if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != self.input_dims:
            raise ValueError(f"expected (B, 1, {self.input_dims[0]}, "
                             f"{self.input_dims[1]}) input, got {x.shape}")
        h = x
        for w, b, s in zip(self.conv_w, self.conv_b, CONV_STRIDES):
            h = ad.conv2d(h, w, stride=s) + b.reshape(1, w.shape[0], 1, 1)
            h = h.relu()
        b_sz = h.shape[0]
        h = h.reshape(b_sz, -1)
        for w, b in zip(self.lin_w[:-1], self.lin_b[:-1]):
            h = (h @ w + b).relu()
        return h @ self.lin_w[-1] + self.lin_b[-1]


def train_localiser(records, rcfg: radio.RadioConfig,
                    cfg: LocaliserConfig) -> tuple[Localiser, np.ndarray]:
    """Fit the net to (heatmap, (range m, azimuth deg)) records.

    Deterministic per seed; aborts on a non-finite loss.
    """
    from rvl import dataset as ds

    if len(records) < cfg.batch:
        raise ValueError(f"need at least {cfg.batch} records, got {len(records)}")
    heatmaps = np.stack([ds.log_compress(h) for h, _ in records])
    labels = normalize_labels(rcfg, np.array([lab for _, lab in records]))
    input_dims = heatmaps.shape[1:]

    model = Localiser(input_dims, seed=cfg.seed)
    opt = ad.Adam(model.params(), lr=cfg.lr)
    idx = list(range(len(records)))
    curve = []
    step = 0
    epoch = 0
    while step < cfg.steps:
        epoch_seed = (cfg.seed + 40009 * epoch) % (2 ** 32)
        for batch_idx in ds.batches(idx, cfg.batch, epoch_seed=epoch_seed):
            if step >= cfg.steps:
                break
            x = Tensor(heatmaps[batch_idx][:, None])
            y = labels[batch_idx]
            diff = model.forward(x) - y
            loss = (diff * diff).mean()
            val = loss.item()
            if not np.isfinite(val):
                raise RuntimeError(f"localiser loss diverged at step {step}: {val}")
            curve.append(val)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
        epoch += 1
    return model, np.array(curve)


def predict(model: Localiser, rcfg: radio.RadioConfig,
            heatmap: np.ndarray) -> tuple[float, float]:
    """Denormalized (range m, azimuth deg) clamped into the radar window."""
    from rvl import dataset as ds
    heatmap = np.asarray(heatmap, dtype=float)
    if heatmap.shape != model.input_dims:
        raise ValueError(f"expected heatmap dims {model.input_dims}, "
                         f"got {heatmap.shape}")
    units = model.forward(Tensor(ds.log_compress(heatmap)[None, None])).data[0]
    units = np.clip(units, 0.0, 1.0)
    rng, az = denormalize_labels(rcfg, units)
    return float(rng), float(az)


def predict_batch(model: Localiser, rcfg: radio.RadioConfig,
                  heatmaps: np.ndarray) -> np.ndarray:
    """(N, 2) predictions for stacked heatmaps."""
    from rvl import dataset as ds
    heatmaps = ds.log_compress(np.asarray(heatmaps, dtype=float))
    units = model.forward(Tensor(heatmaps[:, None])).data
    return denormalize_labels(rcfg, np.clip(units, 0.0, 1.0))


# ---------------------------------------------------------------------------
# persistence


def save_localiser(model: Localiser, out_dir) -> None:
    ad.save_checkpoint(model.named_params(), out_dir)
    meta = {"input_dims": list(model.input_dims)}
    (Path(out_dir) / "localiser.json").write_text(json.dumps(meta))


def load_localiser(ckpt_dir) -> Localiser:
    meta = json.loads((Path(ckpt_dir) / "localiser.json").read_text())
    model = Localiser(tuple(meta["input_dims"]), seed=0)
    arrays = ad.load_checkpoint(ckpt_dir)
    for name, tensor in model.named_params().items():
        if tensor.shape != arrays[name].shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        tensor.data = arrays[name]
    return model


def write_predictions(rows: list[tuple[int, float, float]], path) -> None:
    """Prediction table: id, range_pred, azimuth_pred."""
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["id", "range_pred", "azimuth_pred"])
        for pid, rng, az in rows:
            wr.writerow([pid, repr(float(rng)), repr(float(az))])


def read_predictions(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as f:
        return [(int(r["id"]), float(r["range_pred"]), float(r["azimuth_pred"]))
                for r in csv.DictReader(f)]
