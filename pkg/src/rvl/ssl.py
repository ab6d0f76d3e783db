"""Cross-modal contrastive learning: backbones, projectors, the CL / MCL /
SCL objectives, momentum encoders, training and subspace analysis.

CL contrasts pooled radio and vision embeddings across a batch, MCL does the
same with the vision input masked to the target region, and SCL contrasts
the spatial attention scores directly without projector heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from rvl import autodiff as ad
from rvl import selflabel
from rvl.autodiff import Tensor
from rvl.selflabel import attention_map, attention_score  # noqa: F401  (attention ops live with the template logic)

FLAVOURS = ("CL", "MCL", "SCL")


@dataclass
class SslConfig:
    flavour: str = "MCL"
    temperature: float | None = None   # defaults: 0.07 for CL/MCL, 0.1 for SCL
    queue_size: int | None = None      # must equal batch
    mask_pad_px: int = 5
    mask_pad_feat: int = 1
    ema_enabled: bool = False
    ema_momentum: float = 0.999
    embed_dim: int = 64
    channels: int = 32
    steps: int = 400
    batch: int = 8
    lr: float = 1e-5
    lr_schedule: str = "constant"   # constant | cosine
    warmup_steps: int = 0
    vision_fov_deg: float = 90.0   # pinhole horizontal fov of the camera branch
    pools: tuple = ((2, 2), (2, 2))   # per-stage (rows, cols) pooling
    seed: int = 0

    def __post_init__(self) -> None:
        if self.flavour not in FLAVOURS:
            raise ValueError(f"flavour must be one of {FLAVOURS}, got {self.flavour!r}")
        if self.temperature is None:
            self.temperature = 0.1 if self.flavour == "SCL" else 0.07
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.queue_size is None:
            self.queue_size = self.batch
        if self.queue_size != self.batch:
            raise ValueError(
                f"queue_size must equal batch ({self.batch}), got {self.queue_size}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be constant or cosine, "
                             f"got {self.lr_schedule!r}")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError(f"warmup_steps must lie in [0, steps), "
                             f"got {self.warmup_steps}")
        if not (0.0 < self.vision_fov_deg < 180.0):
            raise ValueError(f"vision_fov_deg must be in (0, 180), "
                             f"got {self.vision_fov_deg}")
        self.pools = tuple(tuple(int(k) for k in p) for p in self.pools)
        if (len(self.pools) != 2 or any(len(p) != 2 for p in self.pools)
                or any(k < 1 for p in self.pools for k in p)):
            raise ValueError(f"pools must be two (rows, cols) pairs >= 1, "
                             f"got {self.pools}")


def step_lr(cfg: SslConfig, step: int) -> float:
    """Learning rate at a given step: linear warmup, then constant or a
    half-cosine decay to zero over the remaining steps."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    if cfg.lr_schedule == "cosine":
        t = (step - cfg.warmup_steps) / max(cfg.steps - cfg.warmup_steps, 1)
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t))
    return cfg.lr


# ---------------------------------------------------------------------------
# networks


def _he_conv(rs, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    return rs.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _he_linear(rs, shape):
    return rs.standard_normal(shape) * math.sqrt(2.0 / shape[0])


def coord_planes(height: int, width: int,
                 col_fov_deg: float | None = None) -> np.ndarray:
    """(2, H, W) constant row/column coordinate maps in [-1, 1].

    With col_fov_deg set, columns are remapped to be linear in azimuth for a
    pinhole camera of that horizontal field of view (pixel columns sample
    tan(azimuth), so the inverse warp is an arctangent).  This lets a camera
    branch and a linear-in-azimuth radio branch share a coordinate system."""
    rows = np.linspace(-1.0, 1.0, height)[:, None]
    cols = np.linspace(-1.0, 1.0, width)[None, :]
    if col_fov_deg is not None:
        half = math.radians(col_fov_deg) / 2.0
        cols = np.arctan(cols * math.tan(half)) / half
    return np.stack([np.broadcast_to(rows, (height, width)),
                     np.broadcast_to(cols, (height, width))])


class Backbone:
    """Small conv encoder: two conv+pool stages then a linear conv, mapping
    (in_channels, H, W) to (channels, H/4, W/4) spatial features.

    Every stage also convolves two constant coordinate planes, so features
    carry absolute position; translation-invariant features alone cannot
    survive global pooling or anchor the attention map."""

    def __init__(self, in_channels: int, channels: int, seed: int,
                 col_fov_deg: float | None = None,
                 pools: tuple = ((2, 2), (2, 2))):
        rs = np.random.RandomState(seed)
        c1 = max(channels // 2, 4)
        self.in_channels = in_channels
        self.channels = channels
        self.col_fov_deg = col_fov_deg
        self.pools = tuple(tuple(p) for p in pools)
        if len(self.pools) != 2 or any(len(p) != 2 for p in self.pools):
            raise ValueError(f"pools must be two (kh, kw) pairs, got {pools}")
        # wN/wNc act as one conv over [input, coords]; He fan-in counts both
        def he(shape, fan):
            return Tensor(rs.standard_normal(shape) * math.sqrt(2.0 / fan),
                          requires_grad=True)
        self.w1 = he((c1, in_channels, 3, 3), (in_channels + 2) * 9)
        self.w1c = he((c1, 2, 3, 3), (in_channels + 2) * 9)
        self.b1 = Tensor(np.zeros(c1), requires_grad=True)
        self.w2 = he((channels, c1, 3, 3), (c1 + 2) * 9)
        self.w2c = he((channels, 2, 3, 3), (c1 + 2) * 9)
        self.b2 = Tensor(np.zeros(channels), requires_grad=True)
        self.w3 = he((channels, channels, 3, 3), (channels + 2) * 9)
        self.w3c = he((channels, 2, 3, 3), (channels + 2) * 9)
        self.b3 = Tensor(np.zeros(channels), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w1, self.w1c, self.b1, self.w2, self.w2c, self.b2,
                self.w3, self.w3c, self.b3]

    def _coords(self, batch: int, height: int, width: int) -> Tensor:
        return Tensor(np.broadcast_to(
            coord_planes(height, width, self.col_fov_deg),
            (batch, 2, height, width)))

    def forward(self, x: Tensor) -> Tensor:
        x = Tensor._lift(x)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected (B, {self.in_channels}, H, W) input, "
                             f"got shape {x.shape}")
        b, _, height, width = x.shape
        c1 = self.w1.shape[0]
        h = (ad.conv2d(x, self.w1, pad=1)
             + ad.conv2d(self._coords(b, height, width), self.w1c, pad=1)
             + self.b1.reshape(1, c1, 1, 1))
        h = ad.avg_pool2d(h.relu(), self.pools[0])
        h = (ad.conv2d(h, self.w2, pad=1)
             + ad.conv2d(self._coords(b, *h.shape[2:]), self.w2c, pad=1)
             + self.b2.reshape(1, self.channels, 1, 1))
        h = ad.avg_pool2d(h.relu(), self.pools[1])
        return (ad.conv2d(h, self.w3, pad=1)
                + ad.conv2d(self._coords(b, *h.shape[2:]), self.w3c, pad=1)
                + self.b3.reshape(1, self.channels, 1, 1))


class Projector:
    """Global average pool over bins, then a 2-layer MLP to a unit-norm
    embedding."""

    def __init__(self, channels: int, embed_dim: int, seed: int):
        rs = np.random.RandomState(seed)
        self.w1 = Tensor(_he_linear(rs, (channels, embed_dim)), requires_grad=True)
        self.b1 = Tensor(np.zeros(embed_dim), requires_grad=True)
        self.w2 = Tensor(_he_linear(rs, (embed_dim, embed_dim)), requires_grad=True)
        self.b2 = Tensor(np.zeros(embed_dim), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def forward(self, feat: Tensor) -> Tensor:
        b, c, h, w = feat.shape
        z = feat.sum(axis=3).sum(axis=2) * (1.0 / (h * w))
        z = (z @ self.w1 + self.b1).relu() @ self.w2 + self.b2
        return z.l2_normalize(axis=1)


def encode_spatial(model: "SslModel", x: Tensor, branch: str) -> Tensor:
    """Forward one branch of the model; x is (B, in_channels, H, W)."""
    if branch == "radio":
        return model.backbone_r.forward(x)
    if branch == "vision":
        return model.backbone_v.forward(x)
    raise ValueError(f"branch must be 'radio' or 'vision', got {branch!r}")


def project(projector: Projector, feat: Tensor) -> Tensor:
    return projector.forward(feat)


def ema_update(ema_params: list[Tensor], params: list[Tensor], m: float) -> None:
    """In-place exponential moving average of encoder weights."""
    for bar, p in zip(ema_params, params):
        bar.data = m * bar.data + (1.0 - m) * p.data


# ---------------------------------------------------------------------------
# losses


def loss_contrastive(q: Tensor, k_pos: Tensor, k_negs: Tensor, tau: float) -> Tensor:
    """One-sided InfoNCE for a single query against one positive and K
    negatives; embeddings are expected unit-norm, similarities are scaled
    dot products."""
    q = Tensor._lift(q)
    k_pos = Tensor._lift(k_pos)
    k_negs = Tensor._lift(k_negs)
    if q.data.ndim != 1 or k_pos.shape != q.shape:
        raise ValueError(f"q and k_pos must be matching vectors, got "
                         f"{q.shape} and {k_pos.shape}")
    if k_negs.data.ndim != 2 or k_negs.shape[0] < 1:
        raise ValueError(f"need at least one negative, got shape {k_negs.shape}")
    n = q.shape[0]
    pos = (q * k_pos).sum() * (1.0 / tau)
    negs = (k_negs @ q.reshape(n, 1)).reshape(k_negs.shape[0]) * (1.0 / tau)
    shift = float(max(pos.item(), negs.data.max()))
    lse = ((pos - shift).exp() + (negs - shift).exp().sum()).log() + shift
    return lse - pos


def _softmax_ce_diagonal(logits: Tensor) -> Tensor:
    """Mean cross-entropy of each row against its diagonal entry."""
    b = logits.shape[0]
    lse = ad.logsumexp(logits, axis=1)
    diag = (logits * np.eye(b)).sum(axis=1)
    return (lse - diag).mean()


def bidirectional_infonce(q_r: Tensor, q_v: Tensor, tau: float,
                          k_r: Tensor | None = None, k_v: Tensor | None = None) -> Tensor:
    """Mean of the vision-to-radio and radio-to-vision InfoNCE over a batch.

    Without momentum encoders the keys are the other modality's embeddings
    themselves; with them, the detached EMA embeddings are used as keys.
    """
    k_r = q_r if k_r is None else k_r
    k_v = q_v if k_v is None else k_v
    l_vr = _softmax_ce_diagonal((q_v @ k_r.T) * (1.0 / tau))
    l_rv = _softmax_ce_diagonal((q_r @ k_v.T) * (1.0 / tau))
    return (l_vr + l_rv) * 0.5


def loss_scl(score_matrix: Tensor, tau: float) -> Tensor:
    """Spatial contrastive loss from the (B, B) attention-score matrix,
    S[i, j] = S(r_i, v_j); positives on the diagonal, both directions."""
    b = score_matrix.shape[0]
    if b < 2 or score_matrix.shape != (b, b):
        raise ValueError(f"score matrix must be square with batch >= 2, got "
                         f"{score_matrix.shape}")
    logits = score_matrix * (1.0 / tau)
    return (_softmax_ce_diagonal(logits) + _softmax_ce_diagonal(logits.T)) * 0.5


def scl_score_matrix(feats_r: Tensor, feats_v: Tensor, masks: np.ndarray,
                     pad_feat: int = 1) -> Tensor:
    """All-pairs attention scores S[i, j] between radio maps i and masked
    vision templates j."""
    b = feats_r.shape[0]
    rows = []
    for i in range(b):
        f_r = feats_r[i]
        row = []
        for j in range(b):
            template = selflabel.crop_template(feats_v[j], masks[j], pad_feat)
            row.append(selflabel.attention_score(selflabel.attention_map(f_r, template)))
        rows.append(ad.stack(row))
    return ad.stack(rows)


# ---------------------------------------------------------------------------
# training


@dataclass
class SslModel:
    """Trained encoder bundle; projectors are absent for SCL."""

    backbone_r: Backbone
    backbone_v: Backbone
    projector_r: Projector | None
    projector_v: Projector | None
    config: SslConfig

    def encode_radio(self, x: Tensor) -> Tensor:
        return self.backbone_r.forward(x)

    def encode_vision(self, x: Tensor) -> Tensor:
        return self.backbone_v.forward(x)

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for prefix, net in (("radio", self.backbone_r), ("vision", self.backbone_v)):
            for name in ("w1", "w1c", "b1", "w2", "w2c", "b2", "w3", "w3c", "b3"):
                out[f"{prefix}.{name}"] = getattr(net, name)
        for prefix, net in (("proj_r", self.projector_r), ("proj_v", self.projector_v)):
            if net is not None:
                for name in ("w1", "b1", "w2", "b2"):
                    out[f"{prefix}.{name}"] = getattr(net, name)
        return out


def build_model(cfg: SslConfig) -> SslModel:
    bb_r = Backbone(1, cfg.channels, seed=cfg.seed, pools=cfg.pools)
    bb_v = Backbone(3, cfg.channels, seed=cfg.seed + 1,
                    col_fov_deg=cfg.vision_fov_deg, pools=cfg.pools)
    if cfg.flavour == "SCL":
        return SslModel(bb_r, bb_v, None, None, cfg)
    return SslModel(bb_r, bb_v,
                    Projector(cfg.channels, cfg.embed_dim, seed=cfg.seed + 2),
                    Projector(cfg.channels, cfg.embed_dim, seed=cfg.seed + 3),
                    cfg)


def _batch_tensors(pairs_by_id, ids, flavour: str):
    from rvl.dataset import log_compress
    heat = np.stack([log_compress(pairs_by_id[i].heatmap)[None] for i in ids])
    imgs = np.stack([pairs_by_id[i].image.astype(float) for i in ids])
    masks = np.stack([pairs_by_id[i].mask.astype(float) for i in ids])
    if flavour == "CL":
        masks = np.ones_like(masks)  # CL is the trivial-mask special case
    return Tensor(heat), Tensor(imgs * masks[:, None]), masks


def train_backbone(cfg: SslConfig, pairs, train_ids: list[int] | None = None,
                   ) -> tuple[SslModel, np.ndarray]:
    """Train the two backbones (and projectors for CL/MCL) and return the
    per-step loss curve.  Deterministic for a fixed config and dataset."""
    from rvl import dataset as ds

    pairs_by_id = {p.id: p for p in pairs}
    ids = sorted(pairs_by_id) if train_ids is None else list(train_ids)
    if len(ids) < cfg.batch:
        raise ValueError(f"need at least {cfg.batch} pairs, got {len(ids)}")

    model = build_model(cfg)
    params = model.backbone_r.params() + model.backbone_v.params()
    if cfg.flavour != "SCL":
        params += model.projector_r.params() + model.projector_v.params()
    opt = ad.Adam(params, lr=cfg.lr)

    ema_r = ema_v = None
    if cfg.ema_enabled and cfg.flavour != "SCL":
        ema_r = Backbone(1, cfg.channels, seed=cfg.seed, pools=cfg.pools)
        ema_v = Backbone(3, cfg.channels, seed=cfg.seed + 1,
                         col_fov_deg=cfg.vision_fov_deg, pools=cfg.pools)
        ema_pj_r = Projector(cfg.channels, cfg.embed_dim, seed=cfg.seed + 2)
        ema_pj_v = Projector(cfg.channels, cfg.embed_dim, seed=cfg.seed + 3)

    curve = []
    step = 0
    epoch = 0
    while step < cfg.steps:
        epoch_seed = (cfg.seed + 10007 * epoch) % (2 ** 32)
        for batch_ids in ds.batches(ids, cfg.batch, epoch_seed=epoch_seed):
            if step >= cfg.steps:
                break
            heat, vis, masks = _batch_tensors(pairs_by_id, batch_ids, cfg.flavour)
            f_r = model.backbone_r.forward(heat)
            f_v = model.backbone_v.forward(vis)

            if cfg.flavour == "SCL":
                scores = scl_score_matrix(f_r, f_v, masks, cfg.mask_pad_feat)
                loss = loss_scl(scores, cfg.temperature)
            else:
                q_r = model.projector_r.forward(f_r)
                q_v = model.projector_v.forward(f_v)
                k_r = k_v = None
                if cfg.ema_enabled:
                    k_r = Tensor(ema_pj_r.forward(ema_r.forward(Tensor(heat.data))).data)
                    k_v = Tensor(ema_pj_v.forward(ema_v.forward(Tensor(vis.data))).data)
                loss = bidirectional_infonce(q_r, q_v, cfg.temperature, k_r, k_v)

            val = loss.item()
            if not np.isfinite(val):
                raise RuntimeError(f"contrastive loss diverged at step {step}: {val}")
            curve.append(val)
            opt.zero_grad()
            loss.backward()
            opt.lr = step_lr(cfg, step)
            opt.step()
            if cfg.ema_enabled and ema_r is not None:
                m = cfg.ema_momentum
                ema_update(ema_r.params(), model.backbone_r.params(), m)
                ema_update(ema_v.params(), model.backbone_v.params(), m)
                ema_update(ema_pj_r.params(), model.projector_r.params(), m)
                ema_update(ema_pj_v.params(), model.projector_v.params(), m)
            step += 1
        epoch += 1
    return model, np.array(curve)


# ---------------------------------------------------------------------------
# model persistence


def save_ssl_model(model: SslModel, out_dir) -> None:
    import json
    from pathlib import Path
    ad.save_checkpoint(model.named_params(), out_dir)
    meta = {
        "flavour": model.config.flavour,
        "channels": model.config.channels,
        "embed_dim": model.config.embed_dim,
        "temperature": model.config.temperature,
        "vision_fov_deg": model.config.vision_fov_deg,
        "pools": [list(p) for p in model.config.pools],
    }
    (Path(out_dir) / "model.json").write_text(json.dumps(meta, indent=1))


def load_ssl_model(ckpt_dir) -> SslModel:
    import json
    from pathlib import Path
    meta = json.loads((Path(ckpt_dir) / "model.json").read_text())
    cfg = SslConfig(flavour=meta["flavour"], channels=meta["channels"],
                    embed_dim=meta["embed_dim"],
                    vision_fov_deg=meta.get("vision_fov_deg", 90.0),
                    pools=meta.get("pools", ((2, 2), (2, 2))))
    model = build_model(cfg)
    arrays = ad.load_checkpoint(ckpt_dir)
    for name, tensor in model.named_params().items():
        if tensor.shape != arrays[name].shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: "
                             f"{arrays[name].shape} vs {tensor.shape}")
        tensor.data = arrays[name]
    return model


def write_loss_curve(curve, path) -> None:
    import csv
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["step", "loss"])
        for i, v in enumerate(curve):
            wr.writerow([i, repr(float(v))])


def read_loss_curve(path) -> np.ndarray:
    import csv
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return np.array([float(r["loss"]) for r in rows])


# ---------------------------------------------------------------------------
# subspace analysis


def covariance_spectrum(z: np.ndarray) -> np.ndarray:
    """Singular values (descending) of the centred covariance of row
    vectors z, shape (N, D)."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"need at least 2 sample rows, got shape {z.shape}")
    zc = z - z.mean(axis=0, keepdims=True)
    cov = (zc.T @ zc) / z.shape[0]
    return np.sort(np.linalg.svd(cov, compute_uv=False))[::-1]


def subspace_spectrum(featmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Channel-wise and bin-wise covariance spectra of (N, C, h, w) features.

    Channel-wise treats each sample's bin-averaged channel vector as an
    observation in R^C; bin-wise treats the channel-averaged unfolded bins
    as an observation in R^{h*w}.  Each spectrum is sorted descending.
    """
    f = np.asarray(featmaps, dtype=float)
    if f.ndim != 4:
        raise ValueError(f"expected (N, C, h, w) features, got shape {f.shape}")
    chan = covariance_spectrum(f.mean(axis=(2, 3)))
    bins = covariance_spectrum(f.mean(axis=1).reshape(f.shape[0], -1))
    return chan, bins
