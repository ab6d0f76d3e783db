"""Minimal reverse-mode autodiff over numpy arrays.

Covers exactly the ops the backbones, projectors, contrastive losses and the
localiser need: elementwise arithmetic with broadcasting, matmul, strided
conv2d, average pooling, the usual activations, reductions and an L2
normalizer.  Values are float64 so finite-difference checks are meaningful;
checkpoints are stored float32.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from rvl import dataset as _ds


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy array with a gradient slot and an op-graph backreference."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=float)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _node(data, parents, backward) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-accumulate gradients from this tensor through the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without an explicit gradient needs a scalar, "
                    f"got shape {self.data.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:  # iterative topo sort, deep graphs must not recurse
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=float)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf parameter; intermediate grads are not retained
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if parent.requires_grad:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        a, b = self, Tensor._lift(other)
        data = a.data + b.data
        def back(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
        return Tensor._node(data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-Tensor._lift(other))

    def __rsub__(self, other):
        return Tensor._lift(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._lift(other)
        data = a.data * b.data
        def back(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
        return Tensor._node(data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return self * (1.0 / scalar)

    def __matmul__(self, other):
        a, b = self, Tensor._lift(other)
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        data = a.data @ b.data
        def back(g):
            return g @ b.data.T, a.data.T @ g
        return Tensor._node(data, (a, b), back)

    @property
    def T(self):
        if self.data.ndim != 2:
            raise ValueError(f"T expects a 2-D tensor, got {self.shape}")
        def back(g):
            return (g.T,)
        return Tensor._node(self.data.T, (self,), back)

    def reshape(self, *shape):
        old = self.shape
        def back(g):
            return (g.reshape(old),)
        return Tensor._node(self.data.reshape(*shape), (self,), back)

    def __getitem__(self, idx):
        def back(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            return (full,)
        return Tensor._node(self.data[idx], (self,), back)

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)
        return Tensor._node(data, (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max_all(self):
        """Maximum over every element; gradient flows to the first argmax."""
        idx = np.unravel_index(int(np.argmax(self.data)), self.data.shape)
        data = self.data[idx]
        def back(g):
            full = np.zeros_like(self.data)
            full[idx] = g
            return (full,)
        return Tensor._node(data, (self,), back)

    # -- elementwise nonlinearities ------------------------------------------

    def relu(self):
        mask = self.data > 0
        def back(g):
            return (g * mask,)
        return Tensor._node(self.data * mask, (self,), back)

    def leaky_relu(self, alpha: float = 0.01):
        pos = self.data > 0
        def back(g):
            return (g * np.where(pos, 1.0, alpha),)
        return Tensor._node(np.where(pos, self.data, alpha * self.data), (self,), back)

    def sigmoid(self):
        s = np.where(self.data >= 0,
                     1.0 / (1.0 + np.exp(-np.abs(self.data))),
                     np.exp(-np.abs(self.data)) / (1.0 + np.exp(-np.abs(self.data))))
        def back(g):
            return (g * s * (1.0 - s),)
        return Tensor._node(s, (self,), back)

    def tanh(self):
        t = np.tanh(self.data)
        def back(g):
            return (g * (1.0 - t * t),)
        return Tensor._node(t, (self,), back)

    def softplus(self):
        def back(g):
            return (g / (1.0 + np.exp(-self.data)),)
        return Tensor._node(np.logaddexp(0.0, self.data), (self,), back)

    def exp(self):
        e = np.exp(self.data)
        def back(g):
            return (g * e,)
        return Tensor._node(e, (self,), back)

    def log(self):
        def back(g):
            return (g / self.data,)
        return Tensor._node(np.log(self.data), (self,), back)

    def l2_normalize(self, axis: int = -1, eps: float = 1e-12):
        """x / sqrt(sum x^2 + eps) along one axis."""
        s = np.sum(self.data ** 2, axis=axis, keepdims=True) + eps
        inv = s ** -0.5
        y = self.data * inv
        def back(g):
            dot = np.sum(g * self.data, axis=axis, keepdims=True)
            return (g * inv - self.data * dot * inv ** 3,)
        return Tensor._node(y, (self,), back)


# ---------------------------------------------------------------------------
# structural ops


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    def back(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in parts)
    return Tensor._node(data, tensors, back)


def pad2d(x: Tensor, pads: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the two trailing axes by (top, bottom, left, right)."""
    t, b, l, r = pads
    if min(pads) < 0:
        raise ValueError(f"pads must be >= 0, got {pads}")
    widths = [(0, 0)] * (x.data.ndim - 2) + [(t, b), (l, r)]
    data = np.pad(x.data, widths)
    sl = (Ellipsis,
          slice(t, data.shape[-2] - b if b else None),
          slice(l, data.shape[-1] - r if r else None))
    def back(g):
        return (g[sl],)
    return Tensor._node(data, (x,), back)


def conv2d(x: Tensor, w: Tensor, stride: int | tuple[int, int] = 1,
           pad: int | tuple[int, int] = 0) -> Tensor:
    """Batched 2-D cross-correlation: x (B,C,H,W) with kernels w (O,C,kh,kw)."""
    x = Tensor._lift(x)
    w = Tensor._lift(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape} vs kernel {w.shape}")
    sh, sw = (stride, stride) if isinstance(stride, int) else stride
    ph, pw = (pad, pad) if isinstance(pad, int) else pad

    xb = x.data
    if ph or pw:
        xb = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    bsz, cin, h, wid = xb.shape
    cout, _, kh, kw = w.shape
    if kh > h or kw > wid:
        raise ValueError(f"kernel {w.shape} larger than padded input {xb.shape}")
    oh = (h - kh) // sh + 1
    ow = (wid - kw) // sw + 1

    s0, s1, s2, s3 = xb.strides
    windows = np.lib.stride_tricks.as_strided(
        xb, shape=(bsz, cin, kh, kw, oh, ow),
        strides=(s0, s1, s2, s3, s2 * sh, s3 * sw))
    cols = windows.reshape(bsz, cin * kh * kw, oh * ow)
    wflat = w.data.reshape(cout, cin * kh * kw)
    out = (wflat @ cols).reshape(bsz, cout, oh, ow)

    def back(g):
        gflat = g.reshape(bsz, cout, oh * ow)
        gw = np.einsum("bon,bkn->ok", gflat, cols).reshape(w.shape)
        gcols = np.einsum("ok,bon->bkn", wflat, gflat)
        gc = gcols.reshape(bsz, cin, kh, kw, oh, ow)
        gxp = np.zeros((bsz, cin, h, wid))
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u:u + sh * oh:sh, v:v + sw * ow:sw] += gc[:, :, u, v]
        if ph or pw:
            gxp = gxp[:, :, ph:h - ph, pw:wid - pw]
        return gxp, gw
    return Tensor._node(out, (x, w), back)


def avg_pool2d(x: Tensor, k: int | tuple[int, int]) -> Tensor:
    """Non-overlapping average pooling on (B,C,H,W); k is the square kernel
    edge or a (kh, kw) pair."""
    kh, kw = (k, k) if isinstance(k, int) else k
    x = Tensor._lift(x)
    b, c, h, w = x.shape
    if kh < 1 or kw < 1:
        raise ValueError(f"pool kernel must be >= 1, got {(kh, kw)}")
    if h % kh or w % kw:
        raise ValueError(f"avg_pool2d needs dims divisible by {(kh, kw)}, "
                         f"got {h}x{w}")
    data = x.data.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))
    def back(g):
        g = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw)
        return (g,)
    return Tensor._node(data, (x,), back)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along one axis, shifted for stability."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    y = (x - Tensor(shift)).exp().sum(axis=axis).log()
    return y + Tensor(np.squeeze(shift, axis=axis))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam with bias correction."""

    def __init__(self, params: list[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"non-finite gradient in parameter {i} at step {self.t}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# checkpoints


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def save_checkpoint(params: dict[str, Tensor], out_dir: Path) -> None:
    """Write named parameters as float32 array files plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, p in params.items():
        fname = _safe_name(name) + ".rvhm"
        arr = p.data if isinstance(p, Tensor) else np.asarray(p)
        _ds.write_array(out_dir / fname, arr)
        index[name] = fname
    (out_dir / "manifest.json").write_text(json.dumps({"params": index}, indent=1))


def load_checkpoint(ckpt_dir: Path) -> dict[str, np.ndarray]:
    """Read a parameter checkpoint back as float64 arrays keyed by name."""
    ckpt_dir = Path(ckpt_dir)
    mf = ckpt_dir / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"checkpoint manifest not found: {mf}")
    index = json.loads(mf.read_text())["params"]
    return {name: _ds.read_array(ckpt_dir / fname).astype(float)
            for name, fname in index.items()}
