"""Shared finite-difference gradient checking used across test modules."""

import numpy as np


def fd_grads(fn, params, h=1e-5):
    """Central-difference gradients of the scalar fn() w.r.t. each param.

    fn must rebuild its graph from params' current data on every call.
    """
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat, gf = p.data.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = fn()
            flat[i] = orig - h
            lo = fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2.0 * h)
        out.append(g)
    return out


def check_grads(fn, params, tol=1e-4):
    for p in params:
        p.grad = None
    loss = fn()
    assert isinstance(loss, float)
    refs = fd_grads(fn, params)
    for p, ref in zip(params, refs):
        assert p.grad is not None, "gradient was not populated"
        scale = max(np.max(np.abs(ref)), 1e-6)
        err = np.max(np.abs(p.grad - ref)) / scale
        assert err < tol, f"gradient off by {err:.2e} (tol {tol})"


def scalar_loss(t):
    """Evaluate a Tensor expression, run backward, return the float value."""
    t.backward()
    return t.item()
