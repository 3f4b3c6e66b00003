"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward, clear_tape


def numeric_grad(fn, x: Tensor, h=1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar fn(x) with respect to x.

    fn must read x.data (it is perturbed in place, then restored).
    """
    flat = x.data.ravel()
    g = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        clear_tape()
        fp = fn().item()
        flat[i] = orig - h
        clear_tape()
        fm = fn().item()
        flat[i] = orig
        g[i] = (fp - fm) / (2.0 * h)
    clear_tape()
    return g.reshape(x.shape)


def check_gradients(fn, params, h=1e-5):
    """Compare analytic and numeric gradients for a scalar-valued fn().

    Returns the worst relative error over all params, where the error for a
    parameter is max|analytic - numeric| / max(||numeric||_inf, 1e-12).
    """
    clear_tape()
    loss = fn()
    backward(loss)
    analytic = []
    for p in params:
        if p.grad is None:
            raise RuntimeError("parameter missing analytic gradient")
        analytic.append(p.grad.copy())
    clear_tape()

    worst = 0.0
    for p, a in zip(params, analytic):
        n = numeric_grad(fn, p, h=h)
        denom = max(np.abs(n).max(), 1e-12)
        rel = np.abs(a - n).max() / denom
        worst = max(worst, rel)
    return worst
