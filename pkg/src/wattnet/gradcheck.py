"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x.data`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are estimated; the
    returned array then has one value per index.
    """
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = []
    for i in positions:
        old = flat[i]
        flat[i] = old + step
        fp = float(f().data)
        flat[i] = old - step
        fm = float(f().data)
        flat[i] = old
        out.append((fp - fm) / (2 * step))
    out = np.asarray(out, dtype=np.float64)
    return out.reshape(x.shape) if indices is None else out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-6,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences over ``inputs``.

    ``samples`` limits the check to that many randomly chosen entries across all
    inputs (used for whole-model checks).
    """
    for t in inputs:
        t.grad = None
    f().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    if samples is None:
        worst = 0.0
        for t, a in zip(inputs, analytic):
            worst = max(worst, float(relative_error(a, numerical_grad(f, t, step)).max()))
        return worst

    rng = rng or np.random.default_rng(0)
    sizes = np.array([t.size for t in inputs])
    picks = rng.choice(int(sizes.sum()), size=samples, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for p in picks:
        k = int(np.searchsorted(offsets, p, side="right") - 1)
        local = int(p - offsets[k])
        num = numerical_grad(f, inputs[k], step, indices=[local])[0]
        worst = max(worst, float(relative_error(analytic[k].reshape(-1)[local], num)))
    return worst
