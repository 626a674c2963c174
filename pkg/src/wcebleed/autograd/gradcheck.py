"""Finite-difference verification of backward rules."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numeric_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-4) -> list[np.ndarray]:
    """Central differences of a scalar-valued ``fn``, evaluated in float64."""
    base = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for k, x in enumerate(base):
        g = np.zeros_like(x)
        flat = x.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(*[Tensor(b) for b in base]).data)
            flat[i] = orig - eps
            fm = float(fn(*[Tensor(b) for b in base]).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], dtype=np.float64) -> list[np.ndarray]:
    ts = [Tensor(np.array(x, dtype=dtype), requires_grad=True) for x in inputs]
    out = fn(*ts)
    out.backward()
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| scaled by the larger gradient magnitude (floored)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-4,
    dtype=np.float64,
) -> float:
    """Max relative error of backward() (run in ``dtype``) against float64 central differences.

    ``fn`` must return a scalar Tensor. For non-scalar ops wrap them with
    :func:`projected`.
    """
    num = numeric_grad(fn, inputs, eps)
    ana = analytic_grad(fn, inputs, dtype)
    return max(relative_error(a, n) for a, n in zip(ana, num))


def projected(op: Callable[..., Tensor], out_shape, seed: int = 0) -> Callable[..., Tensor]:
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    weights = np.random.default_rng(seed).normal(size=out_shape)

    def fn(*ts):
        out = op(*ts)
        return (out * Tensor(weights.astype(out.dtype))).sum()

    return fn
