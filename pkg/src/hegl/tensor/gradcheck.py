"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .core import NonFiniteError, Tensor, as_tensor


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {value.shape}")
    v = value.item()
    if not np.isfinite(v):
        raise NonFiniteError("grad_check: f is non-finite at a probe point")
    return v


def numeric_grad(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of df/dx, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("grad_check: eps must be positive")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        grad[idx] = (_scalar(f(Tensor(xp))) - _scalar(f(Tensor(xm)))) / (2.0 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    xt = Tensor(as_tensor(x).data, requires_grad=True)
    out = f(xt)
    _scalar(out)
    out.backward()
    return np.zeros_like(xt.data) if xt.grad is None else xt.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    The error for each coordinate is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    """
    numeric = numeric_grad(f, x, eps)
    analytic = analytic_grad(f, x)
    rel = np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(numeric))
    return float(rel.max()) if rel.size else 0.0
