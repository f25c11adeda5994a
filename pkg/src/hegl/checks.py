"""Finite-difference gradient suite over the training objective and its parts."""

from __future__ import annotations

from typing import Callable, Dict, Iterator, Tuple

import numpy as np

from .losses import ce_loss, cosine_sim, dal_loss, hegl_loss, penalized_dice
from .tensor import Tensor, grad_check, softmax

GRAD_TOLERANCE = 1e-4
SUITE = ("ce_loss", "penalized_dice", "cosine_sim", "dal_loss", "hegl_loss")

Case = Tuple[Callable[[Tensor], Tensor], np.ndarray]


def _cases(name: str, rng: np.random.Generator) -> Case:
    if name == "ce_loss":
        y = (rng.random((3, 4)) < 0.5).astype(float)
        return (lambda t: ce_loss(t, y)), rng.standard_normal((3, 4)) * 2.0
    if name == "penalized_dice":
        m = (rng.random(9) < 0.4).astype(float)
        m[rng.integers(9)] = 1.0
        # keep entries away from 0 so the central difference stays in the domain a >= 0
        return (lambda t: penalized_dice(t, m)), rng.uniform(0.05, 1.0, size=9)
    if name == "cosine_sim":
        other = rng.standard_normal(6)
        return (lambda t: cosine_sim(t, other)), rng.standard_normal(6)
    if name == "dal_loss":
        return dal_loss, rng.uniform(0.05, 1.0, size=(3, 2, 2))
    if name == "hegl_loss":
        logits = rng.standard_normal((2, 3))
        labels = (rng.random((2, 3)) < 0.5).astype(float)
        masks = (rng.random((2, 3, 2, 2)) < 0.4).astype(float)
        masks[..., 0, 0] = 1.0

        def f(t):
            # attention through a softmax, as in the model
            attention = softmax(t.reshape((2, 3, 4))).reshape((2, 3, 2, 2))
            return hegl_loss(Tensor(logits), labels, attention, masks)[0]
        return f, rng.standard_normal((2, 3, 2, 2))
    raise KeyError(name)


def iter_cases(name: str, n_cases: int = 100, seed: int = 0) -> Iterator[Case]:
    rng = np.random.default_rng([seed, SUITE.index(name)])
    for _ in range(n_cases):
        yield _cases(name, rng)


def loss_gradient_suite(n_cases: int = 100, seed: int = 0, eps: float = 1e-5) -> Dict[str, float]:
    """Max relative gradient error per loss over ``n_cases`` random inputs."""
    return {name: max(grad_check(f, x, eps) for f, x in iter_cases(name, n_cases, seed))
            for name in SUITE}
