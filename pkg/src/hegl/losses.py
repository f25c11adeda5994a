"""Training objective: BCE + penalised Dice alignment + discriminative attention.

All functions take and return :class:`~hegl.tensor.Tensor` values so the
gradient reaches the attention maps and, through them, the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor, as_tensor, softplus, sqrt

FP_MODES = ("soft-mass", "hard-count")


@dataclass(frozen=True)
class LossWeights:
    """``alpha`` scales the alignment term, ``beta`` the discriminative term."""

    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be >= 0, got alpha={self.alpha}, beta={self.beta}")

    @property
    def label(self) -> str:
        return f"alpha={self.alpha:g},beta={self.beta:g}"


@dataclass(frozen=True)
class PenalizedDiceParams:
    w_fp: float = 1.0
    fp_mode: str = "soft-mass"
    hard_threshold: float = 0.5

    def __post_init__(self):
        if self.w_fp < 0:
            raise ValueError("w_fp must be >= 0")
        if self.fp_mode not in FP_MODES:
            raise ValueError(f"fp_mode must be one of {FP_MODES}")
        if not 0.0 < self.hard_threshold < 1.0:
            raise ValueError("hard_threshold must lie in (0, 1)")


@dataclass(frozen=True)
class LossBreakdown:
    l_ce: float
    l_ha: float
    l_dal: float
    l_total: float

    CSV_HEADER = ("step", "l_ce", "l_ha", "l_dal", "l_total")

    @classmethod
    def combine(cls, l_ce: float, l_ha: float, l_dal: float,
                weights: LossWeights) -> "LossBreakdown":
        return cls(l_ce, l_ha, l_dal, l_ce + weights.alpha * l_ha + weights.beta * l_dal)

    def csv_row(self, step: int) -> list:
        return [step, repr(self.l_ce), repr(self.l_ha), repr(self.l_dal), repr(self.l_total)]


# -- classification ----------------------------------------------------------

def ce_loss(logits, labels) -> Tensor:
    """Mean per-label binary cross-entropy on sigmoid(logits).

    Uses ``softplus(z) - y * z``, which equals ``-y log s - (1 - y) log(1 - s)``
    for ``s = sigmoid(z)`` without the cancellation.
    """
    logits = as_tensor(logits)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValueError(f"ce_loss: labels shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("ce_loss: labels must be 0 or 1")
    return (softplus(logits) - logits * y).mean()


# -- alignment -----------------------------------------------------------------

def _flat_maps(a: Tensor, lead: int) -> Tensor:
    return a.reshape(a.shape[:lead] + (-1,))


def batch_penalized_dice(attention, masks, params: PenalizedDiceParams = PenalizedDiceParams(),
                         spatial_ndim: int = 2) -> Tensor:
    """Penalised Dice loss for every map; reduces the trailing spatial axes."""
    a = as_tensor(attention)
    m = np.asarray(masks, dtype=np.float64)
    if m.shape != a.shape:
        raise ValueError(f"penalized_dice: shape mismatch {a.shape} vs {m.shape}")
    if np.any(a.data < 0):
        raise ValueError("penalized_dice: attention must be non-negative")
    lead = a.ndim - spatial_ndim
    a = _flat_maps(a, lead)
    m = m.reshape(m.shape[:lead] + (-1,))
    mass_m = m.sum(axis=-1)
    mass_a = a.sum(axis=-1)
    if np.any(mass_a.data + mass_m == 0):
        raise ValueError("penalized_dice: attention and mask are both zero")
    overlap = (a * m).sum(axis=-1)
    if params.fp_mode == "soft-mass":
        n_fp = (a * (1.0 - m)).sum(axis=-1)
    else:
        n_fp = Tensor(((a.data > params.hard_threshold) & (m == 0)).sum(axis=-1))
    denom = mass_a + mass_m + n_fp * params.w_fp
    return 1.0 - 2.0 * overlap / denom


def penalized_dice(a, m, params: PenalizedDiceParams = PenalizedDiceParams()) -> Tensor:
    """``1 - 2|a*m| / (|a| + |m| + w_fp * N_fp)`` for one map of any shape."""
    a = as_tensor(a)
    return batch_penalized_dice(a, m, params, spatial_ndim=a.ndim)


# -- discriminative attention ----------------------------------------------------

def _check_nonzero(norms: Tensor, where: str) -> None:
    if np.any(norms.data == 0):
        raise ValueError(f"{where}: zero-norm attention map")


def cosine_sim(a_i, a_j) -> Tensor:
    """Cosine similarity of two maps, flattened."""
    a_i, a_j = as_tensor(a_i), as_tensor(a_j)
    if a_i.shape != a_j.shape:
        raise ValueError(f"cosine_sim: shape mismatch {a_i.shape} vs {a_j.shape}")
    u, v = a_i.reshape(-1), a_j.reshape(-1)
    nu, nv = (u * u).sum(), (v * v).sum()
    _check_nonzero(nu, "cosine_sim")
    _check_nonzero(nv, "cosine_sim")
    return (u * v).sum() / (sqrt(nu) * sqrt(nv))


def pairwise_cosine(maps, spatial_ndim: int = 2) -> Tensor:
    """(..., C, *spatial) -> (..., C, C) cosine similarity matrices."""
    maps = as_tensor(maps)
    lead = maps.ndim - spatial_ndim
    flat = _flat_maps(maps, lead)
    sq = (flat * flat).sum(axis=-1, keepdims=True)
    _check_nonzero(sq, "pairwise_cosine")
    unit = flat / sqrt(sq)
    return unit @ unit.transpose(tuple(range(lead - 1)) + (lead, lead - 1))


def dal_loss(maps, spatial_ndim: Optional[int] = None) -> Tensor:
    """Mean absolute pairwise cosine similarity over the C class maps.

    ``maps`` is ``(C, P)`` for flat maps, ``(C, G, G)`` for one sample, or
    ``(B, C, G, G)`` for a batch, where the value is averaged over samples.
    """
    maps = as_tensor(maps)
    if spatial_ndim is None:
        spatial_ndim = 1 if maps.ndim == 2 else 2
    lead = maps.ndim - spatial_ndim
    if lead < 1:
        raise ValueError("dal_loss: need a class axis")
    c = maps.shape[lead - 1]
    if c < 2:
        raise ValueError(f"dal_loss: need at least 2 classes, got {c}")
    sims = pairwise_cosine(maps, spatial_ndim).abs()
    upper = np.triu(np.ones((c, c)), k=1)
    per_sample = (sims * upper).sum(axis=(-2, -1)) * (2.0 / (c * (c - 1)))
    return per_sample.mean()


# -- composite -------------------------------------------------------------------

def hegl_loss(logits, labels, attention, masks=None, weights: LossWeights = LossWeights(),
              dice_params: PenalizedDiceParams = PenalizedDiceParams(), mask_valid=None):
    """Weighted objective ``ce + alpha * ha + beta * dal``.

    ``masks`` are grid-resolution masks shaped like ``attention``
    (B, C, G, G). The alignment term averages over (sample, class) pairs whose
    label is positive and whose mask is available (``mask_valid``, default all).
    Masks are not touched when ``alpha == 0``.

    Returns ``(total_tensor, LossBreakdown)``.
    """
    attention = as_tensor(attention)
    labels = np.asarray(labels)
    l_ce = ce_loss(logits, labels)
    total = l_ce

    l_ha_value = 0.0
    if weights.alpha > 0:
        if masks is None:
            raise ValueError("hegl_loss: alpha > 0 requires masks")
        positive = labels == 1
        valid = positive if mask_valid is None else positive & np.asarray(mask_valid, bool)
        if np.any(positive & ~valid):
            raise ValueError("hegl_loss: alpha > 0 but a positive class has no mask")
        if valid.any():
            b_idx, c_idx = np.nonzero(valid)
            per_pair = batch_penalized_dice(attention[b_idx, c_idx],
                                            np.asarray(masks)[b_idx, c_idx], dice_params)
            l_ha = per_pair.mean()
            l_ha_value = l_ha.item()
            total = total + l_ha * weights.alpha

    l_dal_value = 0.0
    if weights.beta > 0:
        l_dal = dal_loss(attention, spatial_ndim=2)
        l_dal_value = l_dal.item()
        total = total + l_dal * weights.beta

    return total, LossBreakdown.combine(l_ce.item(), l_ha_value, l_dal_value, weights)
