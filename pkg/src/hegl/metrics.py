"""Classification metrics, generalisation gaps, attention quality and noise sweeps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, NoiseSpec, perturb


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUC with one class)."""


DEFAULT_SIGMAS = (0.0, 0.03, 0.05, 0.1)


def auc(scores, labels) -> float:
    """Area under the ROC curve by the trapezoidal rule over distinct thresholds.

    Tied scores form a single ROC step, so ties count one half, which makes
    this equal to the Mann-Whitney statistic.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"auc: {scores.shape} scores vs {labels.shape} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc: labels contain a single class")
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], pos[order]
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(p)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @classmethod
    def from_predictions(cls, preds, labels) -> "Confusion":
        preds = np.asarray(preds).astype(bool).ravel()
        labels = np.asarray(labels).astype(bool).ravel()
        if preds.shape != labels.shape or preds.size == 0:
            raise ValueError(f"confusion: length mismatch {preds.shape} vs {labels.shape}")
        return cls(int(np.sum(preds & labels)), int(np.sum(~preds & ~labels)),
                   int(np.sum(preds & ~labels)), int(np.sum(~preds & labels)))

    @property
    def f1_degenerate(self) -> bool:
        return 2 * self.tp + self.fp + self.fn == 0

    @property
    def mcc_degenerate(self) -> bool:
        t = self
        return (t.tp + t.fp) * (t.tp + t.fn) * (t.tn + t.fp) * (t.tn + t.fn) == 0

    @property
    def f1(self) -> float:
        if self.f1_degenerate:
            return 0.0
        return 2 * self.tp / (2 * self.tp + self.fp + self.fn)

    @property
    def mcc(self) -> float:
        if self.mcc_degenerate:
            return 0.0
        t = self
        den = np.sqrt(float(t.tp + t.fp) * (t.tp + t.fn) * (t.tn + t.fp) * (t.tn + t.fn))
        return float((t.tp * t.tn - t.fp * t.fn) / den)


def confusion_metrics(preds, labels) -> Tuple[float, float]:
    """(F1, MCC); a zero denominator yields 0."""
    c = Confusion.from_predictions(preds, labels)
    return c.f1, c.mcc


@dataclass
class ClassMetrics:
    name: str
    auc: Optional[float]
    f1: float
    mcc: float
    notes: List[str] = field(default_factory=list)


@dataclass
class MetricReport:
    auc: float
    f1: float
    mcc: float
    per_class: List[ClassMetrics]
    threshold: float
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_class"] = [ClassMetrics(**c) for c in d["per_class"]]
        return cls(**d)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "auc", "f1", "mcc", "threshold", "notes"])
            for c in self.per_class:
                w.writerow([c.name, "" if c.auc is None else repr(c.auc), repr(c.f1),
                            repr(c.mcc), repr(self.threshold), "; ".join(c.notes)])
            w.writerow(["macro", repr(self.auc), repr(self.f1), repr(self.mcc),
                        repr(self.threshold), "; ".join(self.notes)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def report_from_scores(scores, labels, threshold: float = 0.5,
                       class_names: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-class and macro AUC/F1/MCC from (N, C) probabilities."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2 or len(scores) == 0:
        raise ValueError(f"report: scores {scores.shape} vs labels {labels.shape}")
    names = list(class_names) if class_names is not None else [
        f"class{k}" for k in range(scores.shape[1])]
    per_class, notes = [], []
    for k, name in enumerate(names):
        cm_notes = []
        try:
            a = auc(scores[:, k], labels[:, k])
        except UndefinedMetricError:
            a = None
            cm_notes.append("auc undefined: single-class labels")
            notes.append(f"{name}: auc undefined, excluded from macro")
        conf = Confusion.from_predictions(scores[:, k] >= threshold, labels[:, k])
        if conf.f1_degenerate:
            cm_notes.append("f1 denominator zero, set to 0")
        if conf.mcc_degenerate:
            cm_notes.append("mcc denominator zero, set to 0")
        per_class.append(ClassMetrics(name, a, conf.f1, conf.mcc, cm_notes))
    aucs = [c.auc for c in per_class if c.auc is not None]
    if not aucs:
        raise UndefinedMetricError("report: auc undefined for every class")
    return MetricReport(
        auc=float(np.mean(aucs)),
        f1=float(np.mean([c.f1 for c in per_class])),
        mcc=float(np.mean([c.mcc for c in per_class])),
        per_class=per_class, threshold=threshold, notes=notes)


def evaluate(model, dataset: Dataset, threshold: float = 0.5) -> MetricReport:
    """Score ``dataset`` with ``model.predict_proba`` and report metrics."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    scores = model.predict_proba(dataset.images)
    return report_from_scores(scores, dataset.labels, threshold, dataset.class_names)


@dataclass
class GapReport:
    auc_gap: float
    f1_gap: float
    mcc_gap: float

    @classmethod
    def between(cls, val: MetricReport, test: MetricReport) -> "GapReport":
        return cls(val.auc - test.auc, val.f1 - test.f1, val.mcc - test.mcc)


# -- attention quality --------------------------------------------------------------

@dataclass
class OverlapReport:
    dice: float                  # mean over scored (sample, class) pairs
    fp_mass: float
    per_class_dice: List[Optional[float]]
    per_class_fp_mass: List[Optional[float]]
    n_pairs: int


def attention_overlap(attention, masks, valid=None) -> OverlapReport:
    """Soft Dice ``2|a*m| / (|a| + |m|)`` and FP mass ``sum a*(1-m)``.

    Scores every (sample, class) pair flagged in ``valid`` (default: pairs
    whose mask is non-empty). Arrays are (N, C, G, G).
    """
    a = np.asarray(attention, dtype=np.float64)
    m = np.asarray(masks, dtype=np.float64)
    if a.shape != m.shape or a.ndim < 3:
        raise ValueError(f"attention_overlap: shape mismatch {a.shape} vs {m.shape}")
    n, c = a.shape[:2]
    a = a.reshape(n, c, -1)
    m = m.reshape(n, c, -1)
    valid = (m.sum(-1) > 0) if valid is None else np.asarray(valid, bool)
    inter = (a * m).sum(-1)
    dice = 2.0 * inter / (a.sum(-1) + m.sum(-1))
    fp = (a * (1.0 - m)).sum(-1)
    per_dice, per_fp = [], []
    for k in range(c):
        sel = valid[:, k]
        per_dice.append(float(dice[sel, k].mean()) if sel.any() else None)
        per_fp.append(float(fp[sel, k].mean()) if sel.any() else None)
    if not valid.any():
        raise UndefinedMetricError("attention_overlap: no scored pairs")
    return OverlapReport(float(dice[valid].mean()), float(fp[valid].mean()),
                         per_dice, per_fp, int(valid.sum()))


def attention_similarity(attention) -> float:
    """Mean over samples of the mean |cosine| between distinct class maps."""
    a = np.asarray(attention, dtype=np.float64)
    n, c = a.shape[:2]
    flat = a.reshape(n, c, -1)
    unit = flat / np.linalg.norm(flat, axis=-1, keepdims=True)
    sims = np.abs(unit @ unit.transpose(0, 2, 1))
    iu = np.triu_indices(c, k=1)
    return float(sims[:, iu[0], iu[1]].mean())


# -- robustness ------------------------------------------------------------------------

def sigma_seed(seed: int, sigma: float) -> int:
    return int(np.random.SeedSequence([seed, int(round(sigma * 1e6))]).generate_state(1)[0])


def noise_sweep(model, dataset: Dataset, sigmas: Sequence[float] = DEFAULT_SIGMAS,
                seed: int = 0, threshold: float = 0.5) -> List[Tuple[float, MetricReport]]:
    """Evaluate under additive Gaussian pixel noise at each ``sigma``."""
    sigmas = list(sigmas)
    if not sigmas:
        raise ValueError("noise_sweep: no sigmas given")
    rows = []
    for sigma in sigmas:
        noisy = perturb(dataset, NoiseSpec(float(sigma), sigma_seed(seed, sigma)))
        rows.append((float(sigma), evaluate(model, noisy, threshold)))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        names = [c.name for c in rows[0][1].per_class]
        w.writerow(["sigma", "auc", "f1", "mcc"] + [f"auc_{n}" for n in names])
        for sigma, rep in rows:
            w.writerow([repr(sigma), repr(rep.auc), repr(rep.f1), repr(rep.mcc)]
                       + ["" if c.auc is None else repr(c.auc) for c in rep.per_class])
