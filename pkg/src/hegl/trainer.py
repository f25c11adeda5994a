"""AdamW training with linear warm-up, early stopping on validation AUC,
and the multi-seed ablation matrix over loss weights."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, split
from .losses import LossBreakdown, LossWeights, PenalizedDiceParams, hegl_loss
from .metrics import (
    GapReport,
    MetricReport,
    attention_overlap,
    attention_similarity,
    evaluate,
)
from .model import HEGLNet, ModelConfig, build_model, save_checkpoint
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = (
    LossWeights(1.0, 1.0),   # full objective
    LossWeights(0.0, 1.0),   # discriminative term only
    LossWeights(1.0, 0.0),   # alignment term only
    LossWeights(0.0, 0.0),   # cross-entropy baseline
)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, step: int, component: str, detail: str = ""):
        self.epoch, self.step, self.component = epoch, step, component
        super().__init__(f"non-finite value at epoch={epoch} step={step} "
                         f"component={component} {detail}".rstrip())


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs_max: int = 1000
    patience: int = 50
    warmup_epochs: int = 20
    batch_size: int = 32
    alpha: float = 1.0
    beta: float = 1.0
    w_fp: float = 1.0
    fp_mode: str = "soft-mass"
    hard_threshold: float = 0.5
    binarize_masks: bool = False
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    val_fraction: float = 0.2
    threshold: float = 0.5

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainConfig":
        """Learning rate used with a pretrained ViT-B; too small for training from scratch."""
        return cls(**{"lr": 1e-5, **overrides})

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.warmup_epochs < self.epochs_max:
            raise ValueError("need 0 <= warmup_epochs < epochs_max")
        if self.patience < 1 or self.batch_size < 1:
            raise ValueError("patience and batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("need at least one seed")
        self.weights, self.dice_params  # run their own checks
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta)

    @property
    def dice_params(self) -> PenalizedDiceParams:
        return PenalizedDiceParams(self.w_fp, self.fp_mode, self.hard_threshold)

    def with_weights(self, weights: LossWeights) -> "TrainConfig":
        return replace(self, alpha=weights.alpha, beta=weights.beta)


# -- optimiser --------------------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def decay_mask(params: Dict[str, Tensor]) -> Dict[str, bool]:
    """Weight decay for weight matrices only: no biases, layernorm gains or positions."""
    return {name: t.ndim >= 2 and name != "pos" for name, t in params.items()}


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamWState,
               lr_t: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 1e-2, decay: Optional[Dict[str, bool]] = None):
    """One decoupled-weight-decay Adam update, applied in place.

    ``p <- p - lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)``.
    Tensors with ``requires_grad=False`` are never touched.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"adamw_step: grad shape {g.shape} != param {name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adamw_step: non-finite gradient for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        wd = weight_decay if decay is None or decay.get(name, True) else 0.0
        if wd:
            update = update + wd * p.data
        p.data = p.data - lr_t * update
    return params, state


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear ramp ``lr * (epoch + 1) / warmup`` then constant ``lr``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if epoch < config.warmup_epochs:
        return config.lr * (epoch + 1) / config.warmup_epochs
    return config.lr


# -- run records -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train: LossBreakdown
    val: MetricReport


@dataclass
class RunRecord:
    seed: int
    config: dict
    epochs: List[EpochRecord]
    best_epoch: int
    best_val: MetricReport
    step_losses: List[LossBreakdown]
    test: Optional[MetricReport] = None
    gap: Optional[GapReport] = None
    attention: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_dict(self, include_time: bool = True) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return d

    def summary(self) -> dict:
        d = {"seed": self.seed, "best_epoch": self.best_epoch,
             "epochs_run": len(self.epochs), "val_auc": self.best_val.auc,
             "wall_time": self.wall_time}
        if self.test is not None:
            d.update(test_auc=self.test.auc, test_f1=self.test.f1, test_mcc=self.test.mcc)
        if self.gap is not None:
            d.update(asdict(self.gap))
        d.update(self.attention)
        return d


def _train_means(rows: List[LossBreakdown], weights: LossWeights) -> LossBreakdown:
    return LossBreakdown.combine(float(np.mean([r.l_ce for r in rows])),
                                 float(np.mean([r.l_ha for r in rows])),
                                 float(np.mean([r.l_dal for r in rows])), weights)


def attention_metrics(model: HEGLNet, dataset: Dataset) -> Dict[str, float]:
    _, attention = model.predict_logits(dataset.images)
    grid = model.config.grid
    out = {"attn_similarity": attention_similarity(attention)}
    valid = (dataset.labels == 1) & dataset.mask_valid
    if valid.any():
        ov = attention_overlap(attention, dataset.grid_masks(grid), valid)
        out.update(attn_dice=ov.dice, attn_fp_mass=ov.fp_mass)
    return out


def train(model: HEGLNet, train_set: Dataset, val_set: Dataset, config: TrainConfig,
          seed: int = 0, test_set: Optional[Dataset] = None,
          on_event: Optional[Callable[[str, dict], None]] = None) -> RunRecord:
    """Train ``model`` in place; the returned record's test metrics use the best epoch.

    ``on_event(name, info)`` is called with ``"epoch"`` after every validation,
    ``"checkpoint"`` once the best parameters are restored, and ``"test"``
    after the test set has been scored.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train: empty train or validation set")
    emit = on_event or (lambda name, info: None)
    started = time.perf_counter()
    weights, dice_params = config.weights, config.dice_params
    rng = np.random.default_rng([seed, 0x5EED])
    images, labels = train_set.images, train_set.labels
    masks = valid = None
    if weights.alpha > 0:
        masks = train_set.grid_masks(model.config.grid, binarize=config.binarize_masks)
        valid = train_set.mask_valid
    decay = decay_mask(model.params)
    state = AdamWState()
    n = len(train_set)

    epochs: List[EpochRecord] = []
    step_losses: List[LossBreakdown] = []
    best_auc, best_epoch, best_state, best_val = -np.inf, -1, None, None
    wait = 0
    for epoch in range(config.epochs_max):
        lr_t = lr_schedule(epoch, config)
        order = rng.permutation(n)
        rows = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            component = "forward"
            try:
                out = model(images[idx])
                component = "loss"
                total, breakdown = hegl_loss(
                    out.logits, labels[idx], out.attention,
                    None if masks is None else masks[idx], weights, dice_params,
                    None if valid is None else valid[idx])
                component = "backward"
                model.zero_grad()
                total.backward()
                component = "optimizer"
                adamw_step(model.params, {k: p.grad for k, p in model.params.items()}, state,
                           lr_t, (config.beta1, config.beta2), config.eps,
                           config.weight_decay, decay)
            except NonFiniteError as exc:
                raise NonFiniteLossError(epoch, step, component, str(exc)) from exc
            if not np.isfinite(breakdown.l_total):
                raise NonFiniteLossError(epoch, step, "l_total")
            rows.append(breakdown)
            step_losses.append(breakdown)
        val = evaluate(model, val_set, config.threshold)
        epochs.append(EpochRecord(epoch, lr_t, _train_means(rows, weights), val))
        if val.auc > best_auc:
            best_auc, best_epoch, best_val = val.auc, epoch, val
            best_state = model.state_dict()
            wait = 0
        else:
            wait += 1
        log.debug("epoch %d lr %.2e loss %.4f val_auc %.4f", epoch, lr_t,
                  epochs[-1].train.l_total, val.auc)
        emit("epoch", {"epoch": epoch, "val_auc": val.auc})
        if wait >= config.patience:
            break

    model.load_state_dict(best_state)
    emit("checkpoint", {"best_epoch": best_epoch})
    record = RunRecord(seed=seed, config=asdict(config), epochs=epochs, best_epoch=best_epoch,
                       best_val=best_val, step_losses=step_losses)
    if test_set is not None:
        record.test = evaluate(model, test_set, config.threshold)
        record.gap = GapReport.between(best_val, record.test)
        record.attention = attention_metrics(model, test_set)
        emit("test", {})
    record.wall_time = time.perf_counter() - started
    return record


# -- persistence ----------------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def save_run(record: RunRecord, model: Optional[HEGLNet], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = {"train": record.config, "seed": record.seed}
    if model is not None:
        cfg["model"] = asdict(model.config)
    (directory / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    _write_csv(directory / "epochs.csv",
               ["epoch", "lr", "l_ce", "l_ha", "l_dal", "l_total", "val_auc", "val_f1",
                "val_mcc"],
               [[e.epoch, repr(e.lr), repr(e.train.l_ce), repr(e.train.l_ha),
                 repr(e.train.l_dal), repr(e.train.l_total), repr(e.val.auc), repr(e.val.f1),
                 repr(e.val.mcc)] for e in record.epochs])
    _write_csv(directory / "losses.csv", LossBreakdown.CSV_HEADER,
               [b.csv_row(i) for i, b in enumerate(record.step_losses)])
    if model is not None:
        save_checkpoint(model, directory / "best_checkpoint",
                        {"best_epoch": record.best_epoch, "seed": record.seed})
    if record.test is not None:
        record.test.write_csv(directory / "test_report.csv")
        record.test.write_json(directory / "test_report.json")
    summary = record.summary()
    summary.pop("wall_time")
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return directory


# -- ablation matrix -------------------------------------------------------------------

TABLE_METRICS = ("auc", "f1", "mcc")


@dataclass
class MatrixResult:
    records: Dict[Tuple[str, int], RunRecord]
    failures: Dict[Tuple[str, int], str]
    variants: List[LossWeights]
    seeds: List[int]
    models: Dict[Tuple[str, int], HEGLNet] = field(default_factory=dict, repr=False)

    def runs(self, weights: LossWeights) -> List[RunRecord]:
        return [self.records[(weights.label, s)] for s in self.seeds
                if (weights.label, s) in self.records]

    def aggregate(self) -> List[dict]:
        rows = []
        for w in self.variants:
            runs = self.runs(w)
            row = {"variant": w.label, "alpha": w.alpha, "beta": w.beta, "n_runs": len(runs),
                   "single_run": len(runs) == 1,
                   "failures": sum(1 for (lab, _s) in self.failures if lab == w.label)}
            cols = {}
            for metric in TABLE_METRICS:
                cols[f"{metric}_test"] = [getattr(r.test, metric) for r in runs]
                cols[f"{metric}_gap"] = [getattr(r.gap, f"{metric}_gap") for r in runs]
            for key in ("attn_dice", "attn_similarity"):
                cols[key] = [r.attention[key] for r in runs if key in r.attention]
            for key, values in cols.items():
                row[f"{key}_mean"] = float(np.mean(values)) if values else float("nan")
                row[f"{key}_std"] = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            rows.append(row)
        return rows

    def write_aggregate(self, path) -> None:
        rows = self.aggregate()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def format_table(rows: List[dict]) -> str:
    """Plain-text table in the ``mean±std%`` style, one line per variant."""
    head = f"{'variant':<20}" + "".join(f"{c:>16}" for c in (
        "AUC_test", "AUC_gap", "F1_test", "F1_gap", "MCC_test", "MCC_gap"))
    lines = [head]
    for r in rows:
        cells = []
        for metric in TABLE_METRICS:
            cells.append(f"{100 * r[f'{metric}_test_mean']:.1f}"
                         f"±{100 * r[f'{metric}_test_std']:.1f}%")
            cells.append(f"{100 * r[f'{metric}_gap_mean']:.1f}%")
        lines.append(f"{r['variant']:<20}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines)


def variant_dirname(weights: LossWeights) -> str:
    return f"alpha{weights.alpha:g}_beta{weights.beta:g}"


def run_matrix(pool: Dataset, test_set: Dataset, model_config: ModelConfig,
               base_config: TrainConfig, variants: Sequence[LossWeights] = DEFAULT_VARIANTS,
               seeds: Optional[Sequence[int]] = None, out_dir=None,
               keep_models: bool = False) -> MatrixResult:
    """Train every (variant, seed) cell; ``seed`` drives the split, init and shuffling."""
    seeds = list(base_config.seeds if seeds is None else seeds)
    variants = list(variants)
    if not seeds or not variants:
        raise ValueError("run_matrix: need at least one seed and one variant")
    result = MatrixResult({}, {}, variants, seeds)
    for seed in seeds:
        train_set, val_set = split(pool, base_config.val_fraction, seed)
        for w in variants:
            key = (w.label, seed)
            model = build_model(replace(model_config, seed=seed))
            try:
                record = train(model, train_set, val_set, base_config.with_weights(w), seed,
                               test_set)
            except (NonFiniteLossError, ValueError) as exc:
                log.warning("run %s failed: %s", key, exc)
                result.failures[key] = str(exc)
                continue
            result.records[key] = record
            if keep_models:
                result.models[key] = model
            log.info("run %s seed %d: test auc %.4f dice %.4f sim %.4f (%d epochs, %.0fs)",
                     w.label, seed, record.test.auc, record.attention.get("attn_dice", np.nan),
                     record.attention["attn_similarity"], len(record.epochs), record.wall_time)
            if out_dir is not None:
                save_run(record, model, Path(out_dir) / variant_dirname(w) / f"seed{seed}")
    if out_dir is not None and result.records:
        result.write_aggregate(Path(out_dir) / "aggregate_table.csv")
    return result
