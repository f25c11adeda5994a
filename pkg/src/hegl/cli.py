"""Command-line entry point: ``hegl <command> [--config FILE] [--set key=value ...]``.

Commands: gen-data, train, ablate, noise-sweep, export-attn, gradcheck.

Exit codes: 0 success, 1 usage error, 2 numerical failure. Failures print one
line ``hegl: error exit=<code> kind=<usage|numerical> reason="<text>"`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, fields, replace
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checks import GRAD_TOLERANCE, loss_gradient_suite
from .data import (
    Dataset,
    DatasetSpec,
    generate_synthetic,
    load_manifest,
    save_manifest,
    split,
)
from .metrics import DEFAULT_SIGMAS, noise_sweep, write_sweep_csv
from .model import ModelConfig, build_model, load_checkpoint, upsample_attention
from .tensor import NonFiniteError, save_array
from .trainer import (
    DEFAULT_VARIANTS,
    NonFiniteLossError,
    TrainConfig,
    format_table,
    run_matrix,
    save_run,
    train,
)

OUTPUT_ROOT_ENV = "HEGL_OUTPUT_ROOT"
COMMANDS = ("gen-data", "train", "ablate", "noise-sweep", "export-attn", "gradcheck")

log = logging.getLogger("hegl.cli")


class UsageError(Exception):
    exit_code = 1
    kind = "usage"


class NumericalFailure(Exception):
    exit_code = 2
    kind = "numerical"


# -- configuration ----------------------------------------------------------------------

DATA_EXTRA = {"test_samples": 200, "test_start": 1_000_000, "manifest": None,
              "test_manifest": None}
EVAL_DEFAULTS = {"sigmas": list(DEFAULT_SIGMAS), "noise_seed": 0, "export_samples": 16,
                 "export_upsample": False}


def default_config() -> Dict[str, dict]:
    data = asdict(DatasetSpec())
    data.update(DATA_EXTRA)
    return {"model": asdict(ModelConfig()), "train": asdict(TrainConfig()), "data": data,
            "eval": dict(EVAL_DEFAULTS)}


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise UsageError(f"unknown config key {where}{key}")
        base[key] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(path: Optional[str], overrides: Sequence[str]) -> Dict[str, dict]:
    """Defaults, then the JSON file, then ``section.key=value`` overrides."""
    cfg = default_config()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        for section, values in doc.items():
            if section not in cfg:
                raise UsageError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be an object")
            _merge(cfg[section], values, f"{section}.")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override {item!r} must look like section.key=value")
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}")
        _merge(cfg[section], {name: _parse_value(value)}, f"{section}.")
    return cfg


def build_objects(cfg: Dict[str, dict]):
    """Typed configs from the resolved dictionary; constructor errors are usage errors."""
    try:
        model_cfg = ModelConfig(**cfg["model"]).validate()
        train_cfg = TrainConfig(**cfg["train"]).validate()
        spec_fields = {f.name for f in fields(DatasetSpec)}
        spec = DatasetSpec(**{k: v for k, v in cfg["data"].items() if k in spec_fields})
        if cfg["data"]["manifest"] is None:
            spec.validate()
            if spec.image_size != model_cfg.image_size:
                raise ValueError(f"data.image_size {spec.image_size} != model.image_size "
                                 f"{model_cfg.image_size}")
            if spec.num_classes != model_cfg.num_classes:
                raise ValueError(f"data has {spec.num_classes} classes, model.num_classes is "
                                 f"{model_cfg.num_classes}")
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    return model_cfg, train_cfg, spec


def load_data(cfg: Dict[str, dict], spec: DatasetSpec, model_cfg: ModelConfig):
    """(pool, test) from manifests or the synthetic generator."""
    data = cfg["data"]
    if data["manifest"] is not None:
        if data["test_manifest"] is None:
            raise UsageError("data.manifest needs a matching data.test_manifest")
        try:
            pool, test = load_manifest(data["manifest"]), load_manifest(data["test_manifest"])
        except FileNotFoundError as exc:
            raise UsageError(f"manifest file not found: {exc.filename}")
        if pool.class_names != test.class_names:
            raise UsageError("train and test manifests list different classes")
        if pool.image_size != model_cfg.image_size or pool.num_classes != model_cfg.num_classes:
            raise UsageError(f"manifest data ({pool.image_size}px, {pool.num_classes} classes) "
                             f"does not match the model config")
        return pool, test
    pool = generate_synthetic(spec)
    test = generate_synthetic(replace(spec, n_samples=int(data["test_samples"])),
                              start=int(data["test_start"]))
    return pool, test


# -- run bookkeeping ------------------------------------------------------------------------

def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _open_run_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger("hegl")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _train_one(model_cfg, train_cfg, pool, test, out: Path):
    seed = train_cfg.seeds[0]
    train_set, val_set = split(pool, train_cfg.val_fraction, seed)
    model = build_model(replace(model_cfg, seed=seed))
    record = train(model, train_set, val_set, train_cfg, seed, test)
    save_run(record, model, out / "run")
    log.info("trained seed %d: best epoch %d, test auc %.4f", seed, record.best_epoch,
             record.test.auc)
    return model, record


def _model_for_eval(args, cfg, model_cfg, train_cfg, pool, test, out: Path):
    if args.checkpoint:
        try:
            model, _ = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise UsageError(f"checkpoint not found: {exc.filename}")
        return model
    return _train_one(model_cfg, train_cfg, pool, test, out)[0]


# -- commands -----------------------------------------------------------------------------

def cmd_gen_data(args, cfg, out: Path) -> int:
    model_cfg, _, spec = build_objects(cfg)
    pool, test = load_data(cfg, spec, model_cfg)
    for name, ds in (("pool", pool), ("test", test)):
        path = save_manifest(ds, out / "data" / name)
        log.info("wrote %d samples to %s", len(ds), path)
        print(f"{name}: {len(ds)} samples -> {path}")
    return 0


def cmd_train(args, cfg, out: Path) -> int:
    model_cfg, train_cfg, spec = build_objects(cfg)
    pool, test = load_data(cfg, spec, model_cfg)
    _, record = _train_one(model_cfg, train_cfg, pool, test, out)
    print(json.dumps({k: v for k, v in record.summary().items() if k != "wall_time"},
                     sort_keys=True))
    return 0


def cmd_ablate(args, cfg, out: Path) -> int:
    model_cfg, train_cfg, spec = build_objects(cfg)
    pool, test = load_data(cfg, spec, model_cfg)
    result = run_matrix(pool, test, model_cfg, train_cfg, DEFAULT_VARIANTS, train_cfg.seeds,
                        out_dir=out)
    if not result.records:
        raise NumericalFailure("every ablation run failed: " + "; ".join(result.failures.values()))
    print(format_table(result.aggregate()))
    for key, reason in result.failures.items():
        print(f"failed {key[0]} seed {key[1]}: {reason}", file=sys.stderr)
    return 0


def cmd_noise_sweep(args, cfg, out: Path) -> int:
    model_cfg, train_cfg, spec = build_objects(cfg)
    pool, test = load_data(cfg, spec, model_cfg)
    sigmas = [float(s) for s in cfg["eval"]["sigmas"]]
    if not sigmas or min(sigmas) < 0:
        raise UsageError("eval.sigmas must be a non-empty list of values >= 0")
    model = _model_for_eval(args, cfg, model_cfg, train_cfg, pool, test, out)
    rows = noise_sweep(model, test, sigmas, int(cfg["eval"]["noise_seed"]),
                       train_cfg.threshold)
    write_sweep_csv(rows, out / "noise_sweep.csv")
    for sigma, rep in rows:
        print(f"sigma={sigma:g} auc={rep.auc:.4f} f1={rep.f1:.4f} mcc={rep.mcc:.4f}")
    return 0


def export_attention(model, dataset: Dataset, out: Path, upsample: bool = False) -> List[dict]:
    """One ``.f64`` map plus JSON sidecar per (sample, class)."""
    _, attention = model.predict_logits(dataset.images)
    grid = model.config.grid
    index = []
    for i, sid in enumerate(dataset.ids):
        for k, name in enumerate(dataset.class_names):
            values = attention[i, k]
            if upsample:
                values = upsample_attention(values, dataset.image_size)
            path = out / sid / name
            path.parent.mkdir(parents=True, exist_ok=True)
            meta = {"sample_id": sid, "class_name": name, "class_index": k,
                    "label": int(dataset.labels[i, k]), "normalization": "softmax-over-patches",
                    "grid": grid, "resolution": "pixel" if upsample else "grid"}
            save_array(path, values, meta)
            index.append({**meta, "file": f"{sid}/{name}.f64"})
    (out / "index.json").write_text(json.dumps(index, indent=1))
    return index


def cmd_export_attn(args, cfg, out: Path) -> int:
    model_cfg, train_cfg, spec = build_objects(cfg)
    pool, test = load_data(cfg, spec, model_cfg)
    model = _model_for_eval(args, cfg, model_cfg, train_cfg, pool, test, out)
    n = min(int(cfg["eval"]["export_samples"]), len(test))
    index = export_attention(model, test.subset(range(n)), out / "attention",
                             bool(cfg["eval"]["export_upsample"]))
    print(f"exported {len(index)} maps to {out / 'attention'}")
    return 0


def cmd_gradcheck(args, cfg, out: Path) -> int:
    errors = loss_gradient_suite(args.cases, args.seed)
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write("loss,max_rel_error,tolerance,passed\n")
        for name, err in errors.items():
            fh.write(f"{name},{err!r},{GRAD_TOLERANCE!r},{err <= GRAD_TOLERANCE}\n")
    for name, err in errors.items():
        print(f"{name:<16} max_rel_error={err:.3e} {'ok' if err <= GRAD_TOLERANCE else 'FAIL'}")
    failed = [n for n, e in errors.items() if not e <= GRAD_TOLERANCE]
    if failed:
        raise NumericalFailure(f"gradient check failed for {','.join(failed)}")
    return 0


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "ablate": cmd_ablate,
            "noise-sweep": cmd_noise_sweep, "export-attn": cmd_export_attn,
            "gradcheck": cmd_gradcheck}


# -- argument parsing -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hegl", description="Explanation-guided training on a desk-scale ViT.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with model/train/data/eval sections")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/{name})")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override one config value")
        if name in ("noise-sweep", "export-attn"):
            p.add_argument("--checkpoint", help="trained checkpoint directory; trains one if absent")
        if name == "gradcheck":
            p.add_argument("--cases", type=int, default=100, help="random inputs per loss")
            p.add_argument("--seed", type=int, default=0)
    return parser


def _fail(exc: Exception, code: int, kind: str) -> int:
    reason = " ".join(str(exc).split()).replace('"', "'")
    print(f'hegl: error exit={code} kind={kind} reason="{reason}"', file=sys.stderr)
    log.error("exit %d (%s): %s", code, kind, reason)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    handler = None
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args.config, args.overrides)
        out = Path(args.out) if args.out else Path(
            os.environ.get(OUTPUT_ROOT_ENV, "runs")) / args.command
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        handler = _open_run_log(out)
        log.info("command=%s seeds=%s data_seed=%s", args.command, cfg["train"]["seeds"],
                 cfg["data"]["seed"])
        log.info("versions: hegl=%s python=%s numpy=%s", _version(), platform.python_version(),
                 np.__version__)
        started = time.perf_counter()
        code = HANDLERS[args.command](args, cfg, out)
        log.info("finished in %.1fs", time.perf_counter() - started)
        return code
    except UsageError as exc:
        return _fail(exc, 1, "usage")
    except (NumericalFailure, NonFiniteLossError, NonFiniteError, FloatingPointError) as exc:
        return _fail(exc, 2, "numerical")
    except (ValueError, KeyError, OSError) as exc:
        return _fail(exc, 1, "usage")
    finally:
        if handler is not None:
            logging.getLogger("hegl").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
