"""``atomtune`` command-line interface.

Exit codes: 0 success, 1 validation error, 2 runtime or numeric error, 3 verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .accounting import (METHOD_LABELS, REFERENCE_TABLE, AccountingError, LayerSpec, comparison_table,
                         model_report, reference_table, param_count)
from .data import TASKS, Dataset, gen_synthetic
from .finetune.model import build_demo_cnn, reinit_head
from .finetune.schemes import (DecomposeOptions, SchemeError, TuningScheme, decompose_model,
                               freeze_partition, prepare_model)
from .finetune.train import TrainConfig, TrainingError, evaluate, train
from .layers import FrozenParameterError
from .manifest import DECOMPOSED_KINDS, ManifestError, load_model, record_reference_digests, save_model
from .sparse_coding import SparseCodingConfig, SparseCodingError
from .tensor import ShapeError
from .verify import infer_scheme, verify_checkpoint

log = logging.getLogger("atomtune")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class ValidationError(ValueError):
    pass


class VerificationFailed(RuntimeError):
    pass


# RunConfig keys accepted in --config files, mapped to argument names.
CONFIG_KEYS = {
    "scheme": "scheme", "seed": "seed", "threads": "threads",
    "m": "m", "lam": "lam", "lambda": "lam", "m1": "m1", "m_1": "m1",
    "k_c": "k_out", "k_out": "k_out", "k_c_in": "k_in", "k_in": "k_in", "m_c": "m_c",
    "K": "max_outer", "max_outer": "max_outer", "max_ista": "max_ista", "tol": "tol",
    "linear": "linear",
    "learning_rate": "lr", "lr": "lr", "weight_decay": "weight_decay", "epochs": "epochs",
    "batch_size": "batch_size", "optimizer": "optimizer", "schedule": "schedule",
    "warmup_epochs": "warmup_epochs", "tune_bias": "tune_bias", "tune_norm": "tune_norm",
    "eval_every": "eval_every", "reinit_head": "reinit_head", "count_faithful": "count_faithful",
    "model": "model", "data": "data", "eval_data": "eval_data", "out": "out",
}
CONFIG_SECTIONS = ("decomposition", "train", "paths")

DEFAULTS: dict[str, Any] = {
    "seed": 0, "threads": 1,
    "m": 9, "lam": None, "m1": 3, "k_out": 4, "k_in": 4, "m_c": 9,
    "max_outer": 50, "max_ista": 100, "tol": 1e-6, "linear": True,
    "lr": 1e-3, "weight_decay": 1e-4, "epochs": 10, "batch_size": 64, "optimizer": "adam",
    "schedule": "constant", "warmup_epochs": 0, "tune_bias": False, "tune_norm": False,
    "eval_every": 1, "reinit_head": False, "count_faithful": True,
}


def load_config(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from e
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    flat: dict[str, Any] = {}
    for key, value in raw.items():
        if key in CONFIG_SECTIONS and isinstance(value, dict):
            items = value.items()
        else:
            items = [(key, value)]
        for k, v in items:
            if k not in CONFIG_KEYS:
                raise ValidationError(f"unknown config key {k!r}")
            flat[CONFIG_KEYS[k]] = v
    return flat


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from the config file, ATOMTUNE_SEED and the defaults."""
    cfg = load_config(getattr(args, "config", None))
    env_seed = os.environ.get("ATOMTUNE_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError as e:
            raise ValidationError(f"ATOMTUNE_SEED must be an integer, got {env_seed!r}") from e
    for key, default in DEFAULTS.items():
        if getattr(args, key, None) is None and key in vars(args):
            setattr(args, key, cfg.get(key, default))
    for key in ("scheme", "model", "data", "eval_data", "out"):
        if key in vars(args) and getattr(args, key) is None and key in cfg:
            setattr(args, key, cfg[key])
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")
    return args


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise ValidationError("missing required option(s): " + ", ".join("--" + n.replace("_", "-")
                                                                        for n in missing))


def _sparse_cfg(args) -> SparseCodingConfig:
    if args.m < 1 or args.m_c < 1:
        raise ValidationError("m and m_c must be positive")
    if args.lam is not None and args.lam < 0:
        raise ValidationError("lambda must be >= 0")
    try:
        return SparseCodingConfig(lam=args.lam, max_outer=args.max_outer, max_ista=args.max_ista,
                                  tol=args.tol)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def _train_cfg(args) -> TrainConfig:
    try:
        return TrainConfig(learning_rate=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
                           batch_size=args.batch_size, seed=args.seed, optimizer=args.optimizer,
                           schedule=args.schedule, warmup_epochs=args.warmup_epochs,
                           tune_bias=args.tune_bias, tune_norm=args.tune_norm,
                           eval_every=args.eval_every)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def _scheme(text: str) -> TuningScheme:
    try:
        return TuningScheme.parse(text)
    except ValueError as e:
        raise ValidationError(str(e)) from e


def _load_dataset(path) -> Dataset:
    try:
        return Dataset.load(path)
    except (OSError, KeyError, ValueError) as e:
        raise ValidationError(f"cannot load dataset {path}: {e}") from e


def _companion(out: Path, suffix: str) -> Path:
    return out.with_name(out.stem + suffix)


# --- subcommands ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _require(args, "task", "n", "out")
    try:
        ds = gen_synthetic(args.task, args.seed, args.n)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    ds.save(args.out)
    print(json.dumps({"task": args.task, "n": len(ds), "seed": args.seed, "out": str(args.out)},
                     sort_keys=True))
    return EXIT_OK


def cmd_init_model(args) -> int:
    _require(args, "out")
    model = build_demo_cnn(args.seed, num_classes=args.num_classes)
    meta: dict[str, Any] = {"architecture": "demo-cnn", "init_seed": args.seed}
    if args.data is not None:
        data = _load_dataset(args.data)
        cfg = _train_cfg(args)
        hist = train(model, data, TuningScheme.parse("full"), cfg)
        meta["pretrain"] = {"data": data.name, "epochs": cfg.epochs, "lr": cfg.learning_rate,
                            "train_accuracy": hist.final.train_accuracy}
    save_model(model, args.out, meta)
    print(json.dumps({"out": str(args.out), "params": model.num_params()}, sort_keys=True))
    return EXIT_OK


def cmd_decompose(args) -> int:
    _require(args, "model", "out")
    sparse = _sparse_cfg(args)
    model, meta = load_model(args.model)
    opts = DecomposeOptions(m=args.m, m_c=args.m_c, k_in=args.k_in, k_out=args.k_out,
                            linear=bool(args.linear), sparse=sparse)
    out_model, reports, notes = decompose_model(model, opts, seed=args.seed)
    if not reports and any(l.kind in DECOMPOSED_KINDS for _, l in model):
        log.warning("input is already decomposed; nothing to do")
    for name in reports:
        record_reference_digests(out_model[name])
        out_model[name].annotations["decomposition"] = {
            "final_error": reports[name]["final_error"], "lam": reports[name]["lam"],
            "m": reports[name]["m"]}
    meta = dict(meta)
    meta["decomposition"] = {"m": args.m, "m_c": args.m_c, "k_in": args.k_in, "k_out": args.k_out,
                             "lam": args.lam, "max_outer": args.max_outer, "max_ista": args.max_ista,
                             "tol": args.tol, "seed": args.seed}
    out = Path(args.out)
    save_model(out_model, out, meta)
    conv_errs = [r["final_error"] for r in reports.values() if r["kind"] == "conv"]
    summary = {"layers": {n: {"kind": r["kind"], "final_error": r["final_error"]}
                          for n, r in reports.items()},
               "mean_conv_error": float(np.mean(conv_errs)) if conv_errs else None,
               "notes": notes}
    rpath = Path(args.reports) if args.reports else _companion(out, ".reports.json")
    rpath.write_text(json.dumps({"summary": summary, "reports": reports}, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_finetune(args) -> int:
    _require(args, "model", "data", "out", "scheme")
    scheme = _scheme(args.scheme)
    cfg = _train_cfg(args)
    data = _load_dataset(args.data)
    eval_data = _load_dataset(args.eval_data) if args.eval_data else None
    model, meta = load_model(args.model)
    model = prepare_model(model, scheme, m1=args.m1, count_faithful=bool(args.count_faithful),
                          seed=args.seed)
    if args.reinit_head:
        reinit_head(model, num_classes=data.num_classes, seed=args.seed)
    if model.head.params["weight"].shape[-1] != data.num_classes:
        raise ValidationError(f"head has {model.head.params['weight'].shape[-1]} outputs but the "
                              f"dataset has {data.num_classes} classes (use --reinit-head)")
    freeze_partition(model, scheme, cfg.tune_bias, cfg.tune_norm)
    before = model.snapshot()
    tunable_keys = set(model.tunable())

    out = Path(args.out)
    best_path = _companion(out, ".best.json")
    out_meta = {k: v for k, v in meta.items() if k not in ("optimizer", "train", "best")}
    out_meta.update({"scheme": str(scheme), "tune_bias": cfg.tune_bias, "tune_norm": cfg.tune_norm,
                     "train": {k: v for k, v in asdict(cfg).items()
                               if k not in ("tune_bias", "tune_norm")},
                     "optimizer": {"name": cfg.optimizer, "betas": [0.9, 0.999], "eps": 1e-8}})
    best = {"score": -1.0}

    def on_epoch(rec, m):
        score = rec.eval_accuracy if rec.eval_accuracy is not None else rec.train_accuracy
        if eval_data is not None and rec.eval_accuracy is None:
            return
        if score > best["score"]:
            best["score"] = score
            save_model(m, best_path, {**out_meta, "best": {"epoch": rec.epoch, "score": score}})

    history = train(model, data, scheme, cfg, eval_data=eval_data, on_epoch=on_epoch)
    changed = [f"{n}.{p}" for (n, p), arr in model.frozen().items()
               if (n, p) not in tunable_keys and not np.array_equal(arr, before[(n, p)])]
    if changed:
        raise VerificationFailed(f"frozen tensors changed during training: {changed}")
    save_model(model, out, out_meta)
    _companion(out, ".history.jsonl").write_text(history.to_jsonl())
    final = history.final
    print(json.dumps({"out": str(out), "best": str(best_path), "scheme": str(scheme),
                      "tunable": history.partition.total, "final": asdict(final)}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    _require(args, "model", "data")
    model, _ = load_model(args.model)
    data = _load_dataset(args.data)
    acc, loss = evaluate(model, data)
    print(json.dumps({"accuracy": acc, "loss": loss, "n": len(data)}, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    _require(args, "model")
    report = verify_checkpoint(args.model)
    for w in report.warnings:
        log.warning(w)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.json else report.text())
    if not report.passed:
        raise VerificationFailed("; ".join(f"{c.name} ({c.detail})" for c in report.checks
                                           if not c.passed))
    return EXIT_OK


def _methods(text: Optional[str]) -> list[str]:
    known = [m for m in METHOD_LABELS]
    if text is None:
        return known
    methods = [m.strip() for m in text.split(",") if m.strip()]
    if not methods:
        raise ValidationError("empty method list; usage: --methods "
                              + ",".join(known))
    bad = [m for m in methods if m not in known]
    if bad:
        raise ValidationError(f"unknown method(s) {bad}; choose from {', '.join(known)}")
    return methods


def _parse_layer_spec(text: str, args) -> LayerSpec:
    parts = text.split(":")
    if len(parts) not in (3, 4):
        raise ValidationError("--layer takes kind:c_in:c_out[:k], e.g. conv:640:640:3")
    try:
        kind, c_in, c_out = parts[0], int(parts[1]), int(parts[2])
        k = int(parts[3]) if len(parts) == 4 else (3 if kind == "conv" else 1)
        return LayerSpec(kind, c_in, c_out, k, r=args.r, m=args.m, m1=args.m1, k_c=args.k_out,
                         k_c_in=args.k_in, m_c=args.m_c)
    except (ValueError, AccountingError) as e:
        raise ValidationError(str(e)) from e


def cmd_account(args) -> int:
    methods = _methods(args.methods)
    if args.reference_sizes:
        got = reference_table()
        rows, bad = [], []
        for key, printed in REFERENCE_TABLE.items():
            ok = got[key] == printed
            rows.append({"layer": key[0], "method": key[1], "formula": got[key], "printed": printed,
                         "match": ok})
            if not ok:
                bad.append(f"{key[0]}/{key[1]}: formula {got[key]:,} vs printed {printed:,}")
        if args.json:
            print(json.dumps(rows, indent=2, sort_keys=True))
        else:
            for r in rows:
                flag = "ok" if r["match"] else "MISMATCH"
                print(f"{r['layer']:<10} {METHOD_LABELS[r['method']]:<16} {r['formula']:>12,} "
                      f"{r['printed']:>12,}  {flag}")
        if bad:
            raise VerificationFailed("; ".join(bad))
        return EXIT_OK
    if args.layer:
        spec = _parse_layer_spec(args.layer, args)
        rows = []
        for meth in methods:
            if meth == "ours_d_dc":
                continue
            try:
                rows.append((meth, param_count(spec, meth)))
            except AccountingError as e:
                raise ValidationError(f"{meth}: {e}") from e
        if args.json:
            print(json.dumps({m: n for m, n in rows}, indent=2, sort_keys=True))
        else:
            for m, n in rows:
                print(f"{METHOD_LABELS[m]:<16} {n:>12,}")
        return EXIT_OK
    if not args.model:
        raise ValidationError("account needs a checkpoint, --layer, or --paper-sizes")
    model, meta = load_model(args.model)
    scheme = _scheme(args.scheme) if args.scheme else (
        TuningScheme.parse(meta["scheme"]) if "scheme" in meta else infer_scheme(model))
    tb = bool(args.tune_bias) or bool(meta.get("tune_bias", False))
    tn = bool(args.tune_norm) or bool(meta.get("tune_norm", False))
    probe = prepare_model(model, scheme, m1=args.m1)
    report = model_report(probe, scheme, tb, tn, compare=False)
    report.comparison = [(m, n) for m, n in comparison_table(probe, r=args.r or 8, m=args.m,
                                                              m1=args.m1, k_c=args.k_out)
                         if m in methods]
    print(report.to_json() if args.json else report.table())
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors (exit 1), not runtime failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="atomtune", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"atomtune {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run config; explicit flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads (default 1, reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def decomp_flags(sp):
        sp.add_argument("--m", type=int, help="atoms per conv layer")
        sp.add_argument("--lam", "--lambda", dest="lam", type=float, help="L1 weight")
        sp.add_argument("--m-c", dest="m_c", type=int, help="Kronecker atoms per linear layer")
        sp.add_argument("--k-in", dest="k_in", type=int, help="Kronecker block rows")
        sp.add_argument("--k-out", "--k-c", dest="k_out", type=int, help="Kronecker block columns")
        sp.add_argument("--max-outer", dest="max_outer", type=int)
        sp.add_argument("--max-ista", dest="max_ista", type=int)
        sp.add_argument("--tol", type=float)
        sp.add_argument("--no-linear", dest="linear", action="store_false", default=None,
                        help="leave 1x1 convs and linear layers dense")

    def train_flags(sp):
        sp.add_argument("--lr", type=float)
        sp.add_argument("--weight-decay", dest="weight_decay", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--optimizer", choices=("adam", "adamw"))
        sp.add_argument("--schedule", choices=("constant", "cosine"))
        sp.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
        sp.add_argument("--eval-every", dest="eval_every", type=int)
        sp.add_argument("--tune-bias", dest="tune_bias", action="store_true", default=None)
        sp.add_argument("--tune-norm", dest="tune_norm", action="store_true", default=None)

    g = sub.add_parser("gen-data", parents=[common], help="render a synthetic shapes dataset")
    g.add_argument("--task", choices=TASKS)
    g.add_argument("--n", type=int)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    i = sub.add_parser("init-model", parents=[common], help="create (and optionally pretrain) the demo CNN")
    i.add_argument("--out")
    i.add_argument("--num-classes", dest="num_classes", type=int, default=10)
    i.add_argument("--data", help="dataset directory to pretrain on (all parameters trained)")
    train_flags(i)
    i.set_defaults(func=cmd_init_model)

    d = sub.add_parser("decompose", parents=[common], help="sparse-code dense layers into atoms")
    d.add_argument("model", nargs="?")
    d.add_argument("--out")
    d.add_argument("--reports", help="where to write per-layer reports (default <out>.reports.json)")
    decomp_flags(d)
    d.set_defaults(func=cmd_decompose)

    f = sub.add_parser("finetune", parents=[common], help="fine-tune a checkpoint under a scheme")
    f.add_argument("model", nargs="?")
    f.add_argument("--data")
    f.add_argument("--eval-data", dest="eval_data")
    f.add_argument("--out")
    f.add_argument("--scheme", help="linear-probe | atoms-only | atoms-plus-linear | "
                                    "overcomplete-plus-linear | lora:<r> | full")
    f.add_argument("--m1", type=int, help="sub-atoms per atom for overcomplete-plus-linear")
    f.add_argument("--compact-beta", dest="count_faithful", action="store_false", default=None,
                   help="share beta across input channels")
    f.add_argument("--reinit-head", dest="reinit_head", action="store_true", default=None)
    train_flags(f)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", parents=[common], help="accuracy and loss on a dataset")
    e.add_argument("model", nargs="?")
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run the self-consistency checks")
    v.add_argument("model", nargs="?")
    v.add_argument("--json", action="store_true")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("account", parents=[common], help="tunable-parameter accounting")
    a.add_argument("model", nargs="?")
    a.add_argument("--paper-sizes", dest="reference_sizes", action="store_true",
                   help="evaluate the reference sizes and compare with the published counts")
    a.add_argument("--layer", help="single layer kind:c_in:c_out[:k] instead of a checkpoint")
    a.add_argument("--methods", help="comma-separated subset of " + ",".join(METHOD_LABELS))
    a.add_argument("--scheme")
    a.add_argument("--r", type=int, default=None)
    a.add_argument("--m", type=int)
    a.add_argument("--m1", type=int)
    a.add_argument("--m-c", dest="m_c", type=int)
    a.add_argument("--k-in", dest="k_in", type=int)
    a.add_argument("--k-out", "--k-c", dest="k_out", type=int)
    a.add_argument("--tune-bias", dest="tune_bias", action="store_true", default=None)
    a.add_argument("--tune-norm", dest="tune_norm", action="store_true", default=None)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_account)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help, --version and usage errors
        return e.code or 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        resolve(args)
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except VerificationFailed as e:
        log.error("verification failed: %s", e)
        return EXIT_VERIFY
    except (ValidationError, ManifestError, SchemeError, AccountingError, ShapeError,
            FrozenParameterError, FileNotFoundError, ValueError) as e:
        log.error("%s", e)
        return EXIT_INVALID
    except (TrainingError, SparseCodingError, FloatingPointError, ArithmeticError, RuntimeError,
            OSError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
