"""Command line: simulate, train, cv, evaluate, predict, bench.

Exit codes: 0 success, 2 usage, 3 data error, 4 training failure. Errors are
reported as one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .data import kfold_split, cv_rounds, load_csv, save_csv, simulate_toy, TOY_KINDS
from .errors import DataError, InputError, MonosurvError, UsageError
from .network import load_model, predict_curve, save_model
from .timing import benchmark
from .training import HyperParams, evaluate_model, hyper_search, load_grid, train_model, _seeds

log = logging.getLogger("monosurv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, doc):
    _atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _manifest(args, path, outputs, started, **extra):
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {
        "command": args.command,
        "flags": flags,
        "seed": flags.get("seed"),
        "outputs": outputs,
        "tool": "monosurv",
        "version": __version__,
        "started_utc": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_seconds": time.time() - started,
    }
    doc.update(extra)
    _write_json(path, doc)


def parse_times(text: str) -> np.ndarray:
    """``start:stop:count`` inclusive of both ends."""
    parts = text.split(":")
    try:
        if len(parts) != 3:
            raise ValueError
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise UsageError(f"malformed time grid {text!r}; expected start:stop:count") from None
    if count < 1 or stop < start:
        raise UsageError(f"malformed time grid {text!r}")
    return np.linspace(start, stop, count)


def parse_floats(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")], dtype=np.float64)
    except ValueError:
        bad = next(v for v in text.split(",") if not _is_float(v))
        raise UsageError(f"malformed numeric list: bad token {bad!r}") from None


def _is_float(v):
    try:
        float(v)
        return True
    except ValueError:
        return False


def _require(path):
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    return path


def _load(path, args):
    return load_csv(_require(path), args.duration_col, args.event_col)


# -- subcommands -------------------------------------------------------------

def cmd_simulate(args):
    started = time.time()
    data = simulate_toy(args.kind, args.n, args.seed)
    save_csv(data, args.out)
    _manifest(args, f"{args.out}.manifest.json", [args.out], started,
              censoring_proportion=data.censoring_proportion())
    return 0


def _hyperparams(args) -> HyperParams:
    doc = {}
    if args.config:
        try:
            with open(_require(args.config)) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"malformed config {args.config}: {exc}") from None
    if args.head:
        doc["head"] = args.head
    return HyperParams.from_dict(doc)


def cmd_train(args):
    started = time.time()
    data = _load(args.data, args)
    if args.val:
        train, val = data, _load(args.val, args)
    else:
        # hold out 20% for early stopping, seeded from the run seed
        perm = np.random.default_rng(_seeds(args.seed, 2)[1]).permutation(len(data))
        cut = max(1, len(data) // 5)
        train, val = data.subset(np.sort(perm[cut:])), data.subset(np.sort(perm[:cut]))
    hp = _hyperparams(args)
    params, report = train_model(None, hp, train, val, args.seed, args.max_epochs, args.patience)
    save_model(params, args.out_model)
    report_path = f"{args.out_model}.report.json"
    _write_json(report_path, {"hyperparams": hp.to_dict(), **report.to_dict()})
    _manifest(args, f"{args.out_model}.manifest.json", [args.out_model, report_path], started)
    return 0


def _summary(reports):
    out = {}
    for key in ("c_td", "ibs", "ibll", "test_nll"):
        vals = np.array([r[key] for r in reports if r.get(key) is not None], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()) if vals.size else None,
                    "sd": float(vals.std(ddof=1)) if vals.size > 1 else None,
                    "n": int(vals.size)}
    return out


def cmd_cv(args):
    started = time.time()
    data = _load(args.data, args)
    grid = load_grid(args.grid if args.grid in ("small", "large") else _require(args.grid))
    split_seed, *round_seeds = _seeds(args.seed, args.folds + 1)
    folds = kfold_split(len(data), args.folds, split_seed)
    os.makedirs(args.out_dir, exist_ok=True)
    reports, outputs = [], []
    for r, (tr_idx, va_idx, te_idx) in enumerate(cv_rounds(folds)):
        fold_dir = os.path.join(args.out_dir, f"fold_{r}")
        os.makedirs(fold_dir, exist_ok=True)
        train, val, test = data.subset(tr_idx), data.subset(va_idx), data.subset(te_idx)
        search = hyper_search(grid, args.budget, train, val, round_seeds[r], args.workers,
                              args.max_epochs, args.patience)
        metrics = evaluate_model(search.best_params, test, args.grid_size)
        paths = {name: os.path.join(fold_dir, name)
                 for name in ("model.json", "test.csv", "report.json", "trials.json")}
        save_model(search.best_params, paths["model.json"])
        save_csv(test, paths["test.csv"])
        report = metrics.to_dict()
        report.update(fold=r, best_trial=search.best_index, hyperparams=search.best.to_dict())
        _write_json(paths["report.json"], report)
        _write_json(paths["trials.json"], [t.to_dict() for t in search.trials])
        reports.append(report)
        outputs.extend(paths.values())
        log.info("fold %d: c_td=%s ibs=%.4f ibll=%.4f", r, report["c_td"], report["ibs"], report["ibll"])
    summary_path = os.path.join(args.out_dir, "summary.json")
    _write_json(summary_path, {"folds": reports, "summary": _summary(reports)})
    outputs.append(summary_path)
    _manifest(args, os.path.join(args.out_dir, "manifest.json"), outputs, started)
    return 0


def cmd_evaluate(args):
    started = time.time()
    params = load_model(_require(args.model))
    data = _load(args.data, args)
    report = evaluate_model(params, data, args.grid_size, args.ties)
    _write_json(args.out_report, report.to_dict())
    _manifest(args, f"{args.out_report}.manifest.json", [args.out_report], started)
    return 0


def cmd_predict(args):
    started = time.time()
    params = load_model(_require(args.model))
    x = parse_floats(args.x)
    times = parse_times(args.times)
    if x.size != params.config.covariate_dim:
        raise InputError(f"model expects {params.config.covariate_dim} covariates, got {x.size}")
    surv = predict_curve(params, x, times)
    lines = ["time,survival"] + [f"{t!r},{s!r}" for t, s in zip(times.tolist(), surv.tolist())]
    _atomic_write_text(args.out, "\n".join(lines) + "\n")
    _manifest(args, f"{args.out}.manifest.json", [args.out], started)
    return 0


def cmd_bench(args):
    started = time.time()
    params = load_model(_require(args.model))
    data = _load(args.data, args)
    rng = np.random.default_rng(args.seed)
    rows = rng.integers(len(data), size=args.queries)
    t = rng.uniform(0.0, float(data.durations.max()), size=args.queries)
    result = benchmark(params, data.covariates[rows], t, args.points, args.reps, args.chunk)
    result["head"] = params.config.head
    print(json.dumps(result, sort_keys=True))
    outputs = []
    if args.out:
        _write_json(args.out, result)
        outputs.append(args.out)
        _manifest(args, f"{args.out}.manifest.json", outputs, started)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="monosurv", description="Monotone neural survival models on right-censored data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_cols(sp):
        sp.add_argument("--duration-col", default="duration")
        sp.add_argument("--event-col", default="event")

    def training_limits(sp):
        sp.add_argument("--max-epochs", type=int, default=200)
        sp.add_argument("--patience", type=int, default=10)

    sp = sub.add_parser("simulate", help="write a toy dataset as CSV")
    sp.add_argument("--kind", choices=TOY_KINDS, required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train", help="train one model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--config", help="JSON document of hyperparameters")
    sp.add_argument("--head", choices=("survival", "hazard"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-model", required=True)
    data_cols(sp)
    training_limits(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("cv", help="5-fold protocol with random hyperparameter search")
    sp.add_argument("--data", required=True)
    sp.add_argument("--grid", default="small", help="'small', 'large' or a JSON grid file")
    sp.add_argument("--budget", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--grid-size", type=int, default=100)
    data_cols(sp)
    training_limits(sp)
    sp.set_defaults(func=cmd_cv)

    sp = sub.add_parser("evaluate", help="c_td, IBS, IBLL and test NLL")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--grid-size", type=int, default=100)
    sp.add_argument("--ties", choices=("strict", "half"), default="strict")
    sp.add_argument("--out-report", required=True)
    data_cols(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("predict", help="survival curve for one covariate vector")
    sp.add_argument("--model", required=True)
    sp.add_argument("--x", required=True, help="comma-separated covariates in original units")
    sp.add_argument("--times", required=True, help="start:stop:count, both ends included")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("bench", help="forward-pass prediction vs hazard integration")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--queries", type=int, default=10_000)
    sp.add_argument("--points", type=int, default=1000)
    sp.add_argument("--chunk", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    data_cols(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def _error_kind(exc):
    if isinstance(exc, UsageError):
        return "usage"
    if isinstance(exc, (DataError, InputError)):
        return "data"
    return "training" if exc.exit_code == 4 else "error"


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except MonosurvError as exc:
        print(json.dumps({"error": _error_kind(exc), "code": exc.exit_code, "message": str(exc)}),
              file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": "data", "code": 3, "message": str(exc)}), file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch())
