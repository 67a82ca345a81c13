"""Command-line driver: train-base, calibrate, search, eval-scheme, bench, export."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# -- shared setup -----------------------------------------------------------

def _load_config(args):
    from . import config
    cfg = config.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise config.ConfigError("--workers must be >= 1")
        cfg.search.workers = args.workers
    return cfg


def _graph(cfg):
    from .ir import desk_model
    try:
        return desk_model(cfg.model.channels, cfg.model.strides, in_channels=cfg.data.channels,
                          image_size=cfg.data.image_size, num_classes=cfg.data.num_classes)
    except ValueError as exc:
        from .config import ConfigError
        raise ConfigError(f"model: {exc}") from None


def _dataset(cfg):
    from .trainer import synthetic_dataset
    d = cfg.data
    return synthetic_dataset(d.n_train, d.n_test, d.num_classes, d.image_size, d.channels,
                             d.noise, d.val_fraction, seed=cfg.seed)


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CliError(EXIT_RUNTIME, f"missing {path}; run '{hint}' first")
    return path


def _real_pipeline(cfg, graph):
    """Base weights, data and cost model for measured evaluations."""
    from .ir import load_weights
    from .latency import CostModel
    weights = load_weights(_require(cfg.base_weights_path, "train-base"))
    cm = CostModel.load(_require(cfg.cost_model_path, "calibrate"))
    return weights, _dataset(cfg), cm


def _base_record(graph, weights, data, cm, ctrl_cfg):
    from . import space
    from .controller import compute_reward
    from .latency import estimate
    from .trainer import EvalRecord, evaluate
    acc, _ = evaluate(graph, weights, data.test)
    t = estimate(graph, None, {}, cm).total
    ident = space.identity_scheme(graph)
    return EvalRecord(ident.to_dict(), acc, t, compute_reward(acc, t, ctrl_cfg).value)


# -- commands ---------------------------------------------------------------

def cmd_train_base(args) -> int:
    import torch
    from .ir import save_weights
    from .trainer import evaluate, train_base
    cfg = _load_config(args)
    torch.set_num_threads(cfg.train.threads)
    graph, data = _graph(cfg), _dataset(cfg)
    weights, history = train_base(graph, data, cfg.train, seed=cfg.seed)
    acc, loss = evaluate(graph, weights, data.test)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_weights(cfg.base_weights_path, weights)
    _emit({"command": "train-base", "test_accuracy": acc, "test_loss": loss,
           "epochs": len(history), "weights": str(cfg.base_weights_path)})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .latency.calibration import SweepConfig, run_calibration
    cfg = _load_config(args)

    def progress(i, n):
        if args.verbose and (i % 50 == 0 or i == n):
            print(f"calibrate: {i}/{n}", file=sys.stderr)

    cm, samples = run_calibration(SweepConfig(reps=cfg.latency.reps, seed=cfg.seed),
                                  holdout=cfg.latency.holdout, progress=progress)
    cfg.out.mkdir(parents=True, exist_ok=True)
    cm.save(cfg.cost_model_path)
    _emit({"command": "calibrate", "samples": len(samples), "r2": cm.r2,
           "arms": len(cm.arms), "uncalibrated": sorted(cm.uncalibrated),
           "cost_model": str(cfg.cost_model_path)})
    return EXIT_OK


def cmd_search(args) -> int:
    import torch
    from . import search as S
    from .ir import save_weights
    cfg = _load_config(args)
    graph = _graph(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    header = {"mode": "synthetic" if args.synthetic else "measured", **cfg.to_dict()}
    scfg = cfg.search
    finalize = None
    if args.synthetic:
        ev = S.SyntheticEvaluator(graph, cfg.controller, cfg.synthetic.base_accuracy,
                                  cfg.synthetic.dense_ms)
        from . import space
        base = ev(space.identity_scheme(graph)).record
        evaluate = ev
    else:
        from .trainer import evaluate_scheme, train
        torch.set_num_threads(cfg.train.threads)
        weights, data, cm = _real_pipeline(cfg, graph)
        base = _base_record(graph, weights, data, cm, cfg.controller)

        def evaluate(s):
            return evaluate_scheme(s, weights, graph, data, cfg.train, cm, cfg.controller)

        def finalize(out):
            if out.weights is None or cfg.train.final_epochs == 0:
                return out
            from dataclasses import replace
            from .controller import compute_reward
            from .trainer import evaluate as acc_of
            w, _ = train(out.graph, out.weights, data, cfg.train, cfg.train.final_epochs,
                         masks=out.masks)
            acc, _ = acc_of(out.graph, w, data.test)
            r = compute_reward(acc, out.record.latency_ms, cfg.controller).value
            # search used modelled latency; the reported winner is also timed
            from .latency import TuningParams
            from .latency.calibration import measure_model
            from .space import UnifiedScheme
            per = measure_model(out.graph, w, UnifiedScheme.from_dict(out.record.scheme),
                                out.masks or {}, reps=cfg.latency.reps, seed=cfg.seed,
                                params=TuningParams(cfg.latency.tile, cfg.latency.unroll), cm=cm)
            out.record = replace(out.record, accuracy=acc, reward=r,
                                 measured_latency_ms=float(sum(per.values())))
            out.weights = w
            return out

    # wall-clock fields would break byte-identical synthetic logs
    log = S.RunLog(cfg.runlog_path, timings=not args.synthetic)
    try:
        res = S.search(graph, evaluate, scfg, cfg.controller, log=log, header=header,
                       base_record=base, finalize=finalize)
    finally:
        log.close()
    best = res.best
    (cfg.out / "best_scheme.json").write_text(json.dumps(best.scheme, sort_keys=True) + "\n")
    if res.best_outcome is not None and res.best_outcome.weights is not None:
        save_weights(cfg.out / "best_weights.npz", res.best_outcome.weights)
    _emit({"command": "search", "best_reward": best.reward, "best_accuracy": best.accuracy,
           "best_latency_ms": best.latency_ms, "evaluations": res.evaluations,
           "runlog": str(cfg.runlog_path)})
    return EXIT_OK


def cmd_eval_scheme(args) -> int:
    import torch
    from . import space
    from .config import ConfigError
    from .trainer import evaluate_scheme
    cfg = _load_config(args)
    graph = _graph(cfg)
    try:
        scheme = space.UnifiedScheme.loads(Path(args.scheme).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read scheme {args.scheme}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad scheme file {args.scheme}: {exc}") from None
    problems = space.validate(scheme, graph)
    if problems:
        raise ConfigError("invalid scheme: " + "; ".join(problems))
    torch.set_num_threads(cfg.train.threads)
    weights, data, cm = _real_pipeline(cfg, graph)
    out = evaluate_scheme(scheme, weights, graph, data, cfg.train, cm, cfg.controller)
    _emit(out.record.to_dict())
    if out.record.failed:
        raise CliError(EXIT_RUNTIME, f"evaluation failed: {out.record.error}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .latency import TuningParams, bench_case, parse_layer
    from .space import PruningType
    from .winograd import eligible
    layer = parse_layer(args.layer)
    ptype = None if args.ptype == "none" else PruningType[args.ptype.upper()]
    if not 0.0 <= args.ratio < 1.0:
        raise ValueError("--ratio must be in [0, 1)")
    if args.winograd and not eligible(layer):
        raise ValueError("--winograd needs a 3x3 stride-1 layer")
    params = TuningParams(args.tile, args.unroll)
    stats = bench_case(layer, ptype, args.ratio, args.winograd, params, args.reps, args.seed)
    dense = bench_case(layer, None, 0.0, False, params, args.reps, args.seed)
    _emit({"command": "bench", "layer": args.layer, "ptype": args.ptype, "ratio": args.ratio,
           "winograd": args.winograd, "median_ms": stats.median_ms, "iqr_ms": stats.iqr_ms,
           "reps": stats.reps, "dense_median_ms": dense.median_ms,
           "speedup": dense.median_ms / stats.median_ms})
    return EXIT_OK


EVAL_COLUMNS = ("step", "reward", "accuracy", "latency_ms", "measured_latency_ms", "failed",
                "provenance", "wall_time", "error", "scheme")
STEP_COLUMNS = ("step", "baseline", "mean_reward", "best_reward", "evaluations", "prior_only")


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)            # dot decimal, round-trippable
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return v


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c)) for c in columns])


def cmd_export(args) -> int:
    from .search import read_runlog
    from .config import ConfigError
    try:
        header, rows = read_runlog(args.runlog)
    except OSError as exc:
        raise ConfigError(f"cannot read run log {args.runlog}: {exc.strerror}") from None
    evals = [r for r in rows if r.get("type") == "eval"]
    steps = [r for r in rows if r.get("type") == "step"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "evals.csv", EVAL_COLUMNS, evals)
    _write_csv(out / "curves.csv", STEP_COLUMNS, steps)
    ok = [r for r in evals if not r.get("failed")]
    summary = {"evaluations": len(evals), "failed": len(evals) - len(ok), "steps": len(steps),
               "mode": header.get("config", {}).get("mode")}
    if ok:
        best = max(ok, key=lambda r: r["reward"])
        rewards = np.array([r["reward"] for r in ok])
        summary.update(best_reward=best["reward"], best_accuracy=best["accuracy"],
                       best_latency_ms=best["latency_ms"], mean_reward=float(rewards.mean()),
                       best_scheme=best["scheme"])
    finals = [r for r in rows if r.get("type") == "final"]
    if finals:
        summary.update(final_reward=finals[-1]["reward"], final_accuracy=finals[-1]["accuracy"])
    _write_csv(out / "summary.csv", ("key", "value"), [{"key": k, "value": v}
                                                       for k, v in summary.items()])
    _emit({"command": "export", "evals": len(evals), "steps": len(steps), "out": str(out)})
    return EXIT_OK


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="schemesearch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run configuration (JSON)")
        return sp

    with_config("train-base", "train and checkpoint the base model").set_defaults(fn=cmd_train_base)

    sp = with_config("calibrate", "microbenchmark sweep and cost-model fit")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(fn=cmd_calibrate)

    sp = with_config("search", "run the scheme search")
    sp.add_argument("--synthetic", action="store_true", help="closed-form evaluator, no training")
    sp.add_argument("--workers", type=int, help="parallel evaluations (default from config)")
    sp.add_argument("--seed", type=int, help="override the config seed")
    sp.set_defaults(fn=cmd_search)

    sp = with_config("eval-scheme", "evaluate one scheme")
    sp.add_argument("--scheme", required=True, help="scheme JSON file")
    sp.set_defaults(fn=cmd_eval_scheme)

    sp = sub.add_parser("bench", help="microbenchmark one layer configuration")
    sp.add_argument("--layer", required=True, help="CINxCOUTxSIZE[xN[xSTRIDE]], 'dw' prefix for depthwise")
    sp.add_argument("--ptype", default="none", choices=("none", "filter", "pattern", "block"))
    sp.add_argument("--ratio", type=float, default=0.0)
    sp.add_argument("--winograd", action="store_true")
    sp.add_argument("--reps", type=int, default=30)
    sp.add_argument("--tile", type=int, default=16)
    sp.add_argument("--unroll", type=int, default=4)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("export", help="run log to plot-ready CSV tables")
    sp.add_argument("--runlog", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_export)
    return p


def _classify(exc: BaseException) -> int:
    from .config import ConfigError
    from .space import SchemeStructureError, SchemeValidityError
    from .trainer import TrainingDivergence
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, (ConfigError, SchemeStructureError, SchemeValidityError)):
        return EXIT_CONFIG
    if isinstance(exc, (TrainingDivergence, FloatingPointError, np.linalg.LinAlgError)):
        return EXIT_NUMERIC
    return EXIT_RUNTIME


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        if args.command == "bench" and isinstance(exc, (ValueError, KeyError)):
            code = EXIT_CONFIG      # bad --layer/--ratio style input
        else:
            code = _classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error code={code} kind={type(exc).__name__}: {msg}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
