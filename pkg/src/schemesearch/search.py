"""Generator + Bayesian-selection search loop over unified schemes."""
from __future__ import annotations

import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graphbo, space
from .controller import Controller, ControllerConfig, Provenance, Reward, compute_reward
from .ir import ModelGraph, mac_count
from .space import KernelChoice, PruningMethod, PruningType, UnifiedScheme
from .trainer import EvalOutcome, EvalRecord, failure_record

RUNLOG_VERSION = 1


@dataclass
class SearchConfig:
    steps: int = 50
    pool_size: int = 50        # K
    batch_size: int = 10       # B
    workers: int = 1
    seed: int = 0
    xi: float = 0.01
    gp_noise: float = 1e-4
    wl_iterations: int = 2
    surrogate_clamp: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 < self.batch_size <= self.pool_size:
            raise ValueError("need 0 < batch_size <= pool_size")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


def default_workers() -> int:
    return max(1, (os.cpu_count() or 2) - 1)


# -- synthetic evaluator ----------------------------------------------------

class SyntheticEvaluator:
    """Closed-form accuracy and latency over the scheme space.

    Each prunable layer has a dense latency proportional to its MACs, scaled
    so the dense model costs ``dense_ms``.  Kernel forms, Winograd and pruning
    shrink latency; smaller kernels and heavier pruning cost accuracy, ADMM
    recovering part of the pruning loss.
    """

    KERNEL_TIME = {KernelChoice.K3x3: 1.0, KernelChoice.K1x1: 0.16, KernelChoice.DW3x3_then_1x1: 0.3}
    KERNEL_DROP = {KernelChoice.K3x3: 0.0, KernelChoice.K1x1: 0.06, KernelChoice.DW3x3_then_1x1: 0.025}
    PRUNE_SPEED = {PruningType.FILTER: 1.0, PruningType.PATTERN: 0.8, PruningType.BLOCK: 0.9}
    PRUNE_DROP = {PruningType.FILTER: 0.12, PruningType.PATTERN: 0.04, PruningType.BLOCK: 0.07}

    def __init__(self, graph: ModelGraph, ctrl_cfg: ControllerConfig, base_accuracy: float = 0.9,
                 dense_ms: float | None = None):
        self.graph = graph
        self.cfg = ctrl_cfg
        self.base = base_accuracy
        layers = graph.prunable_layers()
        macs = np.array([mac_count(lay) for lay in layers], dtype=np.float64)
        dense_ms = 2.0 * ctrl_cfg.latency_threshold if dense_ms is None else dense_ms
        self.layer_ms = dense_ms * macs / macs.sum()
        self.share = macs / macs.sum()
        self.calls = 0

    def accuracy_latency(self, s: UnifiedScheme) -> tuple[float, float]:
        acc, t = self.base, 0.0
        admm = s.method == PruningMethod.ADMM
        for a, ms, share in zip(s.per_layer, self.layer_ms, self.share):
            k = self.KERNEL_TIME[a.kernel]
            if a.winograd:
                k *= 0.6
            r = a.ratio
            if a.ptype == PruningType.PATTERN and r > 0:
                r = max(r, 5 / 9)
            keep = 1.0 - self.PRUNE_SPEED[a.ptype] * r
            t += ms * k * keep
            drop = self.KERNEL_DROP[a.kernel] + self.PRUNE_DROP[a.ptype] * r ** 3 * (0.6 if admm else 1.0)
            acc -= drop * (0.5 + share)
        return float(np.clip(acc, 0.0, 1.0)), float(t)

    def reward(self, s: UnifiedScheme) -> float:
        a, t = self.accuracy_latency(s)
        return compute_reward(a, t, self.cfg).value

    def __call__(self, s: UnifiedScheme) -> EvalOutcome:
        self.calls += 1
        started = time.perf_counter()
        problems = space.validate(s, self.graph)
        if problems:
            return EvalOutcome(failure_record(s, space.SchemeValidityError(problems), started))
        a, t = self.accuracy_latency(s)
        r = compute_reward(a, t, self.cfg)
        return EvalOutcome(EvalRecord(s.to_dict(), a, t, r.value,
                                      wall_time=time.perf_counter() - started))


def brute_force(graph: ModelGraph, evaluator: SyntheticEvaluator) -> tuple[UnifiedScheme, float]:
    best, best_r = None, -np.inf
    for s in space.enumerate_schemes(graph):
        r = evaluator.reward(s)
        if r > best_r:
            best, best_r = s, r
    return best, best_r


# -- run log ----------------------------------------------------------------

class RunLog:
    """Append-only JSON-lines log: one header, then eval / step / final lines.

    With ``timings=False`` wall-clock fields are dropped, so single-worker
    runs with equal seeds produce byte-identical logs.
    """

    TIMING_KEYS = ("wall_time",)

    def __init__(self, path=None, timings: bool = True):
        self.path = path
        self.timings = timings
        self.lines: list[str] = []
        self._fh = open(path, "w") if path else None

    def write(self, obj: dict) -> None:
        if not self.timings:
            obj = {k: v for k, v in obj.items() if k not in self.TIMING_KEYS}
        line = json.dumps(obj, sort_keys=True)
        self.lines.append(line)
        if self._fh:
            self._fh.write(line + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def read_runlog(path) -> tuple[dict, list[dict]]:
    header, rows = None, []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = obj
            else:
                rows.append(obj)
    if header is None:
        raise ValueError(f"{path}: run log has no header line")
    if header.get("version") != RUNLOG_VERSION:
        raise ValueError(f"{path}: unsupported run log version {header.get('version')!r}")
    return header, rows


# -- search -----------------------------------------------------------------

@dataclass
class SearchResult:
    best: EvalRecord
    best_outcome: EvalOutcome | None
    evaluations: int
    baselines: list = field(default_factory=list)
    log: RunLog | None = None


def _step_seed(seed: int, step: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, step])


def search(graph: ModelGraph, evaluate, cfg: SearchConfig, ctrl_cfg: ControllerConfig | None = None,
           log: RunLog | None = None, header: dict | None = None,
           base_record: EvalRecord | None = None, finalize=None) -> SearchResult:
    """Run the sample / select / evaluate / update loop.

    ``evaluate(scheme) -> EvalOutcome`` scores one scheme and must be safe to
    call from ``cfg.workers`` threads.  Identical schemes are evaluated once
    and their record reused.  ``finalize(outcome) -> EvalOutcome`` runs on
    the best outcome after the loop (the final fine-tune).
    """
    ctrl_cfg = ctrl_cfg or ControllerConfig(batch_size=cfg.pool_size)
    log = log or RunLog()
    log.write({"type": "header", "version": RUNLOG_VERSION,
               "config": header if header is not None else {"search": asdict(cfg),
                                                              "controller": asdict(ctrl_cfg)}})
    ctl = Controller.for_graph(graph, ctrl_cfg, seed=cfg.seed)
    wl = graphbo.WLConfig(cfg.wl_iterations)
    observations: list = []
    cache: dict = {}
    best_out: EvalOutcome | None = None
    if base_record is not None:
        best_out = EvalOutcome(base_record)
    baselines = []
    evaluations = 0
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for step in range(cfg.steps):
            snap = ctl.snapshot()
            drawn = snap.sample_many(cfg.pool_size, _step_seed(cfg.seed, step))
            schemes = [d[0] for d in drawn]
            if cfg.batch_size == cfg.pool_size:
                chosen, sur, prior_only = list(range(len(schemes))), {}, False
            else:
                gp = graphbo.gp_fit(observations, cfg.gp_noise, wl)
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    sel = graphbo.select_batch(gp, schemes, cfg.batch_size, xi=cfg.xi,
                                               clamp=tuple(cfg.surrogate_clamp))
                chosen, sur, prior_only = sel.selected, sel.surrogate, sel.prior_only
            keys = [schemes[i].dumps() for i in chosen]
            todo = [k for k in dict.fromkeys(keys) if k not in cache]
            done = _run(evaluate, [UnifiedScheme.loads(k) for k in todo], pool)
            evaluations += len(todo)
            for k, out in zip(todo, done):
                cache[k] = out
                out.record.step = step
                log.write({"type": "eval", **out.record.to_dict()})
                observations.append((UnifiedScheme.loads(k), out.record.reward))
                if not out.record.failed and (best_out is None
                                              or out.record.reward > best_out.record.reward):
                    best_out = out
            batch = []
            for i, (s, tokens, logp) in enumerate(drawn):
                if i in sur:
                    batch.append((tokens, logp, Reward(float("nan"), float("nan"), sur[i],
                                                       Provenance.SURROGATE)))
                else:
                    rec = cache[s.dumps()].record
                    batch.append((tokens, logp, rec.reward))
            stats = ctl.reinforce_update(batch)
            baselines.append(ctl.baseline)
            log.write({"type": "step", "step": step, "baseline": ctl.baseline,
                       "mean_reward": stats["mean_reward"], "evaluations": evaluations,
                       "prior_only": prior_only,
                       "best_reward": None if best_out is None else best_out.record.reward})
    finally:
        if pool is not None:
            pool.shutdown()
    if best_out is not None and finalize is not None and cfg.steps > 0:
        best_out = finalize(best_out)
        log.write({"type": "final", **best_out.record.to_dict()})
    if best_out is None:
        raise RuntimeError("search produced no successful evaluation")
    return SearchResult(best_out.record, best_out, evaluations, baselines, log)


def _run(evaluate, schemes, pool) -> list[EvalOutcome]:
    if pool is None:
        return [_safe(evaluate, s) for s in schemes]
    futs = {pool.submit(_safe, evaluate, s): i for i, s in enumerate(schemes)}
    out: list = [None] * len(schemes)
    for f in as_completed(futs):          # completion order
        out[futs[f]] = f.result()
    return out


def _safe(evaluate, s: UnifiedScheme) -> EvalOutcome:
    started = time.perf_counter()
    try:
        return evaluate(s)
    except Exception as exc:               # worker failure: sentinel, keep searching
        return EvalOutcome(failure_record(s, exc, started))
