"""Wall-clock microbenchmarks of single layer executors."""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np

from ..ir import LayerKind, LayerSpec, TensorShape
from ..pruning import BlockSpec, PruningMask, project
from ..space import PruningType
from .executors import TuningParams, build_executor

MIN_REPS = 30
MIN_TICKS = 100

# microbenchmarks never overlap, within or across threads
_BENCH_LOCK = threading.Lock()


class TimerResolutionError(RuntimeError):
    pass


@dataclass(frozen=True)
class LatencyStats:
    median_ms: float
    iqr_ms: float
    reps: int
    samples_ms: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"median_ms": self.median_ms, "iqr_ms": self.iqr_ms, "reps": self.reps}


def timer_tick_ns() -> float:
    return max(time.get_clock_info("perf_counter").resolution * 1e9, 1.0)


def microbench(fn, *args, reps: int = MIN_REPS, warmup: int = 3) -> LatencyStats:
    """Time ``fn(*args)`` ``reps`` times after ``warmup`` untimed calls."""
    if reps < MIN_REPS:
        raise ValueError(f"need at least {MIN_REPS} repetitions, got {reps}")
    times = np.empty(reps)
    with _BENCH_LOCK:
        for _ in range(warmup):
            fn(*args)
        for i in range(reps):
            t0 = time.perf_counter_ns()
            fn(*args)
            times[i] = time.perf_counter_ns() - t0
    med = float(np.median(times))
    tick = timer_tick_ns()
    if med < MIN_TICKS * tick:
        raise TimerResolutionError(
            f"median {med:.0f} ns is under {MIN_TICKS} timer ticks ({tick:g} ns each); "
            "benchmark a larger layer")
    q1, q3 = np.percentile(times, [25, 75])
    ms = times / 1e6
    return LatencyStats(med / 1e6, float(q3 - q1) / 1e6, reps, tuple(float(t) for t in ms))


def conv_layer(c_in: int, c_out: int, size: int, n: int = 3, stride: int = 1,
               depthwise: bool = False) -> LayerSpec:
    kind = LayerKind.DWCONV if depthwise else LayerKind.CONV
    if depthwise:
        c_out = c_in
    return LayerSpec(0, kind, c_in, c_out, TensorShape(c_in, size, size), n=n, stride=stride,
                     prunable=not depthwise)


def parse_layer(spec: str) -> LayerSpec:
    """``CINxCOUTxSIZE[xN[xSTRIDE]]`` such as ``256x256x16x3``; prefix ``dw`` for depthwise."""
    dw = spec.startswith("dw")
    parts = [int(p) for p in spec[2 if dw else 0:].lower().split("x")]
    if len(parts) < 3 or len(parts) > 5:
        raise ValueError(f"bad layer spec {spec!r}; expected CINxCOUTxSIZE[xN[xSTRIDE]]")
    return conv_layer(*parts, depthwise=dw)


def case_mask(layer: LayerSpec, weight: np.ndarray, ptype: PruningType | None, ratio: float,
              block_spec: BlockSpec | None = None) -> PruningMask | None:
    if ptype is None or ratio == 0:
        return None
    return project(weight, ptype, ratio, block_spec=block_spec)


def bench_case(layer: LayerSpec, ptype: PruningType | None = None, ratio: float = 0.0,
               winograd: bool = False, params: TuningParams | None = None,
               reps: int = MIN_REPS, seed: int = 0, weight: np.ndarray | None = None,
               mask: PruningMask | None = None) -> LatencyStats:
    """Build random weights (unless given), prune them and time the executor."""
    rng = np.random.default_rng(seed)
    if weight is None:
        weight = rng.normal(size=layer.weight_shape()).astype(np.float32)
    if mask is None:
        mask = case_mask(layer, weight, ptype, ratio)
    ex = build_executor(layer, weight, None, mask, winograd, params)
    s = layer.input_shape
    x = rng.normal(size=(s.channels, s.height, s.width)).astype(np.float32)
    return microbench(ex, x, reps=reps)
