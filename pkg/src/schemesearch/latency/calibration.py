"""Microbenchmark sweeps that produce cost-model calibration samples."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ir import LayerKind, LayerSpec, ModelGraph, TensorShape
from ..pruning import project
from ..space import PruningType
from ..winograd import eligible
from .bench import bench_case, conv_layer, microbench
from .costmodel import calibrate, choose_path, layer_features, winograd_layers
from .executors import TuningParams, build_executor

# (c_in, c_out, size, stride) spanning the desk model's layer shapes
DEFAULT_CONV_SHAPES = (
    (3, 16, 16, 1), (3, 32, 16, 1), (8, 16, 8, 1), (16, 16, 8, 1),
    (16, 16, 16, 1), (16, 32, 16, 1), (32, 32, 16, 1), (32, 64, 16, 1),
    (32, 32, 8, 1), (64, 64, 8, 1), (64, 128, 8, 1), (128, 128, 8, 1),
    (32, 32, 16, 2), (64, 64, 16, 2), (128, 128, 4, 1), (48, 96, 12, 1),
    (16, 64, 4, 1), (64, 128, 4, 1), (128, 64, 8, 1), (24, 48, 16, 2),
)
DEFAULT_DW_SHAPES = ((16, 16, 1), (32, 16, 1), (32, 8, 1), (64, 8, 1), (128, 8, 1),
                     (64, 16, 1), (128, 4, 1), (32, 16, 2), (64, 16, 2), (96, 12, 1),
                     (48, 12, 1), (128, 16, 1))
DEFAULT_FC_SHAPES = ((16, 10), (32, 10), (64, 10), (128, 10), (256, 10), (128, 100),
                     (256, 100), (512, 10), (64, 100), (512, 100))
DEFAULT_RATIOS = (0.3, 0.5, 0.7, 0.9)


@dataclass
class SweepConfig:
    conv_shapes: tuple = DEFAULT_CONV_SHAPES
    dw_shapes: tuple = DEFAULT_DW_SHAPES
    fc_shapes: tuple = DEFAULT_FC_SHAPES
    ratios: tuple = DEFAULT_RATIOS
    kernel_sizes: tuple = (3, 1)
    reps: int = 30
    seed: int = 0


def sweep_cases(cfg: SweepConfig):
    """(layer, ptype, ratio, winograd) tuples covering every arm."""
    cases = []
    for n in cfg.kernel_sizes:
        for c_in, c_out, size, stride in cfg.conv_shapes:
            layer = conv_layer(c_in, c_out, size, n=n, stride=stride)
            winos = (False, True) if eligible(layer) else (False,)
            for w in winos:
                cases.append((layer, None, 0.0, w))
                for p in PruningType:
                    if p == PruningType.PATTERN and n != 3:
                        continue
                    for r in cfg.ratios:
                        cases.append((layer, p, r, w))
    for c, size, stride in cfg.dw_shapes:
        layer = conv_layer(c, c, size, n=3, stride=stride, depthwise=True)
        winos = (False, True) if eligible(layer) else (False,)
        for w in winos:
            cases.append((layer, None, 0.0, w))
            for r in cfg.ratios:
                cases.append((layer, PruningType.PATTERN, r, w))
    for c_in, c_out in cfg.fc_shapes:
        layer = LayerSpec(0, LayerKind.DENSE, c_in, c_out, TensorShape(c_in, 4, 4))
        cases.append((layer, None, 0.0, False))
    return cases


def sweep(cfg: SweepConfig | None = None, progress=None):
    """Benchmark every sweep case; returns (LayerFeatures, median ms) pairs."""
    cfg = cfg or SweepConfig()
    samples = []
    cases = sweep_cases(cfg)
    for i, (layer, ptype, ratio, wino) in enumerate(cases):
        rng = np.random.default_rng(cfg.seed + i)
        weight = rng.normal(size=layer.weight_shape()).astype(np.float32)
        mask = None if ptype is None else project(weight, ptype, ratio)
        stats = bench_case(layer, winograd=wino, reps=cfg.reps, seed=cfg.seed + i,
                           weight=weight, mask=mask)
        samples.append((layer_features(layer, mask, wino), stats.median_ms))
        if progress:
            progress(i + 1, len(cases))
    return samples


def run_calibration(cfg: SweepConfig | None = None, holdout: float = 0.2, progress=None):
    cfg = cfg or SweepConfig()
    samples = sweep(cfg, progress)
    return calibrate(samples, holdout=holdout, seed=cfg.seed), samples


def measure_model(graph: ModelGraph, weights, scheme, masks: dict, reps: int = 30,
                  seed: int = 0, params: TuningParams | None = None, cm=None) -> dict:
    """Microbenchmark every costed layer of a graph; returns id -> median ms.

    With a cost model each layer runs on the path it predicts to be faster.
    """
    wino = winograd_layers(scheme, graph)
    rng = np.random.default_rng(seed)
    out = {}
    for layer in graph.layers:
        if layer.kind not in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.DENSE):
            continue
        w = weights[layer.id]
        m, wn = masks.get(layer.id), layer.id in wino
        dense = cm is not None and choose_path(cm, layer, m, wn)[1]
        ex = build_executor(layer, w["weight"], w.get("bias"), m, wn, params, dense_path=dense)
        s = layer.input_shape
        x = rng.normal(size=(s.channels, s.height, s.width)).astype(np.float32)
        out[layer.id] = microbench(ex, x, reps=reps).median_ms
    return out
