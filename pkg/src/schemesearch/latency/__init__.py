"""Sparse formats, execution paths, microbenchmarks and the latency model."""
from .bench import LatencyStats, TimerResolutionError, bench_case, microbench, parse_layer
from .costmodel import (CalibrationError, CostModel, CostModelError, LatencyEstimate, calibrate,
                        estimate, layer_features)
from .executors import TILES, UNROLLS, TuningParams, build_executor
from .formats import SparseWeights, StructuralError, decode, encode
from .ga import GAConfig, GAResult, ga_tune
from .reorder import ReorderPlan, group_rows

__all__ = [
    "LatencyStats", "TimerResolutionError", "bench_case", "microbench", "parse_layer",
    "CalibrationError", "CostModel", "CostModelError", "LatencyEstimate", "calibrate", "estimate",
    "layer_features", "TILES", "UNROLLS", "TuningParams", "build_executor", "SparseWeights",
    "StructuralError", "decode", "encode", "GAConfig", "GAResult", "ga_tune", "ReorderPlan",
    "group_rows",
]
