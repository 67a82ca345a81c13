"""Linear per-layer latency model fitted to microbenchmarks.

A layer runs on one arm, keyed by layer kind, pruning type and the Winograd
flag, e.g. ``conv3/pattern`` or ``dw/dense+wino``.  Within an arm

    t = c0 + c1 * bytes + c2 * effective_macs + c3 * tile_transforms

with every coefficient non-negative.  Effective MACs count unmasked weights
only and are divided by the Winograd arithmetic ratio on Winograd arms.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from ..ir import LayerKind, LayerSpec, ModelGraph
from ..pruning import PruningMask
from ..space import KernelChoice, PruningType, UnifiedScheme
from ..winograd import MULS_DIRECT_PER_TILE, MULS_WINOGRAD_PER_TILE, eligible
from . import formats

COSTMODEL_VERSION = 1
MIN_SAMPLES = 20
WINOGRAD_RATIO = MULS_DIRECT_PER_TILE / MULS_WINOGRAD_PER_TILE
BYTES_PER_VALUE = 4   # float32 activations and weights
COEFS = ("c0", "c1", "c2", "c3")


class CostModelError(RuntimeError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerFeatures:
    arm: str
    bytes: float
    macs: float            # effective, after the Winograd division
    tiles: float           # Winograd tile transforms (0 off the Winograd arms)

    def row(self) -> np.ndarray:
        return np.array([1.0, self.bytes, self.macs, self.tiles])


def layer_kind(layer: LayerSpec) -> str:
    if layer.kind == LayerKind.DENSE:
        return "fc"
    if layer.kind == LayerKind.DWCONV:
        return "dw"
    if layer.kind == LayerKind.CONV:
        return f"conv{layer.n}"
    raise ValueError(f"{layer.kind.value} has no latency arm")


def arm_name(kind: str, ptype: PruningType | None, winograd: bool) -> str:
    p = "dense" if ptype is None else PruningType(ptype).name.lower()
    return f"{kind}/{p}{'+wino' if winograd else ''}"


def is_winograd_arm(arm: str) -> bool:
    return arm.endswith("+wino")


def dense_arm(arm: str) -> str:
    kind, rest = arm.split("/")
    return f"{kind}/dense{'+wino' if rest.endswith('+wino') else ''}"


def layer_features(layer: LayerSpec, mask: PruningMask | None = None,
                   winograd: bool = False, weight_bytes: int | None = None) -> LayerFeatures:
    """Cost features of one layer; masks that prune nothing count as dense."""
    if mask is not None and mask.mask.all():
        mask = None
    if winograd and not eligible(layer):
        raise CostModelError(f"layer {layer.id} is not winograd-eligible")
    ptype = None if mask is None else mask.ptype
    out = layer.output_shape
    hw = out.height * out.width
    wshape = layer.weight_shape()
    kept = int(np.prod(wshape)) if mask is None else int(np.count_nonzero(mask.mask))
    if layer.kind == LayerKind.DENSE:
        macs = float(kept)
    else:
        macs = float(kept * hw)
    if weight_bytes is None:
        if mask is None or layer.kind == LayerKind.DENSE:
            weight_bytes = int(np.prod(wshape)) * BYTES_PER_VALUE
        else:
            w = np.zeros(wshape, dtype=np.float32)
            weight_bytes = formats.encode(w, mask).nbytes
    act = (layer.input_shape.size + out.size) * BYTES_PER_VALUE
    tiles = 0.0
    if winograd:
        macs /= WINOGRAD_RATIO
        t = math.ceil(out.height / 2) * math.ceil(out.width / 2)
        c_out = layer.c_out
        if ptype == PruningType.FILTER:
            c_out = int(mask.mask.reshape(layer.c_out, -1).any(axis=1).sum())
        # a depthwise layer's transforms scale exactly like its MACs, so c2 carries them
        tiles = 0.0 if layer.kind == LayerKind.DWCONV else float(t * (layer.c_in + c_out))
    return LayerFeatures(arm_name(layer_kind(layer), ptype, winograd),
                         float(weight_bytes + act), macs, tiles)


@dataclass
class ArmFit:
    coef: tuple[float, float, float, float]
    n: int
    r2: float | None = None

    def predict(self, f: LayerFeatures) -> float:
        return float(np.dot(self.coef, f.row()))


@dataclass
class CostModel:
    arms: dict = field(default_factory=dict)          # arm -> ArmFit
    uncalibrated: dict = field(default_factory=dict)  # arm -> reason
    r2: float | None = None                           # pooled held-out R^2
    n_samples: int = 0

    def layer_latency(self, f: LayerFeatures) -> float:
        fit = self.arms.get(f.arm)
        if fit is None:
            reason = self.uncalibrated.get(f.arm, "no samples")
            raise CostModelError(f"arm {f.arm} is uncalibrated ({reason})")
        return fit.predict(f)

    def to_dict(self) -> dict:
        return {"version": COSTMODEL_VERSION, "r2": self.r2, "n_samples": self.n_samples,
                "arms": {a: {**dict(zip(COEFS, f.coef)), "n": f.n, "r2": f.r2}
                         for a, f in sorted(self.arms.items())},
                "uncalibrated": dict(sorted(self.uncalibrated.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        if d.get("version") != COSTMODEL_VERSION:
            raise ValueError(f"unsupported cost model version {d.get('version')!r}")
        arms = {a: ArmFit(tuple(float(v[c]) for c in COEFS), int(v["n"]), v.get("r2"))
                for a, v in d["arms"].items()}
        return cls(arms, dict(d.get("uncalibrated", {})), d.get("r2"), int(d.get("n_samples", 0)))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "CostModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _r2(y, pred) -> float | None:
    y = np.asarray(y)
    if len(y) < 2:
        return None
    ss = float(((y - y.mean()) ** 2).sum())
    if ss == 0:
        return None
    return 1.0 - float(((y - np.asarray(pred)) ** 2).sum()) / ss


def fit_arm(feats, y) -> tuple[float, ...]:
    """Non-negative least squares on column-scaled features."""
    X = np.stack([f.row() for f in feats])
    y = np.asarray(y, dtype=np.float64)
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    coef, _ = nnls(X / scale, y)
    return tuple(float(c) for c in coef / scale)


def _coverage_problem(feats) -> str | None:
    X = np.stack([f.row() for f in feats])
    used = [0, 1, 2] + ([3] if X[:, 3].any() else [])
    X = X[:, used]
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1.0
    rank = np.linalg.matrix_rank(X / scale, tol=1e-9)
    if rank < len(used):
        return (f"rank {rank} < {len(used)} with {len(feats)} samples; add configurations "
                "varying channels, spatial size and ratio")
    return None


def calibrate(samples, holdout: float = 0.2, seed: int = 0) -> CostModel:
    """Fit every arm present in ``samples`` (pairs of LayerFeatures and ms).

    A seeded ``holdout`` fraction of each arm is kept out of the fit and
    scores it; the pooled held-out R^2 is recorded on the model.
    """
    samples = list(samples)
    if len(samples) < MIN_SAMPLES:
        raise CalibrationError(f"need at least {MIN_SAMPLES} samples, got {len(samples)}")
    by_arm: dict = {}
    for f, t in samples:
        if not math.isfinite(t) or t < 0:
            raise CalibrationError(f"bad latency {t} for arm {f.arm}")
        by_arm.setdefault(f.arm, []).append((f, float(t)))
    rng = np.random.default_rng(seed)
    cm = CostModel(n_samples=len(samples))
    held_y, held_p = [], []
    for arm in sorted(by_arm):
        rows = by_arm[arm]
        idx = rng.permutation(len(rows))
        n_hold = int(round(holdout * len(rows))) if len(rows) >= 5 else 0
        test = [rows[i] for i in idx[:n_hold]]
        train = [rows[i] for i in idx[n_hold:]]
        problem = _coverage_problem([f for f, _ in train])
        if problem:
            cm.uncalibrated[arm] = problem
            continue
        fit = ArmFit(fit_arm([f for f, _ in train], [t for _, t in train]), len(train))
        if test:
            pred = [fit.predict(f) for f, _ in test]
            fit.r2 = _r2([t for _, t in test], pred)
            held_y += [t for _, t in test]
            held_p += pred
        cm.arms[arm] = fit
    if not cm.arms:
        missing = "; ".join(f"{a}: {r}" for a, r in cm.uncalibrated.items())
        raise CalibrationError(f"no arm could be calibrated ({missing})")
    cm.r2 = _r2(held_y, held_p)
    return cm


# -- whole-model estimates ----------------------------------------------------

@dataclass
class LatencyEstimate:
    per_layer: dict
    total: float


def winograd_layers(scheme: UnifiedScheme | None, graph: ModelGraph) -> set:
    """Ids of the layers whose 3x3 stage runs Winograd under ``scheme``."""
    if scheme is None:
        return set()
    from ..ir import depthwise_stage
    out = set()
    for a, layer in zip(scheme.per_layer, graph.prunable_layers()):
        if not a.winograd:
            continue
        if a.kernel == KernelChoice.DW3x3_then_1x1:
            dw = depthwise_stage(graph, layer.id)
            if dw is not None:
                out.add(dw.id)
        elif a.kernel == KernelChoice.K3x3:
            out.add(layer.id)
    return out


def choose_path(cm: CostModel, layer: LayerSpec, mask: PruningMask | None = None,
                winograd: bool = False) -> tuple[float, bool]:
    """(estimate, run densely?) for one layer.

    The sparse arm is used unless the dense arm of the same kind is
    calibrated and predicts a lower latency; masked weights can always run
    on the dense path.
    """
    f = layer_features(layer, mask, winograd)
    t = cm.layer_latency(f)
    if f.arm != dense_arm(f.arm) and dense_arm(f.arm) in cm.arms:
        td = cm.layer_latency(layer_features(layer, None, winograd))
        if td < t:
            return td, True
    return t, False


def estimate_layer(cm: CostModel, layer: LayerSpec, mask: PruningMask | None = None,
                   winograd: bool = False) -> float:
    return choose_path(cm, layer, mask, winograd)[0]


def estimate(graph: ModelGraph, scheme: UnifiedScheme | None, masks: dict,
             cm: CostModel) -> LatencyEstimate:
    """Per-layer and total latency (ms) of a rewritten graph under its masks."""
    wino = winograd_layers(scheme, graph)
    per = {}
    for layer in graph.layers:
        if layer.kind not in (LayerKind.CONV, LayerKind.DWCONV, LayerKind.DENSE):
            continue
        per[layer.id] = estimate_layer(cm, layer, masks.get(layer.id), layer.id in wino)
    return LatencyEstimate(per, float(sum(per.values())))
