"""Structured pruning projections and the magnitude / ADMM drivers.

All projections are deterministic: rounding is half-away-from-zero and
ties in norm or energy go to the lower flat index.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .ir import LayerKind, ModelGraph, ModelWeights, copy_weights, depthwise_stage
from .space import KernelChoice, PruningType, UnifiedScheme

PATTERN_KEEP = 4
PATTERN_FLOOR = 5 / 9
MAX_PATTERNS = 8


class PruningError(ValueError):
    pass


def round_half_away(x: float) -> int:
    # the epsilon absorbs products like 0.1 * 5 = 0.49999999999999994
    return int(math.floor(abs(x) + 0.5 + 1e-9)) * (1 if x >= 0 else -1)


@dataclass(frozen=True)
class BlockSpec:
    b_in: int = 4
    b_out: int = 4

    def clamp(self, c_in: int, c_out: int) -> "BlockSpec":
        return BlockSpec(_divisor_at_most(c_in, self.b_in), _divisor_at_most(c_out, self.b_out))


def _divisor_at_most(c: int, b: int) -> int:
    b = max(1, min(b, c))
    while c % b:
        b -= 1
    return b


@dataclass
class PruningMask:
    mask: np.ndarray
    ptype: PruningType
    requested: float
    block_spec: BlockSpec | None = None
    library: tuple[int, ...] | None = None  # 9-bit pattern codes, row-major cells
    floor_bound: bool = False               # pattern: per-filter survivor floor stopped pruning

    @property
    def achieved(self) -> float:
        return float(1.0 - self.mask.mean()) if self.mask.size else 0.0

    @property
    def size(self) -> int:
        return int(self.mask.size)

    @property
    def pruned(self) -> int:
        return int(self.mask.size - np.count_nonzero(self.mask))


def apply_mask(w: np.ndarray, mask) -> np.ndarray:
    m = mask.mask if isinstance(mask, PruningMask) else mask
    return np.where(m, w, np.zeros((), dtype=w.dtype))


def _check_ratio(ratio: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise PruningError(f"ratio {ratio} outside [0, 1)")


def project_filter(w: np.ndarray, ratio: float) -> PruningMask:
    """Zero the round(ratio * c_out) output filters with the smallest L2 norm."""
    _check_ratio(ratio)
    c_out = w.shape[0]
    mask = np.ones(w.shape, dtype=bool)
    n_pruned = round_half_away(ratio * c_out) if ratio > 0 else 0
    if n_pruned >= c_out:
        raise PruningError(f"cannot prune all filters ({n_pruned} of {c_out})")
    if n_pruned:
        norms = np.sqrt((w.astype(np.float64).reshape(c_out, -1) ** 2).sum(axis=1))
        order = np.lexsort((np.arange(c_out), norms))
        mask[order[:n_pruned]] = False
    return PruningMask(mask, PruningType.FILTER, ratio)


def _codes(cells: np.ndarray) -> np.ndarray:
    """Pack boolean (..., 9) cell masks into integers (bit p = cell p)."""
    return (cells.astype(np.int64) << np.arange(9)).sum(axis=-1)


def _cells(code: int) -> np.ndarray:
    return ((int(code) >> np.arange(9)) & 1).astype(bool)


def top4_codes(w: np.ndarray) -> np.ndarray:
    """Code of each 3x3 kernel's 4 largest-magnitude cells (ties: lower cell)."""
    k = np.abs(w.astype(np.float64)).reshape(-1, 9)
    order = np.argsort(-k, axis=1, kind="stable")[:, :PATTERN_KEEP]
    cells = np.zeros(k.shape, dtype=bool)
    np.put_along_axis(cells, order, True, axis=1)
    return _codes(cells)


def build_pattern_library(w: np.ndarray, max_patterns: int = MAX_PATTERNS) -> tuple[int, ...]:
    """The most frequent top-4 masks of a layer (ties: smaller code first)."""
    codes, counts = np.unique(top4_codes(w), return_counts=True)
    order = np.lexsort((codes, -counts))
    return tuple(int(c) for c in codes[order[:max_patterns]])


def _popcount(x: np.ndarray) -> np.ndarray:
    return np.array([bin(int(v)).count("1") for v in x.ravel()]).reshape(x.shape)


def project_pattern(w: np.ndarray, ratio: float, lib=None) -> PruningMask:
    """Pattern pruning: 4-of-9 library patterns plus connectivity pruning.

    Whole kernels are removed in ascending L2 order until the pruned
    fraction reaches ``max(ratio, 5/9)``, keeping at least one kernel per
    output filter.
    """
    _check_ratio(ratio)
    if w.ndim != 4 or w.shape[-2:] != (3, 3):
        raise PruningError(f"pattern pruning needs 3x3 kernels, got shape {w.shape}")
    mask = np.ones(w.shape, dtype=bool)
    if ratio == 0:
        return PruningMask(mask, PruningType.PATTERN, ratio)
    c_out, c_in = w.shape[:2]
    lib = tuple(build_pattern_library(w) if lib is None else lib)
    if not lib or len(lib) > MAX_PATTERNS or any(bin(c).count("1") != PATTERN_KEEP for c in lib):
        raise PruningError(f"bad pattern library {lib}")
    own = top4_codes(w)
    lib_arr = np.array(lib, dtype=np.int64)
    overlap = _popcount(own[:, None] & lib_arr[None, :])
    best = np.argmax(overlap, axis=1)  # first maximum = lowest pattern index
    cells = np.stack([_cells(c) for c in lib_arr])[best]     # (N, 9)
    flat = mask.reshape(c_out * c_in, 9)
    flat[:] = cells

    nk = c_out * c_in
    target = max(ratio, PATTERN_FLOOR)
    need = max(0, math.ceil((target * 9 * nk - 5 * nk) / 4 - 1e-9))
    kept = np.where(cells, w.reshape(nk, 9).astype(np.float64), 0.0)
    norms = np.sqrt((kept ** 2).sum(axis=1))
    order = np.lexsort((np.arange(nk), norms))
    alive = np.full(c_out, c_in)
    removed = 0
    for k in order:
        if removed >= need:
            break
        o = k // c_in
        if alive[o] <= 1:
            continue
        flat[k] = False
        alive[o] -= 1
        removed += 1
    return PruningMask(mask, PruningType.PATTERN, ratio, library=lib,
                       floor_bound=removed < need)


def project_block(w: np.ndarray, ratio: float, spec: BlockSpec | None = None) -> PruningMask:
    """Block pruning: kernels in one (in, out) channel block share one mask.

    For n x n kernels with n > 1 each block keeps the same
    ``max(1, round((1 - ratio) * n^2))`` kernel positions.  For 1x1 kernels
    the shared pattern is over the block's input channels instead, so every
    filter of the block keeps the same input columns.
    """
    _check_ratio(ratio)
    if w.ndim != 4:
        raise PruningError(f"block pruning needs a conv weight, got shape {w.shape}")
    c_out, c_in, n, _ = w.shape
    spec = (spec or BlockSpec()).clamp(c_in, c_out)
    mask = np.ones(w.shape, dtype=bool)
    if ratio == 0:
        return PruningMask(mask, PruningType.BLOCK, ratio, block_spec=spec)
    ob, ib = c_out // spec.b_out, c_in // spec.b_in
    sq = w.astype(np.float64) ** 2
    for bo in range(spec.b_out):
        for bi in range(spec.b_in):
            osl = slice(bo * ob, (bo + 1) * ob)
            isl = slice(bi * ib, (bi + 1) * ib)
            blk = sq[osl, isl]
            if n > 1:
                energy = blk.sum(axis=(0, 1)).ravel()            # per kernel position
            else:
                energy = blk.sum(axis=(0, 2, 3))                 # per input channel
            cells = energy.size
            keep = max(1, round_half_away((1 - ratio) * cells))
            order = np.lexsort((np.arange(cells), -energy))
            on = np.zeros(cells, dtype=bool)
            on[order[:keep]] = True
            if n > 1:
                mask[osl, isl] = on.reshape(n, n)[None, None]
            else:
                mask[osl, isl] = on[None, :, None, None]
    return PruningMask(mask, PruningType.BLOCK, ratio, block_spec=spec)


def project(w: np.ndarray, ptype: PruningType, ratio: float, *,
            block_spec: BlockSpec | None = None, library=None) -> PruningMask:
    if ptype == PruningType.FILTER:
        return project_filter(w, ratio)
    if ptype == PruningType.PATTERN:
        return project_pattern(w, ratio, library)
    return project_block(w, ratio, block_spec)


def audit(pm: PruningMask) -> list[str]:
    """Structural violations of a mask for its pruning type (empty = clean)."""
    m = pm.mask
    out = []
    if pm.ptype == PruningType.FILTER:
        rows = m.reshape(m.shape[0], -1)
        partial = ~(rows.all(axis=1) | (~rows).all(axis=1))
        if partial.any():
            out.append(f"filters {np.flatnonzero(partial).tolist()} partially pruned")
        if not rows.any():
            out.append("all filters pruned")
    elif pm.ptype == PruningType.PATTERN:
        if m.ndim != 4 or m.shape[-2:] != (3, 3):
            return [f"pattern mask must be 3x3, got {m.shape}"]
        k = m.reshape(-1, 9)
        nnz = k.sum(axis=1)
        if pm.requested == 0:
            if not m.all():
                out.append("ratio 0 mask is not all-true")
            return out
        bad = np.flatnonzero((nnz != 0) & (nnz != PATTERN_KEEP))
        if bad.size:
            out.append(f"{bad.size} kernels do not have exactly {PATTERN_KEEP} cells")
        lib = set(pm.library or ())
        codes = _codes(k[nnz == PATTERN_KEEP])
        foreign = sorted(set(int(c) for c in codes) - lib)
        if foreign:
            out.append(f"patterns {foreign} not in library")
        if len(lib) > MAX_PATTERNS:
            out.append(f"library has {len(lib)} patterns")
        per_filter = (nnz > 0).reshape(m.shape[0], m.shape[1]).sum(axis=1)
        if (per_filter == 0).any():
            out.append("a filter lost all its kernels")
    else:
        spec = pm.block_spec
        if spec is None:
            return ["block mask without block spec"]
        c_out, c_in, n, _ = m.shape
        ob, ib = c_out // spec.b_out, c_in // spec.b_in
        for bo in range(spec.b_out):
            for bi in range(spec.b_in):
                blk = m[bo * ob:(bo + 1) * ob, bi * ib:(bi + 1) * ib]
                if n > 1:
                    ref = blk[0, 0]
                    same = (blk == ref[None, None]).all()
                else:
                    same = (blk == blk[0:1]).all()
                if not same:
                    out.append(f"block ({bo}, {bi}) mixes kernel masks")
    return out


def granule(pm: PruningMask) -> float:
    """Smallest step by which the achieved ratio of this mask type can move."""
    shape = pm.mask.shape
    if pm.ptype == PruningType.FILTER:
        return 1.0 / shape[0]
    if pm.ptype == PruningType.PATTERN:
        return 4.0 / (9 * shape[0] * shape[1])
    spec = pm.block_spec or BlockSpec(1, 1)
    if shape[2] > 1:
        return 1.0 / (shape[2] * shape[3])
    return 1.0 / (shape[1] // spec.b_in)


def ratio_violations(pm: PruningMask) -> list[str]:
    a, r, g = pm.achieved, pm.requested, granule(pm)
    if r == 0:
        return [] if a == 0 else [f"ratio 0 but achieved {a:.4f}"]
    if pm.ptype == PruningType.PATTERN:
        if pm.floor_bound:
            per_filter = (pm.mask.reshape(-1, 9).any(axis=1)
                          .reshape(pm.mask.shape[:2]).sum(axis=1))
            if a + 1e-12 < PATTERN_FLOOR or not (per_filter == 1).all():
                return [f"pattern stopped early at {a:.4f} with spare kernels"]
            return []
        lo = max(r, PATTERN_FLOOR)
        if a + 1e-12 < lo or a - lo >= g - 1e-12:
            return [f"pattern achieved {a:.4f} for target {lo:.4f} (granule {g:.4f})"]
        return []
    if abs(a - r) > g + 1e-12:
        return [f"achieved {a:.4f} vs requested {r} exceeds granule {g:.4f}"]
    return []


@dataclass(frozen=True)
class PruneTarget:
    layer_id: int        # layer whose weight gets the mask
    scheme_index: int    # position in the scheme's per-layer list
    ptype: PruningType
    ratio: float


def pruning_targets(scheme: UnifiedScheme, graph: ModelGraph) -> list[PruneTarget]:
    """Where each scheme entry's pruning lands in a (possibly rewritten) graph.

    After a depthwise rewrite, pattern pruning goes to the depthwise 3x3
    stage while filter and block pruning go to the pointwise 1x1 stage.
    """
    layers = graph.prunable_layers()
    if len(layers) != len(scheme.per_layer):
        raise PruningError("scheme/graph prunable layer count mismatch")
    out = []
    for i, (a, layer) in enumerate(zip(scheme.per_layer, layers)):
        if a.ratio == 0:
            continue
        lid = layer.id
        if a.ptype == PruningType.PATTERN and a.kernel == KernelChoice.DW3x3_then_1x1:
            dw = depthwise_stage(graph, layer.id)
            if dw is None:
                raise PruningError(f"layer {layer.id}: scheme asks for a depthwise stage "
                                   "the graph does not have")
            lid = dw.id
        out.append(PruneTarget(lid, i, a.ptype, float(a.ratio)))
    return out


def compute_masks(weights: ModelWeights, targets, *, block_spec: BlockSpec | None = None,
                  offsets: ModelWeights | None = None) -> Dict[int, PruningMask]:
    masks = {}
    for t in targets:
        w = weights[t.layer_id]["weight"]
        if offsets is not None:
            w = w + offsets[t.layer_id]
        masks[t.layer_id] = project(w, t.ptype, t.ratio, block_spec=block_spec)
    return masks


def magnitude_prune(weights: ModelWeights, scheme: UnifiedScheme, graph: ModelGraph,
                    block_spec: BlockSpec | None = None):
    """Project trained weights directly onto each layer's constraint set."""
    masks = compute_masks(weights, pruning_targets(scheme, graph), block_spec=block_spec)
    out = copy_weights(weights)
    for lid, pm in masks.items():
        out[lid]["weight"] = apply_mask(out[lid]["weight"], pm)
    return out, masks


@dataclass
class AdmmConfig:
    rho: float = 1e-3
    prune_epochs: int = 5
    finetune_epochs: int = 10

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be non-negative")


@dataclass
class AdmmResult:
    weights: ModelWeights
    masks: Dict[int, PruningMask]
    residuals: list = field(default_factory=list)   # ||W - Z||_F after each round


# w_step(weights, targets, rho) -> weights, where targets[lid] = Z - U and the
# step minimises loss(W) + rho/2 * sum ||W - targets||^2 (e.g. one epoch of SGD)
WStep = Callable[[ModelWeights, Dict[int, np.ndarray], float], ModelWeights]
Projector = Callable[[int, np.ndarray], PruningMask]


def admm_iterate(weights: ModelWeights, project_fn: Projector, w_step: WStep,
                 rho: float, rounds: int) -> AdmmResult:
    """Generic ADMM loop over the layers ``project_fn`` is asked about.

    ``project_fn(layer_id, v)`` returns the structural mask of ``v``.  The
    final mask is the one from the last Z-step (a plain projection of the
    input weights when ``rounds`` is 0), hard-applied to the returned weights.
    """
    w = copy_weights(weights)
    ids = list(_projector_ids(project_fn, w))
    u = {lid: np.zeros_like(w[lid]["weight"], dtype=np.float64) for lid in ids}
    masks = {lid: project_fn(lid, w[lid]["weight"].astype(np.float64)) for lid in ids}
    z = {lid: apply_mask(w[lid]["weight"].astype(np.float64), masks[lid]) for lid in ids}
    residuals = []
    for rnd in range(rounds):
        w = w_step(w, {lid: z[lid] - u[lid] for lid in ids}, rho)
        for lid in ids:
            if not np.isfinite(w[lid]["weight"]).all():
                raise FloatingPointError(f"ADMM diverged at round {rnd}, layer {lid}")
        res = 0.0
        for lid in ids:
            v = w[lid]["weight"].astype(np.float64) + u[lid]
            masks[lid] = project_fn(lid, v)
            z[lid] = apply_mask(v, masks[lid])
            diff = w[lid]["weight"] - z[lid]
            u[lid] += diff
            res += float((diff ** 2).sum())
        residuals.append(math.sqrt(res))
    for lid in ids:
        w[lid]["weight"] = apply_mask(w[lid]["weight"], masks[lid])
    return AdmmResult(w, masks, residuals)


def _projector_ids(project_fn, w):
    ids = getattr(project_fn, "layer_ids", None)
    return ids if ids is not None else sorted(w)


def admm_prune(weights: ModelWeights, scheme: UnifiedScheme, graph: ModelGraph,
               cfg: AdmmConfig, w_step: WStep, block_spec: BlockSpec | None = None) -> AdmmResult:
    """ADMM pruning for a scheme; ``w_step`` runs one training epoch with the
    proximal penalty (supplied by the trainer, which owns the data)."""
    targets = {t.layer_id: t for t in pruning_targets(scheme, graph)}

    def project_fn(lid, v):
        t = targets[lid]
        return project(v, t.ptype, t.ratio, block_spec=block_spec)

    project_fn.layer_ids = list(targets)
    return admm_iterate(weights, project_fn, w_step, cfg.rho, cfg.prune_epochs)


@dataclass
class SparsityReport:
    per_layer: Dict[int, float]
    overall: float
    pruned: int
    total: int

    def to_dict(self) -> dict:
        return {"per_layer": {str(k): v for k, v in self.per_layer.items()},
                "overall": self.overall, "pruned": self.pruned, "total": self.total}


def sparsity_report(masks, graph: ModelGraph | None = None) -> SparsityReport:
    """Pruned fractions per layer and overall (weighted by entry count).

    ``masks`` maps layer id to a PruningMask or boolean array.  With a graph,
    unpruned prunable layers count towards the total with zero pruned.
    """
    per, pruned, total = {}, 0, 0
    arrays = {lid: (pm.mask if isinstance(pm, PruningMask) else np.asarray(pm))
              for lid, pm in masks.items()}
    if graph is not None:
        for layer in graph.layers:
            if layer.kind == LayerKind.DWCONV or layer.prunable:
                arrays.setdefault(layer.id, np.ones(layer.weight_shape(), dtype=bool))
    for lid in sorted(arrays):
        m = arrays[lid]
        p = int(m.size - np.count_nonzero(m))
        per[lid] = p / m.size if m.size else 0.0
        pruned += p
        total += m.size
    return SparsityReport(per, pruned / total if total else 0.0, pruned, total)
