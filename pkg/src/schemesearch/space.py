"""Unified search space: per-layer enhancement and pruning actions.

A scheme is one global pruning method followed by one
``(kernel, winograd, ptype, ratio)`` quadruple per prunable convolution.
Token order and vocabularies are fixed so that the controller, the run log
and the graph kernel all agree on a single encoding.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


class KernelChoice(enum.IntEnum):
    K1x1 = 0
    K3x3 = 1
    DW3x3_then_1x1 = 2


class PruningMethod(enum.IntEnum):
    MAGNITUDE = 0
    ADMM = 1


class PruningType(enum.IntEnum):
    FILTER = 0
    PATTERN = 1
    BLOCK = 2


RATIOS = (0.0, 0.3, 0.5, 0.7, 0.8, 0.9)

# position classes, in emission order within a layer
METHOD, KERNEL, WINOGRAD, PTYPE, RATIO = range(5)
CLASS_NAMES = ("method", "kernel", "winograd", "ptype", "ratio")
VOCAB_SIZES = (2, 3, 2, 3, len(RATIOS))
LAYER_CLASSES = (KERNEL, WINOGRAD, PTYPE, RATIO)
# disjoint integer ranges so (class, token) -> label is injective
LABEL_OFFSETS = tuple(int(x) for x in np.cumsum((0,) + VOCAB_SIZES[:-1]))

_KERNEL_NAMES = {KernelChoice.K1x1: "1x1", KernelChoice.K3x3: "3x3",
                 KernelChoice.DW3x3_then_1x1: "dw3x3+1x1"}
_KERNEL_BY_NAME = {v: k for k, v in _KERNEL_NAMES.items()}


class SchemeStructureError(ValueError):
    """Scheme length does not match the model's prunable layers."""


class SchemeValidityError(ValueError):
    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid scheme: " + "; ".join(self.violations))


def ratio_token(ratio: float) -> int:
    for i, r in enumerate(RATIOS):
        if abs(r - ratio) < 1e-12:
            return i
    raise SchemeValidityError([f"ratio {ratio} not in {RATIOS}"])


@dataclass(frozen=True)
class LayerActions:
    kernel: KernelChoice = KernelChoice.K3x3
    winograd: bool = False
    ptype: PruningType = PruningType.FILTER
    ratio: float = 0.0

    @property
    def has_3x3(self) -> bool:
        return self.kernel != KernelChoice.K1x1

    @property
    def prunes(self) -> bool:
        return self.ratio > 0.0


@dataclass(frozen=True)
class UnifiedScheme:
    method: PruningMethod
    per_layer: tuple[LayerActions, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(self.per_layer))

    @property
    def num_tokens(self) -> int:
        return 1 + 4 * len(self.per_layer)

    def to_dict(self) -> dict:
        return {
            "method": self.method.name.lower(),
            "layers": [
                {"kernel": _KERNEL_NAMES[a.kernel], "winograd": bool(a.winograd),
                 "ptype": a.ptype.name.lower(), "ratio": float(a.ratio)}
                for a in self.per_layer
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UnifiedScheme":
        try:
            method = PruningMethod[d["method"].upper()]
            layers = tuple(
                LayerActions(_KERNEL_BY_NAME[x["kernel"]], bool(x["winograd"]),
                             PruningType[x["ptype"].upper()], float(x["ratio"]))
                for x in d["layers"])
        except (KeyError, AttributeError, TypeError) as exc:
            raise SchemeStructureError(f"malformed scheme record: {exc!r}") from None
        return cls(method, layers)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "UnifiedScheme":
        return cls.from_dict(json.loads(text))


def position_classes(num_layers: int) -> list[int]:
    return [METHOD] + list(LAYER_CLASSES) * num_layers


def allowed_tokens(cls: int, stride: int = 1, kernel: int | None = None) -> np.ndarray:
    """Boolean mask over the vocabulary of ``cls`` given the layer context.

    ``kernel`` is the token already emitted for this layer (needed for the
    winograd and ptype positions).
    """
    mask = np.ones(VOCAB_SIZES[cls], dtype=bool)
    if cls == WINOGRAD:
        if kernel == KernelChoice.K1x1 or stride != 1:
            mask[1] = False
    elif cls == PTYPE:
        if kernel == KernelChoice.K1x1:
            mask[PruningType.PATTERN] = False
    return mask


def _strides_of(graph) -> list[int]:
    if graph is None:
        return []
    if hasattr(graph, "prunable_layers"):
        return [layer.stride for layer in graph.prunable_layers()]
    return [int(s) for s in graph]


def _layer_violations(i: int, a: LayerActions, stride: int | None) -> list[str]:
    out = []
    if not any(abs(a.ratio - r) < 1e-12 for r in RATIOS):
        out.append(f"layer {i}: ratio {a.ratio} not in {RATIOS}")
    if a.ptype == PruningType.PATTERN and not a.has_3x3:
        out.append(f"layer {i}: pattern requires 3x3")
    if a.winograd:
        if not a.has_3x3:
            out.append(f"layer {i}: winograd requires a 3x3 convolution")
        elif stride is not None and stride != 1:
            out.append(f"layer {i}: winograd requires stride 1 (got {stride})")
    return out


def validate(scheme: UnifiedScheme, graph) -> list[str]:
    """Return every violated rule; an empty list means the scheme is valid.

    ``graph`` is a ModelGraph or a plain sequence of prunable-layer strides.
    """
    strides = _strides_of(graph)
    if len(strides) != len(scheme.per_layer):
        raise SchemeStructureError(
            f"scheme has {len(scheme.per_layer)} layers, model has {len(strides)} prunable")
    out = []
    for i, (a, s) in enumerate(zip(scheme.per_layer, strides)):
        out.extend(_layer_violations(i, a, s))
    return out


def tokenize(scheme: UnifiedScheme, graph=None) -> list[int]:
    strides = _strides_of(graph) if graph is not None else [None] * len(scheme.per_layer)
    if graph is not None and len(strides) != len(scheme.per_layer):
        raise SchemeStructureError(
            f"scheme has {len(scheme.per_layer)} layers, model has {len(strides)} prunable")
    bad = []
    for i, (a, s) in enumerate(zip(scheme.per_layer, strides)):
        bad.extend(_layer_violations(i, a, s))
    if bad:
        raise SchemeValidityError(bad)
    tokens = [int(scheme.method)]
    for a in scheme.per_layer:
        tokens += [int(a.kernel), int(bool(a.winograd)), int(a.ptype), ratio_token(a.ratio)]
    return tokens


def detokenize(tokens: Sequence[int]) -> UnifiedScheme:
    tokens = [int(t) for t in tokens]
    if len(tokens) < 1 or (len(tokens) - 1) % 4:
        raise SchemeStructureError(f"token count {len(tokens)} is not 1 + 4*L")
    for cls, t in zip(position_classes((len(tokens) - 1) // 4), tokens):
        if not 0 <= t < VOCAB_SIZES[cls]:
            raise SchemeStructureError(f"token {t} out of range for {CLASS_NAMES[cls]}")
    layers = []
    for i in range(1, len(tokens), 4):
        k, w, p, r = tokens[i:i + 4]
        layers.append(LayerActions(KernelChoice(k), bool(w), PruningType(p), RATIOS[r]))
    return UnifiedScheme(PruningMethod(tokens[0]), tuple(layers))


@dataclass(frozen=True)
class SchemeGraph:
    labels: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    def successors(self) -> list[list[int]]:
        succ: list[list[int]] = [[] for _ in self.labels]
        for a, b in self.edges:
            succ[a].append(b)
        return succ


def to_graph(scheme: UnifiedScheme) -> SchemeGraph:
    """Labeled path: method node, then kernel->winograd->ptype->ratio per layer."""
    tokens = [int(scheme.method)]
    for a in scheme.per_layer:
        tokens += [int(a.kernel), int(bool(a.winograd)), int(a.ptype), ratio_token(a.ratio)]
    classes = position_classes(len(scheme.per_layer))
    labels = tuple(LABEL_OFFSETS[c] + t for c, t in zip(classes, tokens))
    edges = tuple((i, i + 1) for i in range(len(labels) - 1))
    return SchemeGraph(labels, edges)


def identity_scheme(graph, method: PruningMethod = PruningMethod.MAGNITUDE) -> UnifiedScheme:
    """Scheme that changes nothing: current kernel form, no winograd, ratio 0."""
    layers = []
    for layer in graph.prunable_layers():
        k = KernelChoice.K3x3 if layer.n == 3 else KernelChoice.K1x1
        layers.append(LayerActions(k, False, PruningType.FILTER, 0.0))
    return UnifiedScheme(method, tuple(layers))


def _layer_options(stride: int) -> list[LayerActions]:
    opts = []
    for k in KernelChoice:
        for w in (0, 1):
            if not allowed_tokens(WINOGRAD, stride, k)[w]:
                continue
            for p in PruningType:
                if not allowed_tokens(PTYPE, stride, k)[p]:
                    continue
                for r in RATIOS:
                    opts.append(LayerActions(k, bool(w), p, r))
    return opts


def enumerate_schemes(graph) -> Iterator[UnifiedScheme]:
    """Every valid scheme, in token-lexicographic order."""
    per_layer = [_layer_options(s) for s in _strides_of(graph)]
    for m in PruningMethod:
        for combo in itertools.product(*per_layer):
            yield UnifiedScheme(m, combo)


def space_size(graph) -> int:
    n = len(PruningMethod)
    for s in _strides_of(graph):
        n *= len(_layer_options(s))
    return n


def random_scheme(graph, rng: np.random.Generator) -> UnifiedScheme:
    """Uniform over allowed tokens at each position (not uniform over schemes)."""
    tokens = [int(rng.integers(2))]
    for s in _strides_of(graph):
        k = int(rng.integers(3))
        w = int(rng.choice(np.flatnonzero(allowed_tokens(WINOGRAD, s, k))))
        p = int(rng.choice(np.flatnonzero(allowed_tokens(PTYPE, s, k))))
        r = int(rng.integers(len(RATIOS)))
        tokens += [k, w, p, r]
    return detokenize(tokens)
