"""Layer-wise model representation, MAC accounting and graph rewrites.

Weights live outside the graph as ``ModelWeights``: a dict from layer id to
a dict of numpy arrays.  Convolution weights use the ``(c_out, c_in, n, n)``
layout (depthwise: ``(c, 1, n, n)``); Dense is ``(c_out, c_in)``; BatchNorm
holds ``gamma``, ``beta``, ``mean`` and ``var``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Dict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .space import KernelChoice

BN_EPS = 1e-5
IR_VERSION = 1

ModelWeights = Dict[int, Dict[str, np.ndarray]]


class ShapeError(ValueError):
    pass


class LayerKind(str, enum.Enum):
    CONV = "Conv2d"
    DWCONV = "DepthwiseConv2d"
    DENSE = "Dense"
    BN = "BatchNorm"
    RELU = "ReLU"


CONV_KINDS = (LayerKind.CONV, LayerKind.DWCONV)


@dataclass(frozen=True)
class TensorShape:
    channels: int
    height: int
    width: int

    def __post_init__(self):
        if min(self.channels, self.height, self.width) < 1:
            raise ShapeError(f"non-positive dimension in {self}")

    @property
    def size(self) -> int:
        return self.channels * self.height * self.width


@dataclass(frozen=True)
class LayerSpec:
    id: int
    kind: LayerKind
    c_in: int
    c_out: int
    input_shape: TensorShape
    n: int = 1
    stride: int = 1
    prunable: bool = False

    @property
    def padding(self) -> int:
        return self.n // 2

    @property
    def output_shape(self) -> TensorShape:
        s = self.input_shape
        if self.kind in CONV_KINDS:
            h = (s.height + 2 * self.padding - self.n) // self.stride + 1
            w = (s.width + 2 * self.padding - self.n) // self.stride + 1
            return TensorShape(self.c_out, h, w)
        if self.kind == LayerKind.DENSE:
            return TensorShape(self.c_out, 1, 1)
        return s

    def check(self) -> None:
        if self.input_shape.channels != self.c_in:
            raise ShapeError(f"layer {self.id}: input has {self.input_shape.channels} "
                             f"channels, c_in={self.c_in}")
        if self.kind in CONV_KINDS:
            if self.n not in (1, 3):
                raise ShapeError(f"layer {self.id}: kernel size {self.n} not in (1, 3)")
            if self.stride < 1:
                raise ShapeError(f"layer {self.id}: stride {self.stride}")
        if self.kind in (LayerKind.DWCONV, LayerKind.BN, LayerKind.RELU) and self.c_in != self.c_out:
            raise ShapeError(f"layer {self.id}: {self.kind.value} needs c_in == c_out")
        if self.prunable and self.kind != LayerKind.CONV:
            raise ShapeError(f"layer {self.id}: only Conv2d layers can be prunable")

    def weight_shape(self) -> tuple[int, ...] | None:
        if self.kind == LayerKind.CONV:
            return (self.c_out, self.c_in, self.n, self.n)
        if self.kind == LayerKind.DWCONV:
            return (self.c_out, 1, self.n, self.n)
        if self.kind == LayerKind.DENSE:
            return (self.c_out, self.c_in)
        return None

    def to_record(self) -> dict:
        s = self.input_shape
        return {"id": self.id, "kind": self.kind.value, "c_in": self.c_in, "c_out": self.c_out,
                "n": self.n, "stride": self.stride, "input_shape": [s.channels, s.height, s.width],
                "prunable": self.prunable}

    @classmethod
    def from_record(cls, r: dict) -> "LayerSpec":
        return cls(id=int(r["id"]), kind=LayerKind(r["kind"]), c_in=int(r["c_in"]),
                   c_out=int(r["c_out"]), input_shape=TensorShape(*map(int, r["input_shape"])),
                   n=int(r["n"]), stride=int(r["stride"]), prunable=bool(r["prunable"]))


def mac_count(layer: LayerSpec) -> int:
    layer.check()
    out = layer.output_shape
    hw = out.height * out.width
    if layer.kind == LayerKind.CONV:
        return layer.c_in * layer.c_out * layer.n ** 2 * hw
    if layer.kind == LayerKind.DWCONV:
        return layer.c_in * layer.n ** 2 * hw
    if layer.kind == LayerKind.DENSE:
        return layer.c_in * layer.c_out
    return 0


def weight_count(layer: LayerSpec) -> int:
    shape = layer.weight_shape()
    return int(np.prod(shape)) if shape else 0


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerSpec, ...]
    edges: tuple[tuple[int, int], ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "edges", tuple(tuple(e) for e in self.edges))

    @classmethod
    def chain(cls, layers) -> "ModelGraph":
        layers = tuple(layers)
        return cls(layers, tuple((a.id, b.id) for a, b in zip(layers, layers[1:])))

    def layer(self, layer_id: int) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise KeyError(f"unknown layer id {layer_id}")

    def consumers(self, layer_id: int) -> list[int]:
        return [b for a, b in self.edges if a == layer_id]

    def producers(self, layer_id: int) -> list[int]:
        return [a for a, b in self.edges if b == layer_id]

    def prunable_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.prunable]

    def validate(self) -> None:
        ids = [layer.id for layer in self.layers]
        if len(set(ids)) != len(ids):
            raise ShapeError("duplicate layer ids")
        pos = {i: k for k, i in enumerate(ids)}
        for layer in self.layers:
            layer.check()
        for a, b in self.edges:
            if a not in pos or b not in pos:
                raise ShapeError(f"edge ({a}, {b}) references an unknown layer")
            # layers are stored in execution order; a forward edge keeps it acyclic
            if pos[a] >= pos[b]:
                raise ShapeError(f"edge ({a}, {b}) is not in execution order")
            prod, cons = self.layer(a), self.layer(b)
            want = prod.output_shape
            if cons.kind == LayerKind.DENSE:
                if cons.c_in != want.channels:
                    raise ShapeError(f"edge ({a}, {b}): channel mismatch")
            elif cons.input_shape != want:
                raise ShapeError(f"edge ({a}, {b}): {want} feeds {cons.input_shape}")
        for layer in self.layers:
            if len(self.producers(layer.id)) > 1:
                raise ShapeError(f"layer {layer.id} has several producers")
        if not self.prunable_layers():
            raise ShapeError("graph has no prunable layer")

    def total_macs(self) -> int:
        return sum(mac_count(layer) for layer in self.layers)

    def total_weights(self) -> int:
        return sum(weight_count(layer) for layer in self.layers)

    def to_json(self) -> str:
        doc = {"version": IR_VERSION,
               "layers": [layer.to_record() for layer in self.layers],
               "edges": [list(e) for e in self.edges]}
        return json.dumps(doc, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ModelGraph":
        doc = json.loads(text)
        if doc.get("version") != IR_VERSION:
            raise ValueError(f"unsupported IR version {doc.get('version')!r}")
        return cls(tuple(LayerSpec.from_record(r) for r in doc["layers"]),
                   tuple(tuple(e) for e in doc["edges"]))


def desk_model(channels=(16, 32, 32, 64, 64, 128), strides=(1, 1, 2, 1, 2, 1),
               in_channels: int = 3, image_size: int = 16, num_classes: int = 10,
               batchnorm: bool = True) -> ModelGraph:
    """Plain chain of 3x3 convolutions (+BN, ReLU) with a pooled Dense head."""
    layers = []
    shape = TensorShape(in_channels, image_size, image_size)
    c_prev = in_channels
    next_id = 0
    for c, s in zip(channels, strides):
        conv = LayerSpec(next_id, LayerKind.CONV, c_prev, c, shape, n=3, stride=s, prunable=True)
        layers.append(conv)
        shape = conv.output_shape
        next_id += 1
        if batchnorm:
            layers.append(LayerSpec(next_id, LayerKind.BN, c, c, shape))
            next_id += 1
        layers.append(LayerSpec(next_id, LayerKind.RELU, c, c, shape))
        next_id += 1
        c_prev = c
    layers.append(LayerSpec(next_id, LayerKind.DENSE, c_prev, num_classes, shape))
    graph = ModelGraph.chain(layers)
    graph.validate()
    return graph


def init_weights(graph: ModelGraph, seed: int = 0, dtype=np.float32) -> ModelWeights:
    rng = np.random.default_rng(seed)
    weights: ModelWeights = {}
    for layer in graph.layers:
        shape = layer.weight_shape()
        if shape is not None:
            fan_in = int(np.prod(shape[1:]))
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)
            weights[layer.id] = {"weight": w, "bias": np.zeros(layer.c_out, dtype=dtype)}
        elif layer.kind == LayerKind.BN:
            c = layer.c_out
            weights[layer.id] = {"gamma": np.ones(c, dtype), "beta": np.zeros(c, dtype),
                                 "mean": np.zeros(c, dtype), "var": np.ones(c, dtype)}
    return weights


def copy_weights(weights: ModelWeights) -> ModelWeights:
    return {k: {n: a.copy() for n, a in d.items()} for k, d in weights.items()}


class GraphNet(nn.Module):
    """Torch module executing a ModelGraph in layer order."""

    def __init__(self, graph: ModelGraph, weights: ModelWeights | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.graph = graph
        self.mods = nn.ModuleDict()
        for layer in graph.layers:
            key = str(layer.id)
            if layer.kind == LayerKind.CONV:
                self.mods[key] = nn.Conv2d(layer.c_in, layer.c_out, layer.n, layer.stride,
                                           layer.padding, dtype=dtype)
            elif layer.kind == LayerKind.DWCONV:
                self.mods[key] = nn.Conv2d(layer.c_in, layer.c_out, layer.n, layer.stride,
                                           layer.padding, groups=layer.c_in, dtype=dtype)
            elif layer.kind == LayerKind.DENSE:
                self.mods[key] = nn.Linear(layer.c_in, layer.c_out, dtype=dtype)
            elif layer.kind == LayerKind.BN:
                self.mods[key] = nn.BatchNorm2d(layer.c_in, eps=BN_EPS, momentum=0.1, dtype=dtype)
        self._producer = {b: a for a, b in graph.edges}
        if weights is not None:
            self.load(weights)

    @torch.no_grad()
    def load(self, weights: ModelWeights) -> None:
        for layer in self.graph.layers:
            if str(layer.id) not in self.mods:
                continue
            m, w = self.mods[str(layer.id)], weights[layer.id]
            if layer.kind == LayerKind.BN:
                m.weight.copy_(torch.as_tensor(w["gamma"]))
                m.bias.copy_(torch.as_tensor(w["beta"]))
                m.running_mean.copy_(torch.as_tensor(w["mean"]))
                m.running_var.copy_(torch.as_tensor(w["var"]))
            else:
                m.weight.copy_(torch.as_tensor(w["weight"]))
                m.bias.copy_(torch.as_tensor(w["bias"]))

    @torch.no_grad()
    def export(self, dtype=np.float32) -> ModelWeights:
        out: ModelWeights = {}
        for layer in self.graph.layers:
            if str(layer.id) not in self.mods:
                continue
            m = self.mods[str(layer.id)]
            if layer.kind == LayerKind.BN:
                out[layer.id] = {"gamma": m.weight.numpy().astype(dtype),
                                 "beta": m.bias.numpy().astype(dtype),
                                 "mean": m.running_mean.numpy().astype(dtype),
                                 "var": m.running_var.numpy().astype(dtype)}
            else:
                out[layer.id] = {"weight": m.weight.numpy().astype(dtype),
                                 "bias": m.bias.numpy().astype(dtype)}
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs: dict[int, torch.Tensor] = {}
        y = x
        for layer in self.graph.layers:
            src = self._producer.get(layer.id)
            inp = x if src is None else outs[src]
            if layer.kind == LayerKind.RELU:
                y = F.relu(inp)
            elif layer.kind == LayerKind.DENSE:
                if inp.dim() == 4:
                    inp = inp.mean(dim=(2, 3))
                y = self.mods[str(layer.id)](inp)
            else:
                y = self.mods[str(layer.id)](inp)
            outs[layer.id] = y
        return y


def forward(graph: ModelGraph, weights: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Inference-mode forward pass in float64."""
    net = GraphNet(graph, weights, dtype=torch.float64).eval()
    with torch.no_grad():
        return net(torch.as_tensor(x, dtype=torch.float64)).numpy()


def fuse(graph: ModelGraph, weights: ModelWeights) -> tuple[ModelGraph, ModelWeights]:
    """Fold every conv -> BatchNorm pair whose conv feeds only that BN."""
    weights = copy_weights(weights)
    layers = list(graph.layers)
    edges = list(graph.edges)
    changed = True
    while changed:
        changed = False
        g = ModelGraph(tuple(layers), tuple(edges))
        for conv in layers:
            if conv.kind not in CONV_KINDS:
                continue
            cons = g.consumers(conv.id)
            if len(cons) != 1 or g.layer(cons[0]).kind != LayerKind.BN:
                continue
            bn_id = cons[0]
            bn = weights.pop(bn_id)
            scale = bn["gamma"].astype(np.float64) / np.sqrt(bn["var"].astype(np.float64) + BN_EPS)
            w = weights[conv.id]
            dt = w["weight"].dtype
            w["weight"] = (w["weight"].astype(np.float64) * scale[:, None, None, None]).astype(dt)
            w["bias"] = ((w["bias"].astype(np.float64) - bn["mean"]) * scale + bn["beta"]).astype(dt)
            layers = [layer for layer in layers if layer.id != bn_id]
            edges = [(a, b) for a, b in edges if b != bn_id]
            edges = [(conv.id if a == bn_id else a, b) for a, b in edges]
            changed = True
            break
    out = ModelGraph(tuple(layers), tuple(edges))
    return out, weights


def kernel_form(graph: ModelGraph, layer_id: int) -> KernelChoice:
    layer = graph.layer(layer_id)
    if layer.n == 3:
        return KernelChoice.K3x3
    prods = graph.producers(layer_id)
    if prods:
        p = graph.layer(prods[0])
        if p.kind == LayerKind.DWCONV and graph.consumers(p.id) == [layer_id]:
            return KernelChoice.DW3x3_then_1x1
    return KernelChoice.K1x1


def depthwise_stage(graph: ModelGraph, layer_id: int) -> LayerSpec | None:
    """The DW 3x3 layer feeding ``layer_id`` after a DW3x3_then_1x1 rewrite."""
    if kernel_form(graph, layer_id) != KernelChoice.DW3x3_then_1x1:
        return None
    return graph.layer(graph.producers(layer_id)[0])


def replace_kernel(graph: ModelGraph, layer_id: int, choice: KernelChoice,
                   weights: ModelWeights) -> tuple[ModelGraph, ModelWeights]:
    """Rewrite a prunable 3x3 conv as 1x1 or as depthwise 3x3 followed by 1x1.

    The 1x1 form copies the centre taps.  The depthwise form uses the
    per-input-channel mean kernel and per-(out, in) kernel sums for the
    pointwise stage, rescaled so the composed map keeps the original
    Frobenius norm.
    """
    layer = graph.layer(layer_id)
    if not layer.prunable or layer.kind != LayerKind.CONV:
        raise ValueError(f"layer {layer_id} is not a prunable Conv2d")
    current = kernel_form(graph, layer_id)
    if choice == current:
        return graph, weights
    if current != KernelChoice.K3x3:
        raise ValueError(f"layer {layer_id}: replacement only starts from a 3x3 kernel")
    weights = copy_weights(weights)
    w = weights[layer_id]["weight"]
    dt = w.dtype
    layers = list(graph.layers)
    idx = [x.id for x in layers].index(layer_id)
    if choice == KernelChoice.K1x1:
        layers[idx] = replace(layer, n=1)
        weights[layer_id]["weight"] = np.ascontiguousarray(w[:, :, 1:2, 1:2])
        return ModelGraph(tuple(layers), graph.edges), weights

    w64 = w.astype(np.float64)
    dw = w64.mean(axis=0)[:, None, :, :]                    # (c_in, 1, 3, 3)
    pw = w64.sum(axis=(2, 3))                               # (c_out, c_in)
    composed = pw[:, :, None, None] * dw[None, :, 0, :, :]
    norm_c = np.linalg.norm(composed)
    if norm_c > 0:
        pw *= np.linalg.norm(w64) / norm_c
    dw_id = max(x.id for x in layers) + 1
    dw_layer = LayerSpec(dw_id, LayerKind.DWCONV, layer.c_in, layer.c_in, layer.input_shape,
                         n=3, stride=layer.stride, prunable=False)
    pw_layer = replace(layer, n=1, stride=1, input_shape=dw_layer.output_shape)
    layers[idx:idx + 1] = [dw_layer, pw_layer]
    edges = [(a, dw_id if b == layer_id else b) for a, b in graph.edges] + [(dw_id, layer_id)]
    weights[dw_id] = {"weight": dw.astype(dt), "bias": np.zeros(layer.c_in, dtype=dt)}
    weights[layer_id]["weight"] = pw[:, :, None, None].astype(dt)
    return ModelGraph(tuple(layers), tuple(edges)), weights


def save_weights(path, weights: ModelWeights) -> None:
    flat = {f"{lid}/{name}": arr for lid, d in weights.items() for name, arr in d.items()}
    np.savez(path, **flat)


def load_weights(path) -> ModelWeights:
    out: ModelWeights = {}
    with np.load(path) as z:
        for key in z.files:
            lid, name = key.split("/")
            out.setdefault(int(lid), {})[name] = z[key]
    return out
