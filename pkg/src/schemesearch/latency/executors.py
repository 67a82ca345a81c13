"""Host-CPU execution paths for dense, sparse and Winograd layers.

Every executor is built once from a layer, its weights and an optional
structural mask, then called on a single (C, H, W) activation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..ir import LayerKind, LayerSpec
from ..pruning import PruningMask, apply_mask
from ..space import PruningType
from ..winograd import (WinogradEligibilityError, WinogradPlan, eligible, winograd_conv,
                        winograd_depthwise)
from .reorder import reorder

TILES = (8, 16, 32, 64)
UNROLLS = (1, 2, 4, 8)


@dataclass(frozen=True)
class TuningParams:
    tile: int = 16      # output rows per tile
    unroll: int = 4     # inner-loop unroll of the sparse kernel

    def __post_init__(self):
        if self.tile not in TILES:
            raise ValueError(f"tile {self.tile} not in {TILES}")
        if self.unroll not in UNROLLS:
            raise ValueError(f"unroll {self.unroll} not in {UNROLLS}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p))) if p else np.ascontiguousarray(x)


class Executor:
    name = "base"

    def __init__(self, layer: LayerSpec, params: TuningParams):
        self.layer = layer
        self.params = params
        out = layer.output_shape
        self.out_shape = (out.channels, out.height, out.width)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class GemmConv(Executor):
    """im2col + GEMM, lowered in tiles of output rows.  With ``rows`` set only
    those filters are computed (filter pruning); the others output the bias."""
    name = "gemm"

    def __init__(self, layer, weight, bias, params, rows=None):
        super().__init__(layer, params)
        self.rows = None if rows is None else np.asarray(rows)
        w = weight if self.rows is None else weight[self.rows]
        self.w2 = np.ascontiguousarray(w.reshape(len(w), -1))
        self.bias = bias

    def __call__(self, x):
        L = self.layer
        n, s = L.n, L.stride
        c_out, ho, wo = self.out_shape
        out = np.empty(self.out_shape, dtype=x.dtype)
        out[:] = self.bias[:, None, None]
        if self.w2.shape[0] == 0:
            return out
        dst = out if self.rows is None else np.empty((len(self.rows), ho, wo), dtype=x.dtype)
        if n == 1:
            cols = np.ascontiguousarray(x[:, ::s, ::s]).reshape(L.c_in, -1)
            dst[:] = (self.w2 @ cols).reshape(dst.shape) + self.bias_rows()[:, None, None]
        else:
            xpad = _pad(x, L.padding)
            t = self.params.tile
            for y0 in range(0, ho, t):
                y1 = min(ho, y0 + t)
                band = xpad[:, y0 * s:(y1 - 1) * s + n]
                cols = kernels.im2col(band, n, s, y1 - y0, wo)
                dst[:, y0:y1] = (self.w2 @ cols).reshape(-1, y1 - y0, wo)
            dst += self.bias_rows()[:, None, None]
        if self.rows is not None:
            out[self.rows] = dst
        return out

    def bias_rows(self):
        return self.bias if self.rows is None else self.bias[self.rows]


class PatternConv(Executor):
    """Four-tap kernels run by the sparse kernel; kernels are visited with
    filters of equal pattern layout grouped together."""
    name = "pattern"

    def __init__(self, layer, weight, bias, mask, params):
        super().__init__(layer, params)
        c_out, c_in = layer.c_out, layer.c_in
        cells = mask.reshape(-1, 9)
        kept = np.flatnonzero(cells.any(axis=1))
        if layer.kind == LayerKind.DWCONV:
            k_out = kept
            k_in = kept
        else:
            k_out, k_in = np.divmod(kept, c_in)
        # group filters sharing one sequence of kernel masks
        sig = [cells[o * (c_in if layer.kind == LayerKind.CONV else 1):
                     (o + 1) * (c_in if layer.kind == LayerKind.CONV else 1)].tobytes()
               for o in range(c_out)]
        rank = reorder(sig).inverse
        order = np.lexsort((k_in, rank[k_out]))
        kept, k_out, k_in = kept[order], k_out[order], k_in[order]
        taps = cells[kept]
        if taps.size and not (taps.sum(axis=1) == 4).all():
            raise ValueError("pattern executor needs exactly 4 cells per kept kernel")
        self.k_out = np.ascontiguousarray(k_out, dtype=np.int_)
        self.k_in = np.ascontiguousarray(k_in, dtype=np.int_)
        self.tap_off = np.ascontiguousarray(np.nonzero(taps)[1].reshape(-1, 4), dtype=np.int_)
        self.tap_w = np.ascontiguousarray(weight.reshape(-1, 9)[kept][taps].reshape(-1, 4))
        self.bias = bias

    def __call__(self, x):
        xpad = _pad(x, self.layer.padding)
        out = np.empty(self.out_shape, dtype=x.dtype)
        out[:] = self.bias[:, None, None]
        kernels.pattern_conv(xpad, out, self.k_out, self.k_in, self.tap_off,
                             self.tap_w.astype(x.dtype, copy=False), self.layer.stride,
                             self.params.tile, self.params.unroll)
        return out


class BlockConv(Executor):
    """One GEMM per output-channel block over the kept im2col rows."""
    name = "block"

    def __init__(self, layer, weight, bias, pm: PruningMask, params):
        super().__init__(layer, params)
        spec = pm.block_spec
        c_out, c_in, n = layer.c_out, layer.c_in, layer.n
        ob, ib = c_out // spec.b_out, c_in // spec.b_in
        w2 = weight.reshape(c_out, c_in * n * n)
        m2 = pm.mask.reshape(c_out, c_in * n * n)
        self.groups = []
        for bo in range(spec.b_out):
            rows = slice(bo * ob, (bo + 1) * ob)
            idx = np.flatnonzero(m2[bo * ob])   # shared by every filter of the block row
            self.groups.append((rows, idx, np.ascontiguousarray(w2[rows][:, idx])))
        self.bias = bias

    def __call__(self, x):
        L = self.layer
        c_out, ho, wo = self.out_shape
        if L.n == 1:
            cols = np.ascontiguousarray(x[:, ::L.stride, ::L.stride]).reshape(L.c_in, -1)
        else:
            cols = kernels.im2col(_pad(x, L.padding), L.n, L.stride, ho, wo)
        out = np.empty((c_out, ho * wo), dtype=x.dtype)
        for rows, idx, w in self.groups:
            out[rows] = w @ cols[idx]
        out += self.bias[:, None]
        return out.reshape(self.out_shape)


class WinogradConv(Executor):
    name = "winograd"

    def __init__(self, layer, weight, bias, params, rows=None):
        super().__init__(layer, params)
        if not eligible(layer):
            raise WinogradEligibilityError(f"layer {layer.id} is not winograd-eligible")
        self.plan = WinogradPlan()
        self.rows = None if rows is None else np.asarray(rows)
        w = weight if self.rows is None else weight[self.rows]
        if layer.kind == LayerKind.DWCONV:
            self.u = self.plan.transform_kernel(weight)[:, :, 0].copy()
        else:
            self.u = self.plan.transform_kernel(w)
        self.bias = bias

    def __call__(self, x):
        xpad = _pad(x, 1)
        out = np.empty(self.out_shape, dtype=x.dtype)
        out[:] = self.bias[:, None, None]
        if self.layer.kind == LayerKind.DWCONV:
            out += winograd_depthwise(xpad, None, self.plan,
                                      transformed=self.u.astype(x.dtype, copy=False))
            return out
        if self.u.shape[1] == 0:
            return out
        y = winograd_conv(xpad, None, self.plan, transformed=self.u.astype(x.dtype, copy=False))
        if self.rows is None:
            out += y
        else:
            out[self.rows] += y
        return out


class DepthwiseConv(Executor):
    name = "depthwise"

    def __init__(self, layer, weight, bias, params):
        super().__init__(layer, params)
        self.w = weight.reshape(layer.c_out, layer.n * layer.n)
        self.bias = bias

    def __call__(self, x):
        L = self.layer
        n, s = L.n, L.stride
        c, ho, wo = self.out_shape
        xpad = _pad(x, L.padding)
        out = np.empty(self.out_shape, dtype=x.dtype)
        out[:] = self.bias[:, None, None]
        for p in range(n * n):
            dy, dx = divmod(p, n)
            win = xpad[:, dy:dy + (ho - 1) * s + 1:s, dx:dx + (wo - 1) * s + 1:s]
            out += self.w[:, p, None, None] * win
        return out


class DenseLayer(Executor):
    name = "fc"

    def __init__(self, layer, weight, bias, params):
        super().__init__(layer, params)
        self.w = weight
        self.bias = bias

    def __call__(self, x):
        v = x.mean(axis=(1, 2)) if x.ndim == 3 else x
        return (self.w @ v + self.bias).reshape(self.out_shape)


def build_executor(layer: LayerSpec, weight: np.ndarray, bias: np.ndarray | None = None,
                   mask: PruningMask | None = None, winograd: bool = False,
                   params: TuningParams | None = None, dtype=np.float32,
                   dense_path: bool = False) -> Executor:
    """Pick the execution path for a layer under its mask and Winograd flag.

    ``dense_path`` runs the masked weights on the dense path instead of the
    sparse one, for layers where the sparse code would be slower.
    """
    params = params or TuningParams()
    weight = np.asarray(weight)
    if mask is not None:
        weight = apply_mask(weight, mask)
    weight = weight.astype(dtype)
    bias = (np.zeros(layer.c_out) if bias is None else np.asarray(bias)).astype(dtype)
    sparse = mask is not None and not mask.mask.all() and not dense_path
    ptype = mask.ptype if sparse else None
    if layer.kind == LayerKind.DENSE:
        return DenseLayer(layer, weight, bias, params)
    if layer.kind == LayerKind.DWCONV:
        if winograd:
            return WinogradConv(layer, weight, bias, params)
        if ptype == PruningType.PATTERN:
            return PatternConv(layer, weight, bias, mask.mask, params)
        return DepthwiseConv(layer, weight, bias, params)
    if layer.kind != LayerKind.CONV:
        raise ValueError(f"no executor for {layer.kind.value}")
    rows = None
    if ptype == PruningType.FILTER:
        rows = np.flatnonzero(mask.mask.reshape(layer.c_out, -1).any(axis=1))
    if winograd:
        return WinogradConv(layer, weight, bias, params, rows=rows)
    if ptype == PruningType.PATTERN:
        return PatternConv(layer, weight, bias, mask.mask, params)
    if ptype == PruningType.BLOCK:
        return BlockConv(layer, weight, bias, mask, params)
    return GemmConv(layer, weight, bias, params, rows=rows)
