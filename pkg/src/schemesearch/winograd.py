"""Winograd F(2x2, 3x3) convolution and a direct-convolution reference."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels
from .ir import LayerKind, LayerSpec

BT = np.array([[1, 0, -1, 0],
               [0, 1, 1, 0],
               [0, -1, 1, 0],
               [0, 1, 0, -1]], dtype=np.float64)
G = np.array([[1.0, 0.0, 0.0],
              [0.5, 0.5, 0.5],
              [0.5, -0.5, 0.5],
              [0.0, 0.0, 1.0]])
AT = np.array([[1, 1, 1, 0],
               [0, 1, -1, -1]], dtype=np.float64)

MULS_DIRECT_PER_TILE = 36   # 2x2 outputs x 9 taps
MULS_WINOGRAD_PER_TILE = 16  # one 4x4 elementwise product


class WinogradEligibilityError(ValueError):
    pass


@dataclass
class WinogradPlan:
    """F(2x2, 3x3) constants plus a per-layer cache of transformed kernels."""
    m: int = 2
    r: int = 3
    bt: np.ndarray = field(default_factory=lambda: BT.copy())
    g: np.ndarray = field(default_factory=lambda: G.copy())
    at: np.ndarray = field(default_factory=lambda: AT.copy())
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def tile(self) -> int:
        return self.m + self.r - 1

    def transform_kernel(self, kernel: np.ndarray, key=None) -> np.ndarray:
        """G g G^T for every 3x3 slice; result has shape (16, C_out, C_in)."""
        if key is not None and key in self._cache:
            return self._cache[key]
        k = np.asarray(kernel)
        if k.ndim == 2:
            k = k[None, None]
        u = np.einsum("ij,ocjk,lk->ocil", self.g, k, self.g)
        u = np.ascontiguousarray(u.transpose(2, 3, 0, 1)).reshape(16, k.shape[0], k.shape[1])
        u = u.astype(k.dtype, copy=False)
        if key is not None:
            self._cache[key] = u
        return u


def eligible(layer: LayerSpec) -> bool:
    return layer.kind in (LayerKind.CONV, LayerKind.DWCONV) and layer.n == 3 and layer.stride == 1


def direct_conv(x: np.ndarray, kernel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid cross-correlation.  ``x`` is (C_in, H, W) or (H, W);
    ``kernel`` is (C_out, C_in, 3, 3) or (3, 3)."""
    x = np.asarray(x)
    k = np.asarray(kernel)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if k.ndim == 2:
        k = k[None, None]
    if k.shape[1] != x.shape[0]:
        raise ValueError(f"kernel expects {k.shape[1]} input channels, input has {x.shape[0]}")
    n = k.shape[-1]
    if x.shape[1] < n or x.shape[2] < n:
        raise ValueError("input smaller than kernel")
    win = sliding_window_view(x, (n, n), axis=(1, 2))[:, ::stride, ::stride]
    out = np.einsum("chwij,ocij->ohw", win, k, optimize=True)
    return out[0] if squeeze and out.shape[0] == 1 else out


def winograd_conv(x: np.ndarray, kernel: np.ndarray, plan: WinogradPlan | None = None,
                  stride: int = 1, transformed: np.ndarray | None = None) -> np.ndarray:
    """Valid 3x3 convolution via F(2x2, 3x3) tiles overlapping by 2 pixels.

    Inputs whose output size is odd are zero-padded on the bottom/right and
    the surplus row/column is cropped.
    """
    if stride != 1:
        raise WinogradEligibilityError("winograd requires stride 1")
    plan = plan or WinogradPlan()
    x = np.asarray(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    c, h, w = x.shape
    if kernel is None:
        if transformed is None:
            raise ValueError("need a kernel or its transform")
        k = np.empty((transformed.shape[1], c, 3, 3), dtype=transformed.dtype)
    else:
        k = np.asarray(kernel)
    if k.ndim == 2:
        k = k[None, None]
    if k.shape[-1] != 3 or k.shape[-2] != 3:
        raise WinogradEligibilityError("winograd requires a 3x3 kernel")
    if k.shape[1] != c:
        raise ValueError(f"kernel expects {k.shape[1]} input channels, input has {c}")
    ho, wo = h - 2, w - 2
    if ho < 1 or wo < 1:
        raise ValueError("input smaller than kernel")
    th, tw = (ho + 1) // 2, (wo + 1) // 2
    dtype = np.result_type(x.dtype, k.dtype)
    xp = np.zeros((c, 2 * th + 2, 2 * tw + 2), dtype=dtype)
    xp[:, :h, :w] = x
    u = transformed if transformed is not None else plan.transform_kernel(k.astype(dtype))
    v = kernels.winograd_input(xp, th, tw)                 # (16, C_in, T)
    m = np.matmul(u, v)                                     # (16, C_out, T)
    y = kernels.winograd_output(m, th, tw)[:, :ho, :wo]
    return y[0] if squeeze and y.shape[0] == 1 else y


def winograd_depthwise(x: np.ndarray, kernel: np.ndarray, plan: WinogradPlan | None = None,
                       transformed: np.ndarray | None = None) -> np.ndarray:
    """Depthwise variant: ``kernel`` is (C, 1, 3, 3), products stay per channel."""
    plan = plan or WinogradPlan()
    c, h, w = x.shape
    ho, wo = h - 2, w - 2
    th, tw = (ho + 1) // 2, (wo + 1) // 2
    kdt = (kernel if kernel is not None else transformed).dtype
    xp = np.zeros((c, 2 * th + 2, 2 * tw + 2), dtype=np.result_type(x.dtype, kdt))
    xp[:, :h, :w] = x
    u = transformed if transformed is not None else plan.transform_kernel(kernel)[:, :, 0]
    v = kernels.winograd_input(xp, th, tw)                 # (16, C, T)
    m = np.ascontiguousarray(u[:, :, None] * v)
    return kernels.winograd_output(m, th, tw)[:, :ho, :wo]


def arithmetic_ratio(plan: WinogradPlan, layer: LayerSpec) -> float:
    """Direct over Winograd multiplications per 2x2 output tile (2.25 for F(2,3))."""
    if not eligible(layer):
        raise WinogradEligibilityError(
            f"layer {layer.id} ({layer.kind.value}, n={layer.n}, stride={layer.stride}) "
            "is not winograd-eligible")
    return (plan.m ** 2 * plan.r ** 2) / plan.tile ** 2


def transform_counts(plan: WinogradPlan, layer: LayerSpec) -> dict:
    """Tile count and add counts of the input/output transforms for one layer."""
    if not eligible(layer):
        raise WinogradEligibilityError(f"layer {layer.id} is not winograd-eligible")
    out = layer.output_shape
    tiles = -(-out.height // plan.m) * -(-out.width // plan.m)
    # Bt d B: 2 passes of 4x4 adds; At M A: 24 adds per tile
    return {"tiles": tiles,
            "input_adds": tiles * layer.c_in * 32,
            "output_adds": tiles * layer.c_out * 24}
