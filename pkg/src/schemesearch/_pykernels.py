"""Pure numpy/scipy implementations of the execution kernels.

Signatures match the compiled ``_ckernels`` module exactly; ``kernels``
picks one of the two at import time.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

BACKEND = "python"


def im2col(xpad, n, stride, ho, wo):
    c = xpad.shape[0]
    win = sliding_window_view(xpad, (n, n), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * n * n, ho * wo)


def winograd_input(xpad, th, tw):
    """Bt d B for every 4x4 tile (stride 2); returns (16, C, th*tw)."""
    c = xpad.shape[0]
    d = sliding_window_view(xpad, (4, 4), axis=(1, 2))[:, : 2 * th : 2, : 2 * tw : 2]
    r = np.empty_like(d)
    r[..., 0, :] = d[..., 0, :] - d[..., 2, :]
    r[..., 1, :] = d[..., 1, :] + d[..., 2, :]
    r[..., 2, :] = d[..., 2, :] - d[..., 1, :]
    r[..., 3, :] = d[..., 1, :] - d[..., 3, :]
    v = np.empty_like(r)
    v[..., 0] = r[..., 0] - r[..., 2]
    v[..., 1] = r[..., 1] + r[..., 2]
    v[..., 2] = r[..., 2] - r[..., 1]
    v[..., 3] = r[..., 1] - r[..., 3]
    return np.ascontiguousarray(v.transpose(3, 4, 0, 1, 2)).reshape(16, c, th * tw)


def winograd_output(m, th, tw):
    """At M A per tile; ``m`` is (16, C, th*tw), returns (C, 2*th, 2*tw)."""
    c = m.shape[1]
    m = m.reshape(4, 4, c, th, tw)
    r0 = m[0] + m[1] + m[2]
    r1 = m[1] - m[2] - m[3]
    y = np.empty((c, th, 2, tw, 2), dtype=m.dtype)
    y[:, :, 0, :, 0] = r0[0] + r0[1] + r0[2]
    y[:, :, 0, :, 1] = r0[1] - r0[2] - r0[3]
    y[:, :, 1, :, 0] = r1[0] + r1[1] + r1[2]
    y[:, :, 1, :, 1] = r1[1] - r1[2] - r1[3]
    return y.reshape(c, 2 * th, 2 * tw)


def pattern_conv(xpad, out, k_out, k_in, tap_off, tap_w, stride, tile, unroll):
    """Accumulate a pattern-sparse convolution into ``out`` (C_out, Ho, Wo).

    Each kept kernel k contributes 4 taps: offsets ``tap_off[k, t]`` index the
    flattened 3x3 window, weights ``tap_w[k, t]``.  Grouping taps by window
    position gives nine sparse (C_out x C_in) products.  ``tile`` and
    ``unroll`` only affect the compiled kernel.
    """
    c_out, ho, wo = out.shape
    c_in = xpad.shape[0]
    if len(k_out) == 0:
        return out
    rows = np.repeat(np.asarray(k_out), 4)
    cols = np.repeat(np.asarray(k_in), 4)
    offs = np.asarray(tap_off).ravel()
    vals = np.asarray(tap_w).ravel()
    flat = out.reshape(c_out, ho * wo)
    for p in range(9):
        sel = offs == p
        if not sel.any():
            continue
        wp = sparse.csr_matrix((vals[sel], (rows[sel], cols[sel])), shape=(c_out, c_in))
        dy, dx = divmod(p, 3)
        xs = xpad[:, dy : dy + (ho - 1) * stride + 1 : stride, dx : dx + (wo - 1) * stride + 1 : stride]
        flat += wp @ xs.reshape(c_in, ho * wo)
    return out
