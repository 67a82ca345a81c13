import numpy as np
import pytest

from schemesearch import kernels
from schemesearch.latency.bench import conv_layer
from schemesearch.latency.executors import PatternConv, TuningParams
from schemesearch.pruning import project_pattern

BACKENDS = kernels.backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled kernels not built")


def test_active_backend_is_known():
    assert kernels.BACKEND in ("python", "cython")
    assert "python" in BACKENDS


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride", [1, 2])
def test_im2col_parity(dtype, stride):
    x = np.random.default_rng(0).normal(size=(5, 11, 9)).astype(dtype)
    ho, wo = (11 - 3) // stride + 1, (9 - 3) // stride + 1
    a = BACKENDS["python"].im2col(x, 3, stride, ho, wo)
    b = BACKENDS["cython"].im2col(x, 3, stride, ho, wo)
    np.testing.assert_array_equal(a, b)


@needs_compiled
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_winograd_transform_parity(dtype):
    rng = np.random.default_rng(1)
    th, tw = 3, 4
    x = rng.normal(size=(4, 2 * th + 2, 2 * tw + 2)).astype(dtype)
    va = BACKENDS["python"].winograd_input(x, th, tw)
    vb = BACKENDS["cython"].winograd_input(x, th, tw)
    np.testing.assert_allclose(va, vb, rtol=1e-6 if dtype == np.float32 else 1e-14)
    m = rng.normal(size=(16, 6, th * tw)).astype(dtype)
    ya = BACKENDS["python"].winograd_output(m, th, tw)
    yb = BACKENDS["cython"].winograd_output(m, th, tw)
    np.testing.assert_allclose(ya, yb, rtol=1e-5 if dtype == np.float32 else 1e-13, atol=1e-6)


@needs_compiled
@pytest.mark.parametrize("stride", [1, 2])
def test_pattern_conv_parity(stride):
    rng = np.random.default_rng(2)
    layer = conv_layer(8, 8, 9, stride=stride)
    w = rng.normal(size=layer.weight_shape())
    ex = PatternConv(layer, w, np.zeros(8), project_pattern(w, 0.7).mask, TuningParams())
    xpad = np.pad(rng.normal(size=(8, 9, 9)), ((0, 0), (1, 1), (1, 1)))
    outs = []
    for name in ("python", "cython"):
        out = np.zeros(ex.out_shape)
        BACKENDS[name].pattern_conv(xpad, out, ex.k_out, ex.k_in, ex.tap_off, ex.tap_w,
                                    stride, 16, 4)
        outs.append(out)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
