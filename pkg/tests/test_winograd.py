import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schemesearch import winograd
from schemesearch.ir import LayerKind, LayerSpec, TensorShape
from schemesearch.winograd import WinogradEligibilityError, WinogradPlan


def naive_conv(x, k):
    c_out, c_in = k.shape[:2]
    ho, wo = x.shape[1] - 2, x.shape[2] - 2
    y = np.zeros((c_out, ho, wo))
    for o in range(c_out):
        for i in range(ho):
            for j in range(wo):
                s = 0.0
                for c in range(c_in):
                    for a in range(3):
                        for b in range(3):
                            s += x[c, i + a, j + b] * k[o, c, a, b]
                y[o, i, j] = s
    return y


def delta():
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    return k


def test_direct_conv_basics():
    rng = np.random.default_rng(0)
    assert not winograd.direct_conv(np.zeros((5, 5)), rng.normal(size=(3, 3))).any()
    x = rng.normal(size=(6, 7))
    np.testing.assert_array_equal(winograd.direct_conv(x, delta()), x[1:-1, 1:-1])
    x = rng.normal(size=(2, 4, 4))
    k = rng.normal(size=(3, 2, 3, 3))
    np.testing.assert_allclose(winograd.direct_conv(x, k), naive_conv(x, k), atol=1e-12)


def test_winograd_trivial_cases():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 4))
    assert not winograd.winograd_conv(x, np.zeros((3, 3))).any()
    np.testing.assert_allclose(winograd.winograd_conv(x, delta()), x[1:-1, 1:-1], atol=1e-15)


def test_winograd_matches_direct_large():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(16, 32, 32))
    k = rng.normal(size=(32, 16, 3, 3))
    ref = winograd.direct_conv(x, k)
    out = winograd.winograd_conv(x, k)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(3, 11), st.integers(3, 11), st.integers(1, 4), st.integers(1, 4),
       st.integers(0, 10**6))
def test_winograd_odd_sizes(h, w, c_in, c_out, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c_in, h, w))
    k = rng.normal(size=(c_out, c_in, 3, 3))
    np.testing.assert_allclose(winograd.winograd_conv(x, k), winograd.direct_conv(x, k),
                               atol=1e-10)


def test_winograd_depthwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 9, 8))
    k = rng.normal(size=(5, 1, 3, 3))
    ref = np.stack([winograd.direct_conv(x[c], k[c, 0]) for c in range(5)])
    np.testing.assert_allclose(winograd.winograd_depthwise(x, k), ref, atol=1e-12)


def test_stride_two_is_ineligible():
    with pytest.raises(WinogradEligibilityError):
        winograd.winograd_conv(np.zeros((1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)


def test_kernel_transform_cache():
    plan = WinogradPlan()
    k = np.random.default_rng(4).normal(size=(2, 2, 3, 3))
    u = plan.transform_kernel(k, key="a")
    assert plan.transform_kernel(np.zeros_like(k), key="a") is u
    assert u.shape == (16, 2, 2)


def test_arithmetic_ratio():
    plan = WinogradPlan()
    conv = LayerSpec(0, LayerKind.CONV, 16, 32, TensorShape(16, 8, 8), n=3)
    assert winograd.arithmetic_ratio(plan, conv) == 2.25
    pw = LayerSpec(0, LayerKind.CONV, 16, 32, TensorShape(16, 8, 8), n=1)
    with pytest.raises(WinogradEligibilityError):
        winograd.arithmetic_ratio(plan, pw)
    counts = winograd.transform_counts(plan, conv)
    assert counts["tiles"] == 16
