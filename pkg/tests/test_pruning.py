import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schemesearch import ir, pruning
from schemesearch.pruning import BlockSpec, PruningError
from schemesearch.space import (KernelChoice, LayerActions, PruningMethod, PruningType,
                                UnifiedScheme)


def filters_with_norms(norms, c_in=2):
    w = np.zeros((len(norms), c_in, 3, 3))
    for i, n in enumerate(norms):
        w[i, 0, 1, 1] = n
    return w


def test_filter_ratio_zero_keeps_all():
    assert pruning.project_filter(np.ones((4, 2, 3, 3)), 0.0).mask.all()


def test_filter_smallest_norms_pruned():
    pm = pruning.project_filter(filters_with_norms([3, 1, 2, 4]), 0.5)
    pruned = {i for i in range(4) if not pm.mask[i].any()}
    assert pruned == {1, 2}
    assert pruning.audit(pm) == []


def test_filter_rounding():
    pm = pruning.project_filter(np.random.default_rng(0).normal(size=(10, 3, 3, 3)), 0.3)
    assert (~pm.mask.reshape(10, -1).any(axis=1)).sum() == 3
    assert pm.achieved == pytest.approx(0.3)


def test_filter_refuses_to_prune_everything():
    with pytest.raises(PruningError, match="cannot prune all filters"):
        pruning.project_filter(np.ones((2, 1, 3, 3)), 0.8)


def test_round_half_away():
    assert pruning.round_half_away(4.5) == 5
    assert pruning.round_half_away(2.5) == 3
    assert pruning.round_half_away(0.1 * 5) == 1


def test_pattern_keeps_dominant_cells():
    w = np.full((1, 1, 3, 3), 0.01)
    for cell in (0, 2, 4, 6):
        w.flat[cell] = 5.0
    lib = tuple(int(c) for c in pruning.top4_codes(w))
    pm = pruning.project_pattern(w, 0.3, lib)
    assert np.flatnonzero(pm.mask.ravel()).tolist() == [0, 2, 4, 6]


def test_pattern_ratio_and_library():
    w = np.random.default_rng(1).normal(size=(8, 8, 3, 3))
    pm = pruning.project_pattern(w, 0.8)
    g = pruning.granule(pm)
    assert 0.8 <= pm.achieved < 0.8 + g
    nnz = pm.mask.reshape(-1, 9).sum(axis=1)
    assert set(np.unique(nnz)) <= {0, 4}
    assert pruning.audit(pm) == [] and pruning.ratio_violations(pm) == []
    assert len(pm.library) <= pruning.MAX_PATTERNS


def test_pattern_rejects_1x1():
    with pytest.raises(PruningError):
        pruning.project_pattern(np.ones((4, 4, 1, 1)), 0.5)


def test_block_keeps_five_positions():
    w = np.random.default_rng(2).normal(size=(4, 4, 3, 3))
    pm = pruning.project_block(w, 0.5, BlockSpec(2, 2))
    per_kernel = pm.mask.reshape(16, 9).sum(axis=1)
    assert (per_kernel == 5).all()
    for bo in range(2):
        for bi in range(2):
            blk = pm.mask[2 * bo:2 * bo + 2, 2 * bi:2 * bi + 2]
            assert (blk == blk[0, 0]).all()
    assert pruning.audit(pm) == []


def test_block_1x1_shares_input_columns():
    w = np.random.default_rng(3).normal(size=(8, 8, 1, 1))
    pm = pruning.project_block(w, 0.5, BlockSpec(4, 4))
    assert pruning.audit(pm) == [] and pruning.ratio_violations(pm) == []


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([PruningType.FILTER, PruningType.PATTERN, PruningType.BLOCK]),
       st.sampled_from([0.0, 0.3, 0.5, 0.7, 0.8, 0.9]),
       st.integers(2, 12), st.integers(1, 12), st.integers(0, 10**6))
def test_projection_audit_property(ptype, ratio, c_out, c_in, seed):
    w = np.random.default_rng(seed).normal(size=(c_out, c_in, 3, 3))
    try:
        pm = pruning.project(w, ptype, ratio)
    except PruningError:
        assert ptype == PruningType.FILTER
        assert pruning.round_half_away(ratio * c_out) >= c_out
        return
    assert pruning.audit(pm) == []
    assert pruning.ratio_violations(pm) == []


def three_layer():
    g = ir.desk_model(channels=(8, 8, 8), strides=(1, 1, 1), image_size=6)
    return g, ir.init_weights(g, seed=0, dtype=np.float64)


def test_magnitude_prune_matches_independent_projections():
    g, w = three_layer()
    scheme = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.K3x3, False, PruningType.FILTER, 0.5),
        LayerActions(KernelChoice.K3x3, False, PruningType.PATTERN, 0.7),
        LayerActions(KernelChoice.K3x3, False, PruningType.BLOCK, 0.3)))
    pw, masks = pruning.magnitude_prune(w, scheme, g)
    ids = [layer.id for layer in g.prunable_layers()]
    ref = [pruning.project_filter(w[ids[0]]["weight"], 0.5),
           pruning.project_pattern(w[ids[1]]["weight"], 0.7),
           pruning.project_block(w[ids[2]]["weight"], 0.3)]
    for lid, pm in zip(ids, ref):
        np.testing.assert_array_equal(masks[lid].mask, pm.mask)
        np.testing.assert_array_equal(pw[lid]["weight"], w[lid]["weight"] * pm.mask)


def test_magnitude_prune_identity():
    g, w = three_layer()
    from schemesearch.space import identity_scheme
    pw, masks = pruning.magnitude_prune(w, identity_scheme(g), g)
    assert masks == {}
    for lid in w:
        for k in w[lid]:
            np.testing.assert_array_equal(pw[lid][k], w[lid][k])


def test_admm_zero_rounds_is_magnitude():
    g, w = three_layer()
    scheme = UnifiedScheme(PruningMethod.ADMM, tuple(
        LayerActions(KernelChoice.K3x3, False, PruningType.FILTER, 0.5) for _ in range(3)))
    res = pruning.admm_prune(w, scheme, g, pruning.AdmmConfig(rho=0.0, prune_epochs=0),
                             w_step=lambda *a: pytest.fail("no W-step expected"))
    _, masks = pruning.magnitude_prune(w, scheme, g)
    for lid in masks:
        np.testing.assert_array_equal(res.masks[lid].mask, masks[lid].mask)


def test_admm_toy_keeps_larger_coordinate():
    w = {0: {"weight": np.array([1.0, 0.1])}}

    def keep_one(lid, v):
        m = np.zeros(2, dtype=bool)
        m[np.argmax(np.abs(v))] = True
        return pruning.PruningMask(m, PruningType.FILTER, 0.5)

    w0 = w[0]["weight"].copy()

    def w_step(weights, targets, rho):
        # argmin ||w - w0||^2 + rho/2 ||w - t||^2
        return {0: {"weight": (2 * w0 + rho * targets[0]) / (2 + rho)}}

    first = pruning.admm_iterate(w, keep_one, w_step, rho=1.0, rounds=0)
    assert first.masks[0].mask.tolist() == [True, False]
    res = pruning.admm_iterate(w, keep_one, w_step, rho=1.0, rounds=20)
    assert res.masks[0].mask.tolist() == [True, False]
    assert res.weights[0]["weight"][1] == 0.0


def test_admm_divergence_is_reported():
    w = {0: {"weight": np.ones((2, 1, 3, 3))}}
    proj = lambda lid, v: pruning.project_filter(v, 0.5)
    with pytest.raises(FloatingPointError):
        pruning.admm_iterate(w, proj, lambda ws, t, r: {0: {"weight": ws[0]["weight"] * np.nan}},
                             1e-3, 2)


def test_sparsity_report():
    full = np.ones((4, 4, 3, 3), dtype=bool)
    assert pruning.sparsity_report({0: full}).overall == 0.0
    a = np.ones(100, dtype=bool)
    a[:80] = False
    b = np.ones(100, dtype=bool)
    b[:90] = False
    rep = pruning.sparsity_report({0: a, 1: b})
    assert rep.overall == pytest.approx(0.85)
    assert rep.per_layer == {0: 0.8, 1: 0.9}
