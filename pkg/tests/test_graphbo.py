import math
import warnings

import numpy as np
import pytest

from schemesearch import graphbo, space
from schemesearch.graphbo import WLConfig
from schemesearch.space import SchemeGraph


def path(labels):
    return SchemeGraph(tuple(labels), tuple((i, i + 1) for i in range(len(labels) - 1)))


def test_single_node_histogram():
    feats = graphbo.wl_features(SchemeGraph((0,), ()), 0, graphbo.LabelDictionary())
    assert len(feats) == 1 and sum(feats[0].values()) == 1


def test_path_refines_to_distinct_labels():
    feats = graphbo.wl_features(path([0, 1, 2]), 1, graphbo.LabelDictionary())
    assert len(feats) == 2
    assert len(feats[1]) == 3 and set(feats[1].values()) == {1}


def test_kernel_values():
    g = path([10, 11, 12, 13, 14])
    assert graphbo.wl_kernel(g, g, WLConfig(iterations=0, weights=(1.0,))) == 5
    h = path([20, 21, 22])
    for H in (0, 1, 2):
        assert graphbo.wl_kernel(g, h, WLConfig(iterations=H)) == 0


def test_wl_config_validation():
    with pytest.raises(ValueError):
        WLConfig(iterations=-1)
    with pytest.raises(ValueError):
        WLConfig(iterations=1, weights=(1.0,))


def schemes(n, seed=0, strides=(1, 2)):
    rng = np.random.default_rng(seed)
    return [space.random_scheme(list(strides), rng) for _ in range(n)]


def test_empty_gp_is_prior():
    gp = graphbo.gp_fit([])
    mu, sd = gp.predict(schemes(3))
    np.testing.assert_array_equal(mu, 0.0)
    np.testing.assert_array_equal(sd, 1.0)


def test_single_observation_interpolates():
    s = schemes(1)[0]
    gp = graphbo.gp_fit([(s, 0.37)], noise=1e-12)
    mu, _ = gp.predict([s])
    assert abs(mu[0] - 0.37) < 1e-8


def test_gp_rejects_non_finite():
    with pytest.raises(ValueError):
        graphbo.gp_fit([(schemes(1)[0], float("nan"))])


def test_expected_improvement():
    assert graphbo.expected_improvement(0.3, 0.0, 0.3, xi=0.0) == 0.0
    assert abs(graphbo.expected_improvement(0.5, 1.0, 0.5, xi=0.0) - 0.3989) < 1e-4
    rng = np.random.default_rng(0)
    for _ in range(200):
        mu, sd, best = rng.normal(), abs(rng.normal()), rng.normal()
        assert graphbo.expected_improvement(mu, sd, best) >= 0.0


def test_rank_by_ei_top_b():
    chosen, rest = graphbo.rank_by_ei([0.5, 0.1, 0.3], [0, 0, 0], 2)
    assert chosen == [0, 2] and rest == [1]


def test_select_batch_b_equals_k():
    obs = [(s, float(i) / 10) for i, s in enumerate(schemes(5, seed=1))]
    gp = graphbo.gp_fit(obs)
    pool = schemes(6, seed=2)
    sel = graphbo.select_batch(gp, pool, 6)
    assert sel.selected == list(range(6)) and sel.surrogate == {}


def test_select_batch_surrogates_are_clamped_means():
    obs = [(s, float(i)) for i, s in enumerate(schemes(6, seed=3))]
    gp = graphbo.gp_fit(obs)
    pool = schemes(8, seed=4)
    sel = graphbo.select_batch(gp, pool, 3, clamp=(-1.0, 1.0))
    assert len(sel.selected) == 3 and len(sel.surrogate) == 5
    mu, _ = gp.predict(pool)
    for i, v in sel.surrogate.items():
        assert v == pytest.approx(float(np.clip(mu[i], -1, 1)))
    assert not set(sel.selected) & set(sel.surrogate)


def test_empty_gp_selection_warns():
    with pytest.warns(RuntimeWarning):
        sel = graphbo.select_batch(graphbo.gp_fit([]), schemes(5), 2)
    assert sel.prior_only and sel.selected == [0, 1]
    assert sel.surrogate == {2: 0.0, 3: 0.0, 4: 0.0}
    with pytest.raises(ValueError):
        graphbo.select_batch(graphbo.gp_fit([]), schemes(2), 3)


def test_duplicate_observations_need_no_manual_jitter():
    s = schemes(1)[0]
    gp = graphbo.gp_fit([(s, 0.1), (s, 0.2)], noise=0.0)
    assert gp.jitter > 0
    mu, _ = gp.predict([s])
    assert math.isclose(mu[0], 0.15, abs_tol=1e-3)
