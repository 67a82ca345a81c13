import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from schemesearch import space
from schemesearch.controller import Controller, ControllerConfig
from schemesearch.space import (KernelChoice, LayerActions, PruningMethod, PruningType,
                                SchemeStructureError, SchemeValidityError, UnifiedScheme)


def test_tokenize_example():
    s = UnifiedScheme(PruningMethod.ADMM,
                      (LayerActions(KernelChoice.K3x3, True, PruningType.PATTERN, 0.5),))
    assert space.tokenize(s, [1]) == [1, 1, 1, 1, 2]
    assert space.detokenize([1, 1, 1, 1, 2]) == s


def test_validate_reports_every_violation():
    s = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.K1x1, True, PruningType.PATTERN, 0.4),
        LayerActions(KernelChoice.K3x3, True, PruningType.FILTER, 0.3)))
    v = space.validate(s, [1, 2])
    assert len(v) == 4
    with pytest.raises(SchemeValidityError) as exc:
        space.tokenize(s, [1, 2])
    assert len(exc.value.violations) == 4
    with pytest.raises(SchemeStructureError):
        space.validate(s, [1])


def test_detokenize_rejects_bad_input():
    with pytest.raises(SchemeStructureError):
        space.detokenize([0, 1, 0])
    with pytest.raises(SchemeStructureError):
        space.detokenize([0, 3, 0, 0, 0])


def test_to_graph_node_counts():
    one = UnifiedScheme(PruningMethod.ADMM, (LayerActions(),))
    two = UnifiedScheme(PruningMethod.ADMM, (LayerActions(), LayerActions()))
    g1, g2 = space.to_graph(one), space.to_graph(two)
    assert len(g1.labels) == 5 and len(g1.edges) == 4
    assert len(g2.labels) == 9 and len(g2.edges) == 8


def test_space_sizes_and_enumeration():
    assert space.space_size([1]) == 2 * 84
    assert space.space_size([2]) == 2 * 48
    assert space.space_size([1, 1]) == 14112
    schemes = list(space.enumerate_schemes([1, 2]))
    assert len(schemes) == space.space_size([1, 2]) == 8064
    assert all(not space.validate(s, [1, 2]) for s in schemes)
    graphs = {space.to_graph(s) for s in schemes}
    assert len(graphs) == len(schemes)     # to_graph is injective


def test_json_round_trip():
    s = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.DW3x3_then_1x1, False, PruningType.BLOCK, 0.9),))
    assert UnifiedScheme.loads(s.dumps()) == s
    with pytest.raises(SchemeStructureError):
        UnifiedScheme.from_dict({"method": "admm", "layers": [{"kernel": "5x5"}]})


def test_identity_scheme(small_graph):
    s = space.identity_scheme(small_graph)
    assert not space.validate(s, small_graph)
    assert all(not a.prunes for a in s.per_layer)


strides = st.lists(st.sampled_from([1, 2]), min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(strides, st.integers(0, 2**31))
def test_random_scheme_round_trip(ss, seed):
    s = space.random_scheme(ss, np.random.default_rng(seed))
    assert not space.validate(s, ss)
    assert space.detokenize(space.tokenize(s, ss)) == s


@settings(max_examples=10, deadline=None)
@given(strides, st.integers(0, 1000))
def test_controller_samples_are_valid(ss, seed):
    from schemesearch.controller import SchemeLayout
    ctl = Controller(SchemeLayout(ss), ControllerConfig(hidden_size=8, init_range=2.0), seed=seed)
    for scheme, _, _ in ctl.sample_many(40, seed):
        assert space.validate(scheme, ss) == []
