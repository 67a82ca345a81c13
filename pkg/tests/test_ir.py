import numpy as np
import pytest

from schemesearch import ir
from schemesearch.ir import LayerKind, LayerSpec, ShapeError, TensorShape
from schemesearch.space import KernelChoice


def test_mac_count_examples():
    conv = LayerSpec(0, LayerKind.CONV, 16, 32, TensorShape(16, 8, 8), n=3, stride=1)
    assert ir.mac_count(conv) == 294912
    dw = LayerSpec(1, LayerKind.DWCONV, 16, 16, TensorShape(16, 4, 4), n=3, stride=1)
    assert ir.mac_count(dw) == 2304


def test_output_shape_stride_two():
    conv = LayerSpec(0, LayerKind.CONV, 8, 8, TensorShape(8, 9, 9), n=3, stride=2)
    assert conv.output_shape == TensorShape(8, 5, 5)


def test_shape_errors():
    with pytest.raises(ShapeError):
        TensorShape(0, 4, 4)
    bad = LayerSpec(0, LayerKind.CONV, 4, 8, TensorShape(3, 4, 4))
    with pytest.raises(ShapeError):
        bad.check()
    with pytest.raises(ShapeError):
        LayerSpec(0, LayerKind.CONV, 3, 8, TensorShape(3, 4, 4), n=5).check()
    with pytest.raises(ShapeError):
        LayerSpec(0, LayerKind.DWCONV, 3, 3, TensorShape(3, 4, 4), prunable=True).check()


def test_graph_validation_catches_mismatch(small_graph):
    layers = list(small_graph.layers)
    edges = list(small_graph.edges) + [(layers[-1].id, layers[0].id)]
    with pytest.raises(ShapeError):
        ir.ModelGraph(tuple(layers), tuple(edges)).validate()
    with pytest.raises(ShapeError):
        ir.ModelGraph((layers[1],), ()).validate()


def test_json_round_trip(small_graph):
    text = small_graph.to_json()
    assert ir.ModelGraph.from_json(text) == small_graph
    with pytest.raises(ValueError):
        ir.ModelGraph.from_json(text.replace('"version": 1', '"version": 99'))


def test_fuse_preserves_outputs(small_graph):
    w = ir.init_weights(small_graph, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    for lid, d in w.items():
        if "gamma" in d:
            c = d["gamma"].shape[0]
            d.update(gamma=rng.uniform(0.5, 2, c), beta=rng.normal(size=c),
                     mean=rng.normal(size=c), var=rng.uniform(0.5, 2, c))
    x = rng.normal(size=(4, 3, 8, 8))
    fused_graph, fused_w = ir.fuse(small_graph, w)
    assert not any(layer.kind == LayerKind.BN for layer in fused_graph.layers)
    fused_graph.validate()
    ref = ir.forward(small_graph, w, x)
    out = ir.forward(fused_graph, fused_w, x)
    assert np.max(np.abs(ref - out)) < 1e-6


def test_replace_kernel_1x1_takes_center(small_graph, small_weights):
    lid = small_graph.prunable_layers()[0].id
    g, w = ir.replace_kernel(small_graph, lid, KernelChoice.K1x1, small_weights)
    assert g.layer(lid).n == 1
    np.testing.assert_array_equal(w[lid]["weight"][:, :, 0, 0],
                                  small_weights[lid]["weight"][:, :, 1, 1])
    g.validate()
    assert ir.kernel_form(g, lid) == KernelChoice.K1x1


def test_replace_kernel_depthwise_param_count():
    conv = LayerSpec(0, LayerKind.CONV, 16, 32, TensorShape(16, 8, 8), n=3, prunable=True)
    g = ir.ModelGraph.chain([conv])
    w = ir.init_weights(g, seed=0)
    g2, w2 = ir.replace_kernel(g, 0, KernelChoice.DW3x3_then_1x1, w)
    assert g2.total_weights() == 16 * 9 + 16 * 32 == 656
    assert ir.kernel_form(g2, 0) == KernelChoice.DW3x3_then_1x1
    assert ir.depthwise_stage(g2, 0).kind == LayerKind.DWCONV
    g2.validate()
    y = ir.forward(g2, w2, np.ones((1, 16, 8, 8)))
    assert y.shape == (1, 32, 8, 8)


def test_replace_kernel_rejects_non_prunable(small_graph, small_weights):
    relu = next(layer for layer in small_graph.layers if layer.kind == LayerKind.RELU)
    with pytest.raises(ValueError):
        ir.replace_kernel(small_graph, relu.id, KernelChoice.K1x1, small_weights)


def test_weights_save_load(tmp_path, small_weights):
    p = tmp_path / "w.npz"
    ir.save_weights(p, small_weights)
    back = ir.load_weights(p)
    assert back.keys() == small_weights.keys()
    for k in back:
        for n in back[k]:
            np.testing.assert_array_equal(back[k][n], small_weights[k][n])
