import numpy as np
import pytest

from schemesearch import ir


@pytest.fixture
def small_graph():
    return ir.desk_model(channels=(8, 16), strides=(1, 2), image_size=8)


@pytest.fixture
def small_weights(small_graph):
    return ir.init_weights(small_graph, seed=0, dtype=np.float64)


LINEAR_COEF = (0.01, 1e-7, 1e-6, 1e-6)


def linear_cost_model(seed: int = 0):
    """Cost model fitted to latencies generated exactly by ``LINEAR_COEF``."""
    from schemesearch.latency import costmodel
    from schemesearch.latency.bench import conv_layer
    from schemesearch.pruning import PruningError, project
    from schemesearch.space import PruningType

    rng = np.random.default_rng(seed)
    samples = []
    for kind in ("conv3", "conv1", "dw"):
        for ptype in (None, *PruningType):
            for wino in (False, True):
                if wino and kind == "conv1":
                    continue
                if ptype == PruningType.PATTERN and kind == "conv1":
                    continue
                for c in (4, 8, 16, 32):
                    for size in (4, 8, 12):
                        for ratio in (0.3, 0.5, 0.7, 0.9):
                            layer = conv_layer(c, 2 * c if kind != "dw" else c, size,
                                               n=1 if kind == "conv1" else 3,
                                               depthwise=kind == "dw")
                            w = rng.normal(size=layer.weight_shape())
                            try:
                                mask = None if ptype is None else project(w, ptype, ratio)
                                f = costmodel.layer_features(layer, mask, wino)
                            except (PruningError, costmodel.CostModelError):
                                continue
                            samples.append((f, float(np.dot(LINEAR_COEF, f.row()))))
    for c in (8, 16, 32, 64, 128):
        for k in (10, 20, 100):
            layer = ir.LayerSpec(0, ir.LayerKind.DENSE, c, k, ir.TensorShape(c, 1, 1))
            f = costmodel.layer_features(layer)
            samples.append((f, float(np.dot(LINEAR_COEF, f.row()))))
    return costmodel.calibrate(samples, holdout=0.0)


@pytest.fixture(scope="session")
def cost_model():
    return linear_cost_model()


@pytest.fixture(scope="session")
def tiny_data():
    from schemesearch.trainer import synthetic_dataset
    return synthetic_dataset(n_train=240, n_test=120, num_classes=4, image_size=8,
                             noise=1.0, seed=0)
