import numpy as np
import pytest

from schemesearch import ir, pruning, trainer
from schemesearch.space import (KernelChoice, LayerActions, PruningMethod, PruningType,
                                UnifiedScheme, identity_scheme)
from schemesearch.trainer import EarlyStopper, TrainConfig

FAST = TrainConfig(base_epochs=4, replace_epochs=1, finetune_epochs=1, admm_epochs=1,
                   final_epochs=1, batch_size=32, learning_rate=2e-3)


@pytest.fixture(scope="module")
def base(tiny_data):
    g = ir.desk_model(channels=(8, 16), strides=(1, 2), image_size=8, num_classes=4)
    w, hist = trainer.train_base(g, tiny_data, FAST, seed=0)
    return g, w


def test_synthetic_dataset_is_deterministic_and_disjoint():
    a = trainer.synthetic_dataset(n_train=100, n_test=20, image_size=8, seed=3)
    b = trainer.synthetic_dataset(n_train=100, n_test=20, image_size=8, seed=3)
    np.testing.assert_array_equal(a.train.x, b.train.x)
    assert len(a.train) + len(a.val) == 100
    assert a.train.x.dtype == np.float32


def test_early_stopper_patience():
    s = EarlyStopper(3)
    stops = [s.update(v) for v in [1.0, 0.9, 0.95, 0.91, 0.92]]
    assert stops == [False, False, False, False, True]
    assert s.best_epoch == 1


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(finetune_epochs=-1)


def test_zero_epochs_leave_weights(base, tiny_data):
    g, w = base
    out, hist = trainer.train(g, w, tiny_data, FAST, 0)
    assert hist == []
    for lid in w:
        for k in w[lid]:
            np.testing.assert_array_equal(out[lid][k], w[lid][k])


def test_masks_stay_zero_during_training(base, tiny_data):
    g, w = base
    scheme = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.K3x3, False, PruningType.PATTERN, 0.7),
        LayerActions(KernelChoice.K3x3, False, PruningType.BLOCK, 0.5)))
    pw, masks = pruning.magnitude_prune(w, scheme, g)
    out, _ = trainer.train(g, pw, tiny_data, FAST, 2, masks=masks, early_stop=False)
    assert trainer.masks_match_weights(out, masks)


def test_training_divergence_is_reported(base, tiny_data):
    g, w = base
    bad = ir.copy_weights(w)
    lid = g.prunable_layers()[0].id
    bad[lid]["weight"] = bad[lid]["weight"] * np.float32(np.nan)
    with pytest.raises(trainer.TrainingDivergence, match="epoch 0, batch 0"):
        trainer.train(g, bad, tiny_data, FAST, 1)


def test_identity_scheme_evaluation(base, tiny_data, cost_model):
    g, w = base
    base_acc, _ = trainer.evaluate(g, w, tiny_data.test)
    out = trainer.evaluate_scheme(identity_scheme(g), w, g, tiny_data, FAST, cost_model)
    rec = out.record
    assert not rec.failed
    assert abs(rec.accuracy - base_acc) <= 0.005
    from schemesearch.latency import costmodel
    assert rec.latency_ms == pytest.approx(costmodel.estimate(g, None, {}, cost_model).total)
    assert rec.sparsity["overall"] == 0.0


def test_heavy_filter_pruning(base, tiny_data, cost_model):
    g, w = base
    scheme = UnifiedScheme(PruningMethod.MAGNITUDE, tuple(
        LayerActions(KernelChoice.K3x3, False, PruningType.FILTER, 0.9) for _ in range(2)))
    dense = trainer.evaluate_scheme(identity_scheme(g), w, g, tiny_data, FAST, cost_model)
    out = trainer.evaluate_scheme(scheme, w, g, tiny_data, FAST, cost_model)
    rec = out.record
    assert not rec.failed
    for pm in out.masks.values():
        assert abs(pm.achieved - 0.9) <= pruning.granule(pm) + 1e-12
        assert pruning.audit(pm) == []
    assert rec.latency_ms < dense.record.latency_ms
    assert trainer.masks_match_weights(out.weights, out.masks)


def test_admm_and_magnitude_are_both_clean(base, tiny_data, cost_model):
    g, w = base
    layers = (LayerActions(KernelChoice.K3x3, True, PruningType.PATTERN, 0.7),
              LayerActions(KernelChoice.K3x3, False, PruningType.BLOCK, 0.5))
    for method in PruningMethod:
        out = trainer.evaluate_scheme(UnifiedScheme(method, layers), w, g, tiny_data, FAST,
                                      cost_model)
        assert not out.record.failed, out.record.error
        assert all(pruning.audit(pm) == [] for pm in out.masks.values())


def test_kernel_replacement_scheme(base, tiny_data, cost_model):
    g, w = base
    scheme = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.DW3x3_then_1x1, True, PruningType.PATTERN, 0.5),
        LayerActions(KernelChoice.K1x1, False, PruningType.FILTER, 0.3)))
    out = trainer.evaluate_scheme(scheme, w, g, tiny_data, FAST, cost_model)
    assert not out.record.failed, out.record.error
    assert any(layer.kind == ir.LayerKind.DWCONV for layer in out.graph.layers)


def test_failure_sentinel(base, tiny_data, cost_model):
    g, w = base
    bad = UnifiedScheme(PruningMethod.MAGNITUDE, (
        LayerActions(KernelChoice.K3x3, False, PruningType.FILTER, 0.3),
        LayerActions(KernelChoice.K3x3, True, PruningType.FILTER, 0.3)))   # winograd at stride 2
    rec = trainer.evaluate_scheme(bad, w, g, tiny_data, FAST, cost_model).record
    assert rec.failed and rec.reward == trainer.FAILURE_REWARD
    assert "winograd" in rec.error
    assert trainer.EvalRecord.from_dict(rec.to_dict()) == rec
