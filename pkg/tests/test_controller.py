import math

import numpy as np
import pytest
import torch

from schemesearch import space
from schemesearch.controller import (Controller, ControllerConfig, Provenance, Reward,
                                     SchemeLayout, compute_reward)


def zero_controller(strides=(1,), **kw):
    ctl = Controller(SchemeLayout(strides), ControllerConfig(hidden_size=8, **kw))
    ctl.policy.reset_parameters(0.0, 0)
    return ctl


@pytest.mark.parametrize("a,t,r", [(0.76, 97, 0.76), (0.74, 108, 0.66), (0.50, 100, 0.50)])
def test_compute_reward(a, t, r):
    rew = compute_reward(a, t, ControllerConfig(alpha=0.01, latency_threshold=100))
    assert math.isclose(rew.value, r, abs_tol=1e-12)
    assert rew.provenance == Provenance.MEASURED


def test_compute_reward_rejects_bad_inputs():
    with pytest.raises(ValueError):
        compute_reward(1.2, 10, ControllerConfig())
    with pytest.raises(ValueError):
        compute_reward(0.5, float("nan"), ControllerConfig())


def test_zero_parameters_sample_uniformly():
    ctl = zero_controller()
    tokens, _ = ctl.sample_tokens(30000, seed=0)
    freq = np.bincount(tokens[:, 1], minlength=3) / len(tokens)
    assert np.all(np.abs(freq - 1 / 3) < 0.02)


def test_masked_tokens_have_zero_probability():
    ctl = zero_controller(strides=(1, 2))
    tokens, _ = ctl.sample_tokens(4000, seed=1)
    one_by_one = tokens[:, 1] == space.KernelChoice.K1x1
    assert one_by_one.any()
    assert not (tokens[one_by_one, 3] == space.PruningType.PATTERN).any()
    assert not tokens[:, 6].any()       # winograd never on the stride-2 layer
    lp = ctl.log_probs(tokens[one_by_one][:1])
    probs = torch.softmax(ctl._logits(torch.zeros(1, 8, dtype=torch.float64), 3,
                                      ctl.layout.allowed(3, tokens[one_by_one][:1, :3])), -1)
    assert probs[0, space.PruningType.PATTERN].item() == 0.0
    assert torch.isfinite(lp).all()


def test_sampling_is_deterministic():
    ctl = Controller(SchemeLayout([1, 1]), ControllerConfig(hidden_size=8), seed=3)
    a, la = ctl.sample(seed=11)
    b, lb = ctl.sample(seed=11)
    assert a == b
    np.testing.assert_array_equal(la, lb)


def test_sample_log_probs_match_scoring():
    ctl = Controller(SchemeLayout([1, 2]), ControllerConfig(hidden_size=8, init_range=1.0), seed=2)
    tokens, logp = ctl.sample_tokens(50, seed=4)
    with torch.no_grad():
        np.testing.assert_allclose(ctl.log_probs(tokens).numpy(), logp, atol=1e-12)


def test_zero_advantage_leaves_parameters():
    ctl = Controller(SchemeLayout([1]), ControllerConfig(hidden_size=8), seed=0)
    ctl.baseline = 0.5
    before = [p.detach().clone() for p in ctl.policy.parameters()]
    tokens, logp = ctl.sample_tokens(4, seed=0)
    ctl.reinforce_update([(t, lp, 0.5) for t, lp in zip(tokens, logp)])
    for p, q in zip(ctl.policy.parameters(), before):
        assert torch.equal(p.detach(), q)


def test_baseline_ema():
    ctl = Controller(SchemeLayout([1]), ControllerConfig(hidden_size=8, ema_decay=0.9))
    ctl.baseline = 0.5
    tokens, logp = ctl.sample_tokens(2, seed=0)
    ctl.reinforce_update([(tokens[0], logp[0], 0.6), (tokens[1], logp[1], 0.8)])
    assert math.isclose(ctl.baseline, 0.52, abs_tol=1e-12)
    assert ctl.step == 1


def test_first_update_baseline_is_batch_mean():
    ctl = Controller(SchemeLayout([1]), ControllerConfig(hidden_size=8))
    tokens, logp = ctl.sample_tokens(2, seed=0)
    ctl.reinforce_update([(tokens[0], logp[0], 0.2), (tokens[1], logp[1], 0.4)])
    assert math.isclose(ctl.baseline, 0.3, abs_tol=1e-12)


def test_update_errors():
    ctl = Controller(SchemeLayout([1]), ControllerConfig(hidden_size=8))
    with pytest.raises(ValueError):
        ctl.reinforce_update([])
    tokens, logp = ctl.sample_tokens(1, seed=0)
    with pytest.raises(ValueError, match="non-finite"):
        ctl.reinforce_update([(tokens[0], logp[0], Reward(0.5, 1.0, float("inf")))])


def test_checkpoint_round_trip(tmp_path):
    ctl = Controller(SchemeLayout([1, 2]), ControllerConfig(hidden_size=8), seed=5)
    tokens, logp = ctl.sample_tokens(3, seed=0)
    ctl.reinforce_update([(t, lp, r) for t, lp, r in zip(tokens, logp, (0.1, 0.5, 0.9))])
    path = tmp_path / "ctl.pt"
    ctl.save(path)
    back = Controller.load(path)
    assert back.step == 1 and back.baseline == ctl.baseline
    (a, la), (b, lb) = back.sample(seed=9), ctl.sample(seed=9)
    assert a == b
    np.testing.assert_array_equal(la, lb)


def test_config_validation():
    with pytest.raises(ValueError):
        ControllerConfig(batch_size=0)
    with pytest.raises(ValueError):
        ControllerConfig(ema_decay=1.0)
