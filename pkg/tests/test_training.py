import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablegnn import autodiff as ad
from stablegnn.autodiff import Parameter, Tensor
from stablegnn.environments import BiasSpec, EnvironmentSet, biased_select, build_environments, split_nodes
from stablegnn.graph import generate_synthetic
from stablegnn.layers import BackboneParams, ForwardConfig, WeightPredictor, forward_backbone
from stablegnn.metrics import accuracy
from stablegnn.training import (LossBreakdown, TrainConfig, TrainingDiverged, combined_loss, env_subloss,
                                global_regularizer, local_regularizer, pairwise_gap_sum, predict_logits,
                                train_baseline, train_stable)

from conftest import check_grads, random_graph


def small_problem(seed=0, n=300, fd=20, signal=0.5, k=2):
    g = generate_synthetic(n, 2, fd, 0.05, 0.01, signal, seed)
    spec = BiasSpec("label", 0.8, seed=seed)
    train, _ = split_nodes(n, 0.5, seed)
    m0 = biased_select(g, train, spec, np.random.SeedSequence([seed, 1]))
    return g, m0, build_environments(g, m0, spec, k, seed)


# ---------------------------------------------------------------- regularizers


def test_local_regularizer_examples():
    a0 = [Tensor([0.4])]
    assert abs(float(local_regularizer(a0, [[Tensor([0.6])]], normalize=False).value) - 0.04) < 1e-15
    same = [Tensor([0.1, 0.9])]
    assert float(local_regularizer(same, [[Tensor([0.1, 0.9])], [Tensor([0.1, 0.9])]]).value) == 0.0
    with pytest.raises(ValueError, match="mismatch"):
        local_regularizer(a0, [[Tensor([0.1, 0.2])]])


def test_local_regularizer_normalisation():
    a0 = [Tensor([0.0, 0.0]), Tensor([0.0, 0.0])]
    cached = [[Tensor([1.0, 1.0]), Tensor([1.0, 1.0])]] * 3
    assert float(local_regularizer(a0, cached, normalize=False).value) == 12.0
    assert float(local_regularizer(a0, cached).value) == 12.0 / (2 * 3 * 2)


def test_local_regularizer_gradient_and_detach(rng):
    a0 = Parameter(rng.uniform(0, 1, 6))
    ae = Parameter(rng.uniform(0, 1, 6))
    assert check_grads(lambda: local_regularizer([a0], [[ae]]), [a0]) <= 1e-4
    a0.grad = ae.grad = None
    local_regularizer([a0], [[ae]]).backward()
    assert ae.grad is None
    np.testing.assert_allclose(a0.grad, 2 * (a0.value - ae.value) / 6)


def test_env_subloss_examples():
    per = Tensor([1.0, 1.0, 3.0, 3.0])
    sub = env_subloss(per, [np.arange(4), np.array([0, 1]), np.array([2, 3]), np.array([1, 2])])
    np.testing.assert_allclose(sub.value, [2.0, 1.0, 3.0, 2.0])
    with pytest.raises(ValueError):
        env_subloss(per, [np.array([], dtype=int)])


def test_env_subloss_gradient(rng):
    per = Parameter(rng.uniform(0, 3, 7))
    sets = [np.arange(7), np.array([0, 2, 4]), np.array([1, 2, 6])]
    w = rng.uniform(-1, 1, 3)
    assert check_grads(lambda: ad.sum(ad.mul(env_subloss(per, sets), w)), [per]) <= 1e-4


def test_global_regularizer_examples():
    assert float(global_regularizer(Tensor([1.0, 3.0])).value) == 4.0
    assert float(global_regularizer(Tensor([2.5, 2.5, 2.5])).value) == 0.0
    with pytest.warns(UserWarning):
        assert float(global_regularizer(Tensor([1.0])).value) == 0.0


def test_global_regularizer_gradient(rng):
    for _ in range(20):
        x = Parameter(rng.uniform(0, 10, int(rng.integers(2, 8))))
        assert check_grads(lambda: global_regularizer(x), [x]) <= 1e-4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=2, max_size=10))
def test_pairwise_gap_identity(losses):
    v = np.array(losses)
    rhs = len(v) * np.sum((v - v.mean()) ** 2)
    assert abs(float(global_regularizer(Tensor(v)).value) - rhs) <= 1e-10
    assert abs(pairwise_gap_sum(v) - rhs) <= 1e-10


def test_combined_loss_values_and_nan():
    parts = Tensor(2.0), Tensor(3.0), Tensor(4.0)
    assert float(combined_loss(*parts, 1.0, 1.0).value) == 9.0
    assert combined_loss(*parts, 0.0, 0.0) is parts[0]
    for lam in (10.0, 100.0):
        assert float(combined_loss(*parts, lam, 2.0).value) == 2.0 + 3.0 * lam + 8.0
    with pytest.raises(TrainingDiverged, match="local"):
        combined_loss(Tensor(1.0), Tensor(float("nan")), Tensor(0.0), 1.0, 1.0)


def test_loss_breakdown_record():
    rec = LossBreakdown(3, 1.0, 0.5, 0.25, 1.75, [1.0, 0.8, 1.3])
    assert rec.to_record() == {"epoch": 3, "pred": 1.0, "local": 0.5, "global": 0.25, "total": 1.75,
                               "per_env_sublosses": [1.0, 0.8, 1.3]}
    assert rec.max_gap == pytest.approx(0.5)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lambda0=-1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------- training loop contracts


def test_backbone_frozen_during_inner_phase():
    g, _, envs = small_problem(1)
    snapshot = {}

    def after_outer(rec, params, predictors):
        snapshot["theta"] = [w.value.copy() for w in params.weights]
        snapshot["a0"] = [v.value.copy() for v in predictors[0].vectors]

    seen = []

    def after_inner(epoch, env, params, predictors):
        assert all(w.requires_grad is False for w in params.weights)
        if "theta" in snapshot:
            for w, old in zip(params.weights, snapshot["theta"]):
                assert np.array_equal(w.value, old)
            for v, old in zip(predictors[0].vectors, snapshot["a0"]):
                assert np.array_equal(v.value, old)
        seen.append((epoch, env))

    train_stable(g, envs, TrainConfig(epochs=4, hidden=8, seed=1), after_outer, after_inner)
    assert seen == [(e, k) for e in range(4) for k in (1, 2)]


def test_cached_weights_are_gradient_inert(rng):
    g = random_graph(rng, 10, 0.3, feature_dim=3)
    dims = [3, 4, 2]
    params = BackboneParams.init(dims, rng)
    preds = [WeightPredictor.init(dims, rng, env=e) for e in range(3)]
    cfg = ForwardConfig(dropout=0.0, input_dropout=0.0)
    cached = [[a.detach() for a in forward_backbone(g, e, params, preds, config=cfg).alphas] for e in (1, 2)]
    out = forward_backbone(g, 0, params, preds, config=cfg)
    mask = np.ones(10, dtype=bool)
    pred, per = ad.masked_cross_entropy(out.logits, g.labels, mask)
    sub = env_subloss(per, [np.arange(10), np.arange(5), np.arange(5, 10)])
    combined_loss(pred, local_regularizer(out.alphas, cached), global_regularizer(sub), 1.0, 1.0).backward()
    for p in preds[1].parameters() + preds[2].parameters():
        assert p.grad is None or not p.grad.any()
    assert any(p.grad is not None and p.grad.any() for p in preds[0].parameters())


def test_final_gap_smaller_with_global_term():
    for seed in range(3):
        g, _, envs = small_problem(seed)
        gaps = []
        for lam1 in (0.0, 1.0):
            cfg = TrainConfig(lambda1=lam1, epochs=60, hidden=16, weight_decay=5e-4, seed=seed)
            gaps.append(train_stable(g, envs, cfg).log[-1].max_gap)
        assert gaps[1] < gaps[0], (seed, gaps)


def test_reduction_to_gat_is_bit_identical():
    g, m0, _ = small_problem(2)
    envs = EnvironmentSet([m0])
    cfg = TrainConfig(lambda0=0.0, lambda1=0.0, epochs=20, hidden=8, seed=2)
    traj = {"stable": [], "gat": []}

    def rec(name):
        return lambda r, params, preds: traj[name].append(
            [w.value.copy() for w in params.weights] + [v.value.copy() for v in preds[0].vectors])

    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_stable(g, envs, cfg, rec("stable"))
    train_baseline(g, m0, cfg, "gat", rec("gat"))
    assert len(traj["stable"]) == 20
    for a, b in zip(traj["stable"], traj["gat"]):
        for x, y in zip(a, b):
            assert np.array_equal(x, y)


@pytest.mark.parametrize("model", ["gat", "gcn"])
def test_baseline_fits_separable_data(model):
    g = generate_synthetic(200, 2, 8, 0.05, 0.005, 3.0, seed=0)
    mask = np.zeros(200, dtype=bool)
    mask[:100] = True
    cfg = TrainConfig(epochs=60, hidden=16, seed=0)
    result = train_baseline(g, mask, cfg, model)
    assert accuracy(predict_logits(g, result, cfg), g.labels, mask) > 0.9
    again = train_baseline(g, mask, cfg, model)
    for a, b in zip(result.params.weights, again.params.weights):
        assert np.array_equal(a.value, b.value)


def test_log_lines_and_sigmoid_mode():
    g, _, envs = small_problem(3)
    r = train_stable(g, envs, TrainConfig(epochs=3, hidden=8, weight_mode="sigmoid"))
    lines = r.log_lines()
    assert len(lines) == 3 and '"per_env_sublosses"' in lines[0]
    rec = r.log[-1]
    assert rec.total == pytest.approx(rec.pred + rec.local + rec.global_)
    assert len(rec.per_env_sublosses) == 3


def test_divergence_is_reported():
    g, _, envs = small_problem(4)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged, match="epoch"):
        train_stable(g, envs, TrainConfig(epochs=5, hidden=8, lr=1e200))


def test_pairs_cover_unordered_pairs():
    v = [0.3, 1.7, 2.2, 0.1]
    expected = sum((a - b) ** 2 for a, b in itertools.combinations(v, 2))
    assert abs(pairwise_gap_sum(v) - expected) < 1e-15
