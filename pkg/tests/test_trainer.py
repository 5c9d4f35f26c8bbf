from __future__ import annotations

import math

import numpy as np
import pytest

from datadrop import model
from datadrop.data import synth_blobs
from datadrop.model import ModelSpec
from datadrop.trainer import (TrainConfig, TrainingError, epoch_order, evaluate, init_params,
                              lipschitz_bound, objective_spec, train, train_full_batch)

from conftest import make_dataset


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((1, 0.1),))
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule=((0, 0.1), (5, 0.01), (5, 0.001)))
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig(init="zeros")


def test_lr_schedule_steps_at_epoch_boundaries():
    cfg = TrainConfig(lr_schedule=((0, 0.1), (3, 0.01), (7, 0.001)))
    assert [cfg.lr_at(e) for e in range(9)] == [0.1] * 3 + [0.01] * 4 + [0.001] * 2


def test_init_deterministic_and_bias_zero():
    spec = ModelSpec("mlp", 5, 3, hidden_dim=6)
    cfg = TrainConfig(seed=9)
    a, b = init_params(spec, cfg), init_params(spec, cfg)
    assert np.array_equal(a, b)
    for name, sl in spec.slices():
        if name.startswith("b"):
            assert np.all(a[sl] == 0.0)
    lin = ModelSpec("linear-mse", 4, 1)
    assert init_params(lin, TrainConfig(seed=3))[-1] == 0.0


@pytest.mark.parametrize("init", ["scaled-normal-fan-in", "scaled-uniform-fan-avg"])
def test_init_variance(init):
    spec = ModelSpec("mlp", 20, 10, hidden_dim=64)
    draws = np.array([init_params(spec, TrainConfig(seed=s, init=init)) for s in range(10_000)])
    (n1, s1), _, (n2, s2), _ = spec.slices()
    for sl, (fan_in, fan_out) in zip((s1, s2), spec.layers()):
        target = (2.0 / fan_in if init == "scaled-normal-fan-in" else 2.0 / (fan_in + fan_out))
        assert abs(draws[:, sl].var() / target - 1.0) < 0.1


def test_epochs_zero_returns_init():
    spec = ModelSpec("softmax", 2, 3)
    ds, _ = synth_blobs(30, 2, 3, 3.0, 0.0, 0)
    cfg = TrainConfig(epochs=0, seed=4)
    assert np.array_equal(train(spec, ds, cfg), init_params(spec, cfg))


def test_training_is_deterministic():
    spec = ModelSpec("mlp", 2, 3, hidden_dim=5)
    ds, _ = synth_blobs(70, 2, 3, 3.0, 0.1, 1)
    cfg = TrainConfig(epochs=3, batch_size=16, seed=2)
    assert np.array_equal(train(spec, ds, cfg), train(spec, ds, cfg))
    assert not np.array_equal(train(spec, ds, cfg), train(spec, ds, cfg.replace(seed=3)))


def test_exactly_determined_linear_fit():
    spec = ModelSpec("linear-mse", 2, 1, fit_bias=False)
    ds = make_dataset([[1.0, 0.5], [0.2, 1.0]], [1.0, -2.0])
    params = train(spec, ds, TrainConfig(epochs=400, batch_size=2, lr_schedule=((0, 0.5),)))
    assert evaluate(spec, params, ds).mean_loss < 1e-8


def test_separable_blobs_fit_perfectly():
    spec = ModelSpec("logistic", 2, 2, l2_reg=1e-3)
    ds, _ = synth_blobs(200, 2, 2, 10.0, 0.0, 3)
    params = train(spec, ds, TrainConfig(epochs=30))
    assert evaluate(spec, params, ds).accuracy == 1.0
    held, _ = synth_blobs(200, 2, 2, 10.0, 0.0, 4, center_seed=3)
    assert evaluate(spec, params, held).accuracy >= 0.95


def test_step_count_and_short_final_batch():
    spec = ModelSpec("linear-mse", 1, 1, fit_bias=False)
    ds = make_dataset([[1.0]] * 5, [0.0] * 5)
    # gradient of 0.5 w^2 per sample is w; momentum 0 gives w <- w (1 - lr) per step
    cfg = TrainConfig(epochs=2, batch_size=2, lr_schedule=((0, 0.5),), momentum=0.0, seed=1)
    w0 = init_params(spec, cfg)[0]
    assert train(spec, ds, cfg)[0] == pytest.approx(w0 * 0.5 ** 6)


def test_momentum_update_rule():
    spec = ModelSpec("linear-mse", 1, 1, fit_bias=False)
    ds = make_dataset([[1.0]], [0.0])
    cfg = TrainConfig(epochs=2, batch_size=1, lr_schedule=((0, 0.1),), momentum=0.5, seed=0)
    w = init_params(spec, cfg)[0]
    v = 0.0
    for _ in range(2):
        v = 0.5 * v + w
        w = w - 0.1 * v
    assert train(spec, ds, cfg)[0] == pytest.approx(w, rel=1e-15)


def test_removal_changes_one_step_by_that_sample():
    spec = ModelSpec("softmax", 2, 3, l2_reg=0.01)
    ds, _ = synth_blobs(12, 2, 3, 2.0, 0.0, 5)
    n = len(ds)
    gone = int(ds.ids[4])
    reduced = ds.drop([gone])
    lr = 0.1
    cfg = TrainConfig(epochs=1, lr_schedule=((0, lr),), momentum=0.0, shuffle=False)
    p0 = init_params(spec, cfg)
    full = train(spec, ds, cfg.replace(batch_size=n))
    less = train(spec, reduced, cfg.replace(batch_size=n - 1))
    g_full = (p0 - full) / lr - spec.l2_reg * p0
    g_less = (p0 - less) / lr - spec.l2_reg * p0
    g_x = model.per_sample_grads(spec, p0, ds.features[4:5], ds.labels[4:5])[0]
    np.testing.assert_allclose(n * g_full - (n - 1) * g_less, g_x, atol=1e-12)


def test_weight_decay_folded_into_objective():
    spec = ModelSpec("softmax", 2, 3, l2_reg=0.01)
    cfg = TrainConfig(weight_decay=0.02)
    assert objective_spec(spec, cfg).l2_reg == pytest.approx(0.03)
    assert objective_spec(spec, TrainConfig()) is spec
    ds, _ = synth_blobs(40, 2, 3, 2.0, 0.0, 0)
    base = TrainConfig(epochs=2, seed=1)
    assert np.array_equal(train(spec, ds, base.replace(weight_decay=0.02)),
                          train(spec.with_l2(0.03), ds, base))


def test_nonfinite_training_aborts_with_step():
    spec = ModelSpec("linear-mse", 1, 1)
    ds = make_dataset([[1e200], [1e200]], [1.0, 2.0])
    with pytest.raises(TrainingError) as info:
        train(spec, ds, TrainConfig(epochs=5, batch_size=1, lr_schedule=((0, 10.0),)))
    assert info.value.step is not None


def test_epoch_order():
    assert np.array_equal(epoch_order(5, 0, 0, False), np.arange(5))
    a = epoch_order(20, 1, 0, True)
    assert np.array_equal(a, epoch_order(20, 1, 0, True))
    assert not np.array_equal(a, epoch_order(20, 1, 1, True))
    assert sorted(a) == list(range(20))


def test_evaluate_trivial_cases():
    spec = ModelSpec("logistic", 2, 2)
    ds = make_dataset([[1.0, 2.0], [3.0, -1.0]], [0, 1])
    m = evaluate(spec, np.zeros(spec.param_count), ds)
    assert m.mean_loss == pytest.approx(math.log(2)) and m.n_evaluated == 2
    lin = ModelSpec("linear-mse", 2, 1, fit_bias=False)
    m = evaluate(lin, np.array([1.0, 0.0]), make_dataset([[2.0, 3.0]], [2.0]))
    assert m.mean_loss == 0.0 and m.accuracy is None


def test_full_batch_converges_to_stationary_point():
    spec = ModelSpec("logistic", 3, 2, l2_reg=0.05)
    ds, _ = synth_blobs(40, 3, 2, 2.0, 0.1, 0)
    res = train_full_batch(spec, ds, tol=1e-9)
    assert res.converged and res.grad_norm < 1e-9
    assert np.linalg.norm(model.batch_loss_grad(spec, res.params, ds.features, ds.labels)[1]) < 1e-9
    warm = train_full_batch(spec, ds, tol=1e-9, start=res.params)
    assert warm.iterations == 0


def test_lipschitz_bound_dominates_curvature():
    spec = ModelSpec("softmax", 3, 3, l2_reg=0.1)
    ds, _ = synth_blobs(30, 3, 3, 2.0, 0.0, 2)
    rng = np.random.default_rng(0)
    L = lipschitz_bound(spec, ds)
    for _ in range(5):
        H = model.dense_hessian(spec, rng.normal(size=spec.param_count), ds.features, ds.labels)
        assert np.linalg.eigvalsh(H)[-1] <= L * (1 + 1e-12)
    with pytest.raises(ValueError):
        lipschitz_bound(ModelSpec("mlp", 3, 3, hidden_dim=2), ds)
