from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awnet import autodiff as ad
from awnet.attacks import training_spec
from awnet.data import DatasetHandle, make_synthetic
from awnet.metrics import accuracy, w_robust_acc
from awnet.attacks import pgd
from awnet.model import AWNetModel, preset, static_config
from awnet.training import (
    TeacherPair,
    TrainConfig,
    TrainingError,
    TrainState,
    auto_balance,
    pretrain_extractor,
    sgd_step,
    train_epoch,
    train_teachers,
    train_variant,
    train_variant_epoch,
    variant_loss,
)
from oracles import sgd_reference

TOY = preset("toy")


def _snapshot(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


@pytest.fixture(scope="module")
def small_data():
    return make_synthetic(10, 6, 8, seed=0).shuffled(0)


@pytest.fixture(scope="module")
def teachers(small_data):
    return train_teachers(TOY, small_data, TrainConfig(batch_size=32), epochs=2, seed=0)


# --- sgd_step -------------------------------------------------------------------


def test_sgd_plain_descent():
    p = ad.Tensor(np.array([1.0, -2.0]))
    sgd_step([("p", p)], {"p": np.array([0.5, 0.5])}, {}, 0.1, 0.0, 0.0)
    assert np.array_equal(p.data, [1.0 - 0.05, -2.0 - 0.05])


def test_sgd_zero_gradient_fixed_point():
    p = ad.Tensor(np.array([3.0]))
    state = {}
    for _ in range(3):
        sgd_step([("p", p)], {}, state, 0.1, 0.9, 0.0)
    assert p.data[0] == 3.0


def test_sgd_quadratic_matches_recurrence():
    # f(w) = 0.5 * a * w^2, gradient a * w
    a, w0, lr, mom, wd = 3.0, 2.0, 0.05, 0.9, 1e-3
    p = ad.Tensor(np.array([w0]))
    state = {}
    grads = []
    for _ in range(2):
        g = a * p.data.copy()
        grads.append(g)
        sgd_step([("w", p)], {"w": g}, state, lr, mom, wd)
    # hand-stepped: v1 = g0 + wd w0, w1 = w0 - lr v1, v2 = mom v1 + g1 + wd w1, w2 = w1 - lr v2
    v1 = a * w0 + wd * w0
    w1 = w0 - lr * v1
    v2 = mom * v1 + a * w1 + wd * w1
    w2 = w1 - lr * v2
    assert abs(p.data[0] - w2) <= 1e-12
    assert abs(sgd_reference([w0], grads, lr, mom, wd)[0] - w2) <= 1e-12


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_sgd_matches_reference_on_random_sequences(seed):
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=4)
    grads = [rng.normal(size=4) for _ in range(5)]
    p = ad.Tensor(w0.copy())
    state = {}
    for g in grads:
        sgd_step([("w", p)], {"w": g}, state, 0.1, 0.9, 2e-4)
    assert np.abs(p.data - sgd_reference(w0, grads, 0.1, 0.9, 2e-4)).max() <= 1e-12


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError):
        sgd_step([("w", ad.Tensor(np.zeros(2)))], {"w": np.zeros(3)}, {}, 0.1, 0.9, 0.0)


# --- auto_balance ---------------------------------------------------------------


def test_auto_balance_equal_histories_unchanged():
    assert auto_balance(0.5, 0.5, [2.0, 1.0], [2.0, 1.0]) == (0.5, 0.5)


def test_auto_balance_empty_history_unchanged():
    assert auto_balance(0.3, 0.7, [], []) == (0.3, 0.7)


@given(st.lists(st.floats(0.01, 10), min_size=1, max_size=8),
       st.lists(st.floats(0.01, 10), min_size=1, max_size=8), st.floats(0.1, 0.9))
@settings(max_examples=100, deadline=None)
def test_auto_balance_sum_and_clamp(h1, h2, a1):
    b1, b2 = auto_balance(a1, 1 - a1, h1, h2)
    assert abs(b1 + b2 - 1) <= 1e-12
    assert 0.1 <= b1 <= 0.9


def test_auto_balance_favours_stalled_loss():
    stalled = [1.0, 1.0, 1.0]
    halving = [1.0, 0.7, 0.5]
    a1, _ = auto_balance(0.5, 0.5, stalled, halving)
    assert a1 > 0.5
    _, a2 = auto_balance(0.5, 0.5, halving, stalled)
    assert a2 > 0.5


# --- config ---------------------------------------------------------------------


def test_train_config_validation():
    for bad in ({"tau": 0.5}, {"lr_milestones": (5, 5)}, {"lr_main": -1.0}, {"mode": "x"},
                {"alpha1": 0.4}, {"kd_direction": "x"}, {"attack_routing": "x"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_lr_schedule_steps_at_milestones():
    cfg = TrainConfig(lr_milestones=(2, 4), lr_decay=0.1)
    assert [cfg.lr_factor(e) for e in range(6)] == pytest.approx([1, 1, 0.1, 0.1, 0.01, 0.01])


# --- variants ---------------------------------------------------------------------


def test_standard_training_fits_separable_pair():
    data = make_synthetic(2, 20, 8, seed=3).shuffled(1)
    model = AWNetModel(static_config(TOY), 0)
    train_variant(model, data, TrainConfig(epochs=15, batch_size=16, lr_milestones=()), 0, "standard")
    assert accuracy(model, data.images, data.labels) == 1.0


def test_pgd_at_with_zero_epsilon_is_standard_ce():
    model = AWNetModel(static_config(TOY), 1)
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(4, 3, 8, 8))
    y = np.array([0, 1, 2, 3])
    a = variant_loss(model, x, y, x.copy(), "pgd_at").item()
    b = variant_loss(model, x, y, None, "standard").item()
    assert a == b


def test_trades_with_identical_outputs_is_ce():
    model = AWNetModel(static_config(TOY), 2)
    x = np.random.default_rng(1).uniform(0, 1, size=(3, 3, 8, 8))
    y = np.array([4, 5, 6])
    assert variant_loss(model, x, y, x.copy(), "trades").item() == variant_loss(model, x, y, None, "standard").item()


def test_variant_rejects_unknown_mode():
    model = AWNetModel(static_config(TOY), 0)
    with pytest.raises(ValueError):
        variant_loss(model, np.zeros((1, 3, 8, 8)), [0], None, "fancy")


# --- joint training ---------------------------------------------------------------


def test_zero_learning_rates_leave_parameters_identical(small_data, teachers):
    model = AWNetModel(TOY, 0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    cfg = TrainConfig(lr_main=0.0, lr_regulator=0.0, lr_type=0.0, batch_size=32,
                      train_attack=replace(training_spec(), iters=2))
    train_epoch(model, small_data, teachers, cfg, np.random.default_rng(0))
    for n, p in model.named_parameters():
        assert np.array_equal(p.data, before[n]), n


def test_teachers_and_extractor_untouched(small_data, teachers):
    model = AWNetModel(TOY, 1)
    pretrain_extractor(model, small_data, epochs=1)
    t_before = (_snapshot(teachers.t_nat), _snapshot(teachers.t_adv))
    ex_before = {n: p.data.copy() for n, p in model.detector.named_parameters()
                 if n.startswith(("extractor", "feature_norm"))}
    ex_stats = [(b.stats.mean.copy(), b.stats.var.copy())
                for b in model.detector.extractor_norms + [model.detector.feature_norm]]
    cfg = TrainConfig(batch_size=32, train_attack=replace(training_spec(), iters=2))
    state = TrainState.start(cfg)
    for _ in range(2):
        metrics = train_epoch(model, small_data, teachers, cfg, np.random.default_rng(1), state)
    assert _same(t_before[0], _snapshot(teachers.t_nat))
    assert _same(t_before[1], _snapshot(teachers.t_adv))
    for n, p in model.detector.named_parameters():
        if n in ex_before:
            assert np.array_equal(p.data, ex_before[n]), n
    for (m, v), b in zip(ex_stats, model.detector.extractor_norms + [model.detector.feature_norm]):
        assert np.array_equal(m, b.stats.mean) and np.array_equal(v, b.stats.var)
    assert abs(metrics["alpha1"] + metrics["alpha2"] - 1) <= 1e-12
    assert state.epoch == 2


def test_non_finite_loss_reports_batch(small_data, teachers):
    model = AWNetModel(TOY, 0)
    model.blocks[0].conv1.kernel.data[...] = np.nan
    cfg = TrainConfig(batch_size=32, train_attack=replace(training_spec(), iters=1))
    with pytest.raises(TrainingError) as info:
        train_epoch(model, small_data, teachers, cfg, np.random.default_rng(0), seed=17)
    assert info.value.batch == 0 and info.value.seed == 17
    assert "seed 17" in str(info.value)


def test_joint_training_overfits_fixed_samples():
    base = make_synthetic(4, 2, 8, seed=5)  # 8 fixed samples
    # four copies per epoch so that 50 epochs amount to 200 SGD steps
    data = DatasetHandle(np.tile(base.images, (4, 1, 1, 1)), np.tile(base.labels, 4), 4)
    four = replace(TOY, num_classes=4)
    teachers = train_teachers(four, base, TrainConfig(batch_size=8, lr_main=0.05, lr_milestones=()),
                              epochs=150, seed=0)
    cfg = TrainConfig(batch_size=8, lr_main=0.02, lr_milestones=(), lr_regulator=0.001, lr_type=0.01)
    model = AWNetModel(four, 0)
    pretrain_extractor(model, data, epochs=20)
    state = TrainState.start(cfg)
    rng = np.random.default_rng(0)
    for _ in range(50):
        train_epoch(model, data, teachers, cfg, rng, state)
    a_nat = accuracy(model, base.images, base.labels)
    x_adv = pgd(model, base.images, base.labels, training_spec(), "ce", np.random.default_rng(1)).x_adv
    a_adv = accuracy(model, x_adv, base.labels)
    assert w_robust_acc(a_nat, a_adv) > 0.9


def test_toy_loss_trajectory_decreases():
    data = make_synthetic(10, 10, 8, seed=6).shuffled(0)
    cfg = TrainConfig(epochs=10, lr_milestones=(), lr_regulator=0.001, lr_type=0.1)
    teachers = train_teachers(TOY, data, cfg, epochs=4, seed=1)
    model = AWNetModel(TOY, 1)
    pretrain_extractor(model, data, epochs=3)
    state = TrainState.start(cfg)
    rng = np.random.default_rng(2)
    losses = [train_epoch(model, data, teachers, cfg, rng, state)["loss"] for _ in range(10)]
    assert all(np.isfinite(losses))
    assert np.mean(losses) < losses[0]


def test_variant_epoch_on_awnet_adds_type_loss():
    data = make_synthetic(10, 2, 8, seed=7)
    model = AWNetModel(TOY, 3)
    cfg = TrainConfig(batch_size=20, lr_main=0.0, lr_regulator=0.0, lr_type=0.0,
                      train_attack=replace(training_spec(), iters=1))
    m = train_variant_epoch(model, data, cfg, np.random.default_rng(0), mode="standard")
    assert np.isfinite(m["loss"])


def test_teachers_are_frozen_static_twins(teachers):
    assert isinstance(teachers, TeacherPair)
    assert teachers.t_nat.detector is None
    assert not any(p.requires_grad for p in teachers.t_adv.parameters())
