import itertools
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awnet import autodiff as ad
from awnet.attacks import (
    AttackSpec,
    InfeasibleIterate,
    adaptive_attack,
    check_feasible,
    cw_linf,
    cw_margin,
    fgsm,
    pgd,
    run_attack,
    standard_spec,
    transfer_eval,
)
from awnet.model import AWNetModel, preset, static_config


class LinearModel:
    """logits = x.flat @ W.T + b, differentiable through the tensor engine."""

    def __init__(self, weight, bias):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def __call__(self, x):
        x = ad.as_tensor(x)
        flat = ad.reshape(x, (x.shape[0], -1))
        return ad.linear(flat, ad.Tensor(self.weight), ad.Tensor(self.bias))


def logistic(w, b):
    """Two-class model whose class-1 logit is w.x + b and class-0 logit is 0."""
    w = np.asarray(w, dtype=np.float64).ravel()
    return LinearModel(np.stack([np.zeros_like(w), w]), np.array([0.0, b]))


def test_fgsm_logistic_closed_form():
    rng = np.random.default_rng(0)
    eps = 8 / 255
    for _ in range(50):
        w = rng.normal(size=12)
        w[rng.random(12) < 0.1] = 0.0  # zero weights: sign(0) leaves the pixel alone
        b = rng.normal()
        x = rng.uniform(0, 1, size=(5, 3, 2, 2))
        y = rng.integers(0, 2, size=5)
        got = fgsm(logistic(w, b), x, y, AttackSpec("fgsm", eps, eps, 1)).x_adv
        # d CE / d x = (sigmoid(z) - y) w, and sigmoid(z) - y has sign -1 for y=1, +1 for y=0
        direction = np.where(y == 1, -1.0, 1.0)[:, None] * np.sign(w)[None, :]
        expect = np.clip(x + eps * direction.reshape(x.shape), 0, 1)
        assert np.abs(got - expect).max() <= 1e-12


def test_fgsm_is_best_sign_pattern_on_linear_loss():
    rng = np.random.default_rng(1)
    eps = 0.05
    for _ in range(40):
        w = rng.normal(size=2)
        b = rng.normal()
        x = rng.uniform(0.2, 0.8, size=(1, 1, 1, 2))  # interior: no domain clipping
        y = np.array([rng.integers(0, 2)])
        model = logistic(w, b)
        got = fgsm(model, x, y, AttackSpec("fgsm", eps, eps, 1)).x_adv
        best, best_loss = None, -np.inf
        for signs in itertools.product([-1.0, 1.0], repeat=2):
            cand = x + eps * np.array(signs).reshape(x.shape)
            loss = ad.cross_entropy(model(cand), y).item()
            if loss > best_loss:
                best, best_loss = cand, loss
        assert np.array_equal(got, best)


def test_fgsm_equals_one_step_pgd():
    rng = np.random.default_rng(2)
    model = LinearModel(rng.normal(size=(4, 12)), rng.normal(size=4))
    x = rng.uniform(0, 1, size=(6, 3, 2, 2))
    y = rng.integers(0, 4, size=6)
    eps = 4 / 255
    a = fgsm(model, x, y, AttackSpec("fgsm", eps, eps, 1)).x_adv
    b = pgd(model, x, y, AttackSpec("pgd_sat", eps, eps, 1, 0.0)).x_adv
    assert np.array_equal(a, b)


def _grid_max_margin(model, x, y, eps, kappa=np.inf, n=41):
    offsets = np.linspace(-eps, eps, n)
    pts = np.array([[x[0, 0, 0, 0] + a, x[0, 0, 0, 1] + c] for a in offsets for c in offsets])
    pts = np.clip(pts, 0, 1).reshape(-1, 1, 1, 2)
    with ad.no_grad():
        m = cw_margin(model(pts), np.full(len(pts), y[0]), kappa).data
    return m.max()


def test_cw_two_class_reaches_grid_optimum():
    rng = np.random.default_rng(3)
    eps = 0.05
    for _ in range(30):
        model = LinearModel(rng.normal(size=(2, 2)), rng.normal(size=2))
        x = rng.uniform(0.2, 0.8, size=(1, 1, 1, 2))
        y = np.array([rng.integers(0, 2)])
        spec = AttackSpec("cw_linf", eps, 0.01, 30, 0.0, kappa=np.inf)
        adv = cw_linf(model, x, y, spec).x_adv
        with ad.no_grad():
            got = cw_margin(model(adv), y, np.inf).item()
        assert got == pytest.approx(_grid_max_margin(model, x, y, eps), abs=1e-12)


def test_cw_three_class_never_exceeds_box_maximum():
    # the margin is convex in x, so the 41x41 grid (which contains the box
    # vertices) attains its maximum over the box
    rng = np.random.default_rng(4)
    eps = 0.05
    for _ in range(30):
        model = LinearModel(rng.normal(size=(3, 2)), rng.normal(size=3))
        x = rng.uniform(0.2, 0.8, size=(1, 1, 1, 2))
        y = np.array([rng.integers(0, 3)])
        adv = cw_linf(model, x, y, AttackSpec("cw_linf", eps, 0.01, 30, 0.0, kappa=np.inf)).x_adv
        with ad.no_grad():
            got = cw_margin(model(adv), y, np.inf).item()
            start = cw_margin(model(x), y, np.inf).item()
        assert start - 1e-12 <= got <= _grid_max_margin(model, x, y, eps) + 1e-12


def test_cw_margin_caps_at_kappa():
    logits = ad.Tensor(np.array([[5.0, 0.0, 1.0], [0.0, 2.0, 1.0]]))
    m = cw_margin(logits, np.array([0, 0]), kappa=0.5).data
    assert m[0] == -4.0  # correctly classified: raw margin, never clamped
    assert m[1] == 0.5  # misclassified by 2: capped at the confidence kappa


def test_cw_moves_correctly_classified_samples():
    model = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    x = np.array([[[[0.6, 0.5]]]])
    batch = cw_linf(model, x, np.array([0]), AttackSpec("cw_linf", 0.1, 0.02, 10, 0.0))
    # three sign steps flip the prediction, after which the capped margin is flat
    assert np.allclose(batch.x_adv.ravel(), [0.54, 0.56], atol=1e-12)
    assert batch.success.all()


def test_cw_on_misclassified_sample_is_feasible_and_successful():
    model = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    x = np.array([[[[0.2, 0.9]]]])
    batch = cw_linf(model, x, np.array([0]), AttackSpec("cw_linf", 0.03, 0.01, 5))
    with ad.no_grad():
        assert cw_margin(model(batch.x_adv), [0], 0.0).item() >= 0
    assert batch.success.all()
    check_feasible(batch.x_adv, x, 0.03)


def test_cw_needs_two_classes():
    with pytest.raises(ValueError):
        cw_margin(ad.Tensor(np.zeros((1, 1))), [0])


@given(st.integers(0, 2**31 - 1), st.sampled_from(["fgsm", "pgd_sat", "pgd_trades", "cw_linf"]),
       st.sampled_from([0.0, 1 / 255, 8 / 255, 0.3]))
@settings(max_examples=40, deadline=None)
def test_every_iterate_is_feasible(seed, family, eps):
    rng = np.random.default_rng(seed)
    model = LinearModel(rng.normal(size=(3, 12)) * 5, rng.normal(size=3))
    x = rng.choice([0.0, 1.0, 0.5], size=(4, 3, 2, 2)) + rng.uniform(-0.01, 0.01, size=(4, 3, 2, 2))
    x = np.clip(x, 0, 1)
    y = rng.integers(0, 3, size=4)
    spec = replace(standard_spec(family, eps), iters=3)
    batch = run_attack(model, x, y, spec, rng)
    assert np.abs(batch.x_adv - x).max() <= eps + 1e-12
    assert batch.x_adv.min() >= 0 and batch.x_adv.max() <= 1
    assert (batch.linf() <= eps + 1e-12).all()


def test_zero_epsilon_returns_input():
    rng = np.random.default_rng(5)
    model = LinearModel(rng.normal(size=(3, 12)), np.zeros(3))
    x = rng.uniform(0, 1, size=(3, 3, 2, 2))
    for family in ("fgsm", "pgd_sat", "pgd_trades", "cw_linf"):
        adv = run_attack(model, x, np.zeros(3, int), standard_spec(family, 0.0), rng).x_adv
        assert np.array_equal(adv, x)


def test_zero_gradient_pixels_do_not_move():
    w = np.zeros((2, 4))
    w[1, 0] = 1.0
    model = LinearModel(w, np.zeros(2))
    x = np.full((1, 1, 2, 2), 0.5)
    adv = pgd(model, x, np.array([1]), AttackSpec("pgd_sat", 0.1, 0.02, 5, 0.0)).x_adv
    assert adv[0, 0, 0, 0] == pytest.approx(0.4)
    assert np.array_equal(adv.ravel()[1:], x.ravel()[1:])


def test_check_feasible_detects_violations():
    x = np.full((1, 2), 0.5)
    with pytest.raises(InfeasibleIterate):
        check_feasible(x + 0.2, x, 0.1)
    with pytest.raises(InfeasibleIterate):
        check_feasible(np.array([[1.2, 0.5]]), np.array([[1.0, 0.5]]), 0.3)


def test_zero_step_warns():
    model = LinearModel(np.eye(2), np.zeros(2))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pgd(model, np.full((1, 2), 0.5), [0], AttackSpec("pgd_sat", 0.1, 0.0, 5))
    assert any("step_size" in str(w.message) for w in caught)


def test_spec_validation():
    with pytest.raises(ValueError):
        AttackSpec("pgd_sat", -1.0)
    with pytest.raises(ValueError):
        AttackSpec("nonsense")
    with pytest.raises(ValueError):
        AttackSpec("pgd_sat", iters=0)


def test_adaptive_needs_awnet():
    rng = np.random.default_rng(0)
    static = AWNetModel(static_config(preset("toy")), 0)
    x = rng.uniform(0, 1, size=(2, 3, 8, 8))
    with pytest.raises(TypeError):
        adaptive_attack(static, x, [0, 1], standard_spec("adaptive"))
    with pytest.raises(TypeError):
        adaptive_attack(LinearModel(np.eye(2), np.zeros(2)), x, [0, 1], standard_spec("adaptive"))


def test_adaptive_without_type_term_equals_pgd_trades():
    model = AWNetModel(preset("toy"), 0)
    x = np.random.default_rng(1).uniform(0, 1, size=(3, 3, 8, 8))
    y = np.array([0, 1, 2])
    spec = AttackSpec("adaptive", 8 / 255, 2 / 255, 3, 0.001, adaptive_weight=0.0)
    a = adaptive_attack(model, x, y, spec, np.random.default_rng(7)).x_adv
    b = pgd(model, x, y, replace(spec, family="pgd_trades"), "kl_vs_clean", np.random.default_rng(7)).x_adv
    assert np.array_equal(a, b)


def test_adaptive_pushes_detector_toward_clean():
    model = AWNetModel(preset("toy"), 0)
    x = np.random.default_rng(2).uniform(0, 1, size=(4, 3, 8, 8))
    y = np.zeros(4, int)
    from awnet.model import forward

    spec = AttackSpec("adaptive", 8 / 255, 2 / 255, 5, 0.0, adaptive_weight=100.0)
    adv = adaptive_attack(model, x, y, spec).x_adv
    with ad.no_grad():
        before = forward(x, model, "eval", update_stats=False)[1].p_type.data.mean()
        after = forward(adv, model, "eval", update_stats=False)[1].p_type.data.mean()
    assert after > before


def test_attacks_leave_model_untouched():
    model = AWNetModel(preset("toy"), 3)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    x = np.random.default_rng(3).uniform(0, 1, size=(3, 3, 8, 8))
    for family in ("fgsm", "pgd_sat", "pgd_trades", "cw_linf", "adaptive"):
        run_attack(model, x, np.array([0, 1, 2]), replace(standard_spec(family), iters=2),
                   np.random.default_rng(0))
    for k, v in model.state_dict().items():
        assert np.array_equal(before[k], v), k
    assert all(p.grad is None for p in model.parameters())


def test_transfer_eval_rejects_shape_mismatch():
    rng = np.random.default_rng(0)
    a = LinearModel(rng.normal(size=(2, 12)), np.zeros(2))
    b = LinearModel(rng.normal(size=(2, 27)), np.zeros(2))
    x = rng.uniform(0, 1, size=(2, 3, 2, 2))
    with pytest.raises(ad.ShapeError):
        transfer_eval(a, b, x, [0, 1], standard_spec("fgsm"))
    with pytest.raises(ValueError):
        transfer_eval(a, a, x[:0], [], standard_spec("fgsm"))


def test_transfer_to_self_equals_white_box():
    rng = np.random.default_rng(1)
    model = LinearModel(rng.normal(size=(3, 12)), np.zeros(3))
    x = rng.uniform(0, 1, size=(20, 3, 2, 2))
    y = rng.integers(0, 3, size=20)
    spec = standard_spec("fgsm")
    rep = transfer_eval(model, model, x, y, spec)
    white = fgsm(model, x, y, spec)
    assert rep.a_adv == pytest.approx(1 - white.success.mean())
    assert rep.note == "transfer"
