from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awnet import autodiff as ad
from awnet.layers import FilterBank
from awnet.model import (
    ADV,
    CLEAN,
    AWNetModel,
    ConfigError,
    MixBN,
    ModelConfig,
    RegulationSignals,
    detect,
    forward,
    mixbn_apply,
    modulate,
    preset,
    static_config,
    static_twin,
    tie_mixbn,
)
from oracles import rel_err

TOY = preset("toy")


@pytest.fixture(scope="module")
def toy_model():
    return AWNetModel(TOY, seed=0)


def _images(rng, n, size=8):
    return rng.uniform(0, 1, size=(n, 3, size, size))


def test_logits_shape_and_signal_count(toy_model):
    x = _images(np.random.default_rng(0), 5)
    logits, sig = forward(x, toy_model, "eval", update_stats=False)
    assert logits.shape == (5, 10)
    assert len(sig.omega) == len(toy_model.blocks)
    for (w1, w2), blk in zip(sig.omega, toy_model.blocks):
        assert w1.shape == (5, blk.conv1.out_channels)
        assert w2.shape == (5, blk.conv2.out_channels)
    assert sig.p_type.shape == (5,)


@given(st.integers(0, 10_000), st.floats(0.5, 4.0), st.floats(0.01, 5.0))
@settings(max_examples=25, deadline=None)
def test_omega_lies_in_open_interval(seed, beta, scale):
    rng = np.random.default_rng(seed)
    cfg = replace(TOY, beta=beta)
    model = AWNetModel(cfg, seed)
    for head in model.detector.signal_heads:
        head.weight.data[...] = rng.normal(0, scale, size=head.weight.shape)
    with ad.no_grad():
        sig = detect(ad.Tensor(_images(rng, 3)), model.detector, beta)
    heads = model.detector.signal_heads
    omegas = [w for pair in sig.omega for w in pair]
    for head, w in zip(heads, omegas):
        z = sig.features.data @ head.weight.data.T
        assert (w.data >= 0).all() and (w.data <= 2**beta).all()
        # strictly inside wherever tanh(z) is not rounded to +-1 in float64
        inner = np.abs(z) <= 15
        assert (w.data[inner] > 0).all() and (w.data[inner] < 2**beta).all()


def test_p_type_is_softmax_clean_column(toy_model):
    x = ad.Tensor(_images(np.random.default_rng(1), 4))
    with ad.no_grad():
        sig = detect(x, toy_model.detector, TOY.beta)
    z = sig.type_logits.data
    expect = np.exp(z[:, CLEAN]) / np.exp(z).sum(axis=1)
    assert rel_err(sig.p_type.data, expect) < 1e-14


def test_modulate_scales_filters_not_bias():
    rng = np.random.default_rng(0)
    fb = FilterBank(2, 3, 3, rng)
    fb.bias.data[:] = [1.0, 2.0, 3.0]
    omega = np.array([0.5, 2.0, 1.5])
    m = modulate(fb, omega)
    assert np.array_equal(m.kernel.data, fb.kernel.data * omega[:, None, None, None])
    assert np.array_equal(m.bias.data, fb.bias.data)
    with pytest.raises(ValueError):
        modulate(fb, np.ones(2))


def test_filterbank_rejects_wrong_omega_shape():
    fb = FilterBank(1, 2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        fb(ad.Tensor(np.zeros((1, 1, 4, 4))), ad.Tensor(np.ones((1, 3))))


def test_mixbn_train_routes_to_one_branch():
    norm = MixBN(2)
    x = ad.Tensor(np.random.default_rng(0).normal(size=(4, 2, 3, 3)) + 5)
    mixbn_apply(x, norm, "train_clean")
    assert not np.array_equal(norm.bn_nat.stats.mean, 0) and np.array_equal(norm.bn_adv.stats.mean, [0, 0])
    mixbn_apply(x, norm, "train_adv", update_stats=False)
    assert np.array_equal(norm.bn_adv.stats.mean, [0, 0])
    with pytest.raises(ValueError):
        mixbn_apply(x, norm, "train_adv", p_type=0.3)
    with pytest.raises(ValueError):
        mixbn_apply(x, norm, "eval")


@pytest.mark.parametrize("p", [0.0, 0.25, 1.0])
def test_mixbn_eval_blend(p):
    rng = np.random.default_rng(2)
    norm = MixBN(2)
    norm.bn_adv.stats.mean[:] = rng.normal(size=2)
    norm.bn_nat.gamma.data[:] = rng.uniform(0.5, 2, size=2)
    x = ad.Tensor(rng.normal(size=(3, 2, 2, 2)))
    out = mixbn_apply(x, norm, "eval", np.full(3, p)).data
    adv = norm.bn_adv(x, train=False).data
    nat = norm.bn_nat(x, train=False).data
    assert rel_err(out, (1 - p) * adv + p * nat) < 1e-14


def test_eval_logits_bounded_in_p_type(toy_model):
    x = _images(np.random.default_rng(3), 4)
    outs = []
    with ad.no_grad():
        for p in (0.0, 0.25, 0.5, 0.75, 1.0):
            outs.append(forward(x, toy_model, "eval", update_stats=False, p_type=np.full(4, p))[0].data)
    steps = [np.abs(b - a).max() for a, b in zip(outs, outs[1:])]
    assert all(np.isfinite(s) for s in steps)
    # a small change of p moves the logits by a proportionally small amount
    with ad.no_grad():
        a = forward(x, toy_model, "eval", update_stats=False, p_type=np.full(4, 0.5))[0].data
        b = forward(x, toy_model, "eval", update_stats=False, p_type=np.full(4, 0.5 + 1e-6))[0].data
    assert np.abs(b - a).max() < 1e-4


def test_mixed_train_batch_matches_separate_routing():
    model = AWNetModel(TOY, 1)
    rng = np.random.default_rng(4)
    x = _images(rng, 6)
    labels = np.array([CLEAN, ADV, ADV, CLEAN, CLEAN, ADV])
    with ad.no_grad():
        mixed, sig = forward(x, model, "train", type_labels=labels, update_stats=False)
        clean, _ = forward(x[labels == CLEAN], model, "train_clean", update_stats=False)
        adv, _ = forward(x[labels == ADV], model, "train_adv", update_stats=False)
    assert np.array_equal(mixed.data[labels == CLEAN], clean.data)
    assert np.array_equal(mixed.data[labels == ADV], adv.data)
    assert sig.p_type.shape == (6,)


def test_train_mode_requires_type_labels(toy_model):
    with pytest.raises(ValueError):
        forward(_images(np.random.default_rng(0), 2), toy_model, "train")


def test_unknown_mode_rejected(toy_model):
    with pytest.raises(ValueError):
        forward(_images(np.random.default_rng(0), 2), toy_model, "test")


def test_extractor_frozen_and_excluded_from_groups(toy_model):
    groups = toy_model.param_groups()
    names = [n for g in groups.values() for n, _ in g]
    assert not any(n.startswith("detector.extractor") or n.startswith("detector.feature_norm") for n in names)
    assert all(n.startswith("detector.signal_heads") for n, _ in groups["regulator"])
    assert [n for n, _ in groups["type"]] == ["detector.type_head.weight"]
    for name, p in toy_model.named_parameters():
        if name.startswith("detector.extractor"):
            assert not p.requires_grad


def test_extractor_receives_no_gradient(toy_model):
    x = _images(np.random.default_rng(5), 2)
    logits, sig = forward(x, toy_model, "train", type_labels=[CLEAN, ADV], update_stats=False)
    ad.backward(logits.sum() + sig.p_type.sum())
    for name, p in toy_model.named_parameters():
        if name.startswith("detector.extractor"):
            assert p.grad is None
    toy_model.zero_grad()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dynamic_weight=True, detector=False)
    with pytest.raises(ConfigError):
        ModelConfig(beta=0)
    with pytest.raises(ConfigError):
        preset("huge")
    cfg = preset("desk")
    assert ModelConfig.from_descriptor(cfg.descriptor()) == cfg


def test_static_config_has_no_mechanisms():
    s = static_config(TOY)
    model = AWNetModel(s, 0)
    assert model.detector is None
    logits, sig = forward(_images(np.random.default_rng(0), 2), model, "eval")
    assert sig is None and logits.shape == (2, 10)


def test_detect_checks_head_count(toy_model):
    with pytest.raises(ConfigError):
        detect(ad.Tensor(_images(np.random.default_rng(0), 1)), toy_model.detector, 1.0, n_blocks=5)


def test_tie_and_twin_share_weights():
    model = AWNetModel(TOY, 2)
    model.blocks[0].norm1.bn_nat.gamma.data[:] = 3.0
    tie_mixbn(model, "bn_nat")
    assert np.array_equal(model.blocks[0].norm1.bn_adv.gamma.data, model.blocks[0].norm1.bn_nat.gamma.data)
    twin = static_twin(model)
    assert np.array_equal(twin.blocks[0].norm1.bn.gamma.data, model.blocks[0].norm1.bn_nat.gamma.data)
    assert np.array_equal(twin.stem.kernel.data, model.stem.kernel.data)


def test_regulation_signals_container():
    sig = RegulationSignals([], ad.Tensor(np.zeros(1)), ad.Tensor(np.zeros((1, 2))), 4.0)
    assert sig.features is None
