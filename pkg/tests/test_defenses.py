from dataclasses import replace

import numpy as np
import pytest

from robustprompt import autodiff as ad
from robustprompt.attacks import AttackConfig, attack_pgd
from robustprompt.data import gen_synthetic
from robustprompt.defenses import (
    LOSS_FNS,
    METHODS,
    TrainConfig,
    loss_adapt_ce,
    loss_adapt_kl,
    loss_at,
    loss_natural,
    loss_trades,
    nfgsm_example,
    prompt_tune,
    train_step,
    trainable_tensors,
)
from robustprompt.vit import _ln, embed_patches, encoder_layer, forward

from conftest import TINY, tuned_view


def _batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 8, 8, 3)).astype(np.float32), rng.integers(0, 3, n)


def _cfg(method="ADAPT_CE", eps=8 / 255, **kw):
    adaptive = method in ("ADAPT_CE", "ADAPT_KL")
    return TrainConfig(method=method, attack=AttackConfig(epsilon=eps, alpha=eps / 4 or 1e-3, steps=3, adaptive=adaptive), **kw)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="SGD")
    with pytest.raises(ValueError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(method="ADAPT_CE", attack=AttackConfig(adaptive=False))
    with pytest.raises(ValueError):
        TrainConfig(kl_inner="js")


@pytest.mark.parametrize("fn", [loss_adapt_ce, loss_adapt_kl])
def test_lambda_zero_is_bitwise_natural(tuned, fn):
    model, prompts = tuned
    for seed in range(5):
        x, y = _batch(seed)
        a = fn(model, prompts, x, y, _cfg(lam=0.0), rng=seed)
        b = loss_natural(model, prompts, x, y, _cfg())
        assert a.data.tobytes() == b.data.tobytes()


def test_zero_epsilon_adapt_ce_doubles(tuned):
    model, prompts = tuned
    x, y = _batch()
    lam = 0.7
    total = loss_adapt_ce(model, prompts, x, y, _cfg(eps=0.0, lam=lam))
    clean = loss_natural(model, prompts, x, y, _cfg())
    assert total.item() == pytest.approx((1 + lam) * clean.item(), rel=1e-6)


def test_zero_epsilon_adapt_kl_term_vanishes(tuned):
    model, prompts = tuned
    x, y = _batch()
    record = {}
    loss_adapt_kl(model, prompts, x, y, _cfg(eps=0.0), record=record)
    assert abs(record["adv"]) < 1e-6


@pytest.mark.parametrize("method", METHODS)
def test_loss_decomposition(tuned, method):
    model, prompts = tuned
    x, y = _batch(3)
    record = {}
    LOSS_FNS[method](model, prompts, x, y, _cfg(method, lam=0.5), 0, record)
    assert record["total"] == pytest.approx(record["clean"] + record["weight"] * record["adv"], abs=1e-6)


def test_adapt_ce_recomposes_from_independent_forwards(tuned):
    model, prompts = tuned
    x, y = _batch(1)
    cfg = _cfg(lam=2.0)
    record = {}
    total = loss_adapt_ce(model, prompts, x, y, cfg, 4, record)
    clean = ad.cross_entropy(forward(model, x, prompts), y).item()
    adv = ad.cross_entropy(forward(model, record["x_adv"], prompts), y).item()
    assert total.item() == pytest.approx(clean + 2.0 * adv, rel=1e-6)


def test_adapt_kl_term_nonnegative(tuned):
    model, prompts = tuned
    for seed in range(5):
        record = {}
        loss_adapt_kl(model, prompts, *_batch(seed), _cfg(), seed, record)
        assert record["adv"] >= -1e-7


@pytest.mark.parametrize("method", METHODS)
def test_zero_epsilon_reduces_to_natural(tuned, method):
    model, prompts = tuned
    x, y = _batch(2)
    natural = loss_natural(model, prompts, x, y, _cfg()).item()
    record = {}
    LOSS_FNS[method](model, prompts, x, y, _cfg(method, eps=0.0), 0, record)
    if method == "NFGSM":
        # the noise init is 2 eps wide, so eps=0 leaves the input untouched
        assert record["x_adv"].tobytes() == x.tobytes()
    if method in ("TRADES", "MART", "ADAPT_KL"):
        assert abs(record["adv"]) < 1e-6
    expected = natural * (1 + record["weight"]) if method == "ADAPT_CE" else natural
    if method == "MART":
        # the margin term adds -log(1.0001 - p_runner_up) even at eps=0
        assert record["clean"] >= natural
    else:
        assert record["total"] == pytest.approx(expected, rel=1e-5)


def test_at_equals_adapt_ce_adversarial_term(tuned):
    model, prompts = tuned
    x, y = _batch(5)
    attack = AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=3, adaptive=True)
    at = loss_at(model, prompts, x, y, TrainConfig(method="AT", attack=attack), rng=7)
    record = {}
    loss_adapt_ce(model, prompts, x, y, TrainConfig(attack=attack), 7, record)
    assert at.item() == pytest.approx(record["adv"], rel=1e-6)


def test_trades_inner_max_raises_kl_over_noise(tuned):
    model, prompts = tuned
    rng = np.random.default_rng(0)
    for t in prompts.tokens:
        t.data = rng.standard_normal(t.shape).astype(np.float32)
    x, y = _batch(0, 16)
    cfg = _cfg("TRADES", eps=0.1)
    cfg = replace(cfg, attack=replace(cfg.attack, alpha=0.025, steps=10))
    record = {}
    loss_trades(model, prompts, x, y, cfg, 0, record)
    noise = np.clip(x + rng.uniform(-0.1, 0.1, x.shape), 0, 1).astype(np.float32)
    noise_kl = ad.kl_divergence(forward(model, noise, prompts), forward(model, x, prompts)).item()
    assert record["adv"] > noise_kl


def test_nfgsm_example_bounds(tuned):
    model, prompts = tuned
    x, y = _batch()
    eps = 0.05
    out = nfgsm_example(model, prompts, x, y, AttackConfig(epsilon=eps, adaptive=False), rng=0)
    assert out.min() >= 0 and out.max() <= 1
    assert np.max(np.abs(out - x)) <= 3 * eps + 1e-6


def test_zero_lr_leaves_parameters(tuned):
    model, prompts = tuned
    before = [t.data.copy() for t in trainable_tensors(model, prompts)]
    m = train_step(model, prompts, _batch(), _cfg(lr=0.0))
    assert all(np.array_equal(a, t.data) for a, t in zip(before, trainable_tensors(model, prompts)))
    assert {"loss", "clean_acc", "adv_acc"} <= m.keys()
    assert all(t.grad is None for t in trainable_tensors(model, prompts))


def test_empty_batch_rejected(tuned):
    model, prompts = tuned
    with pytest.raises(ValueError):
        train_step(model, prompts, (np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int)), _cfg())


def test_natural_step_matches_hand_gradient(tiny_model, f64):
    # with no prompt tokens only the linear head trains; its gradient is closed form
    model, prompts = tuned_view(tiny_model.astype(np.float64), tokens=0)
    x, y = _batch(0, 5)
    x = x.astype(np.float64)
    tokens = embed_patches(x, model.embed, TINY)
    for layer in model.layers:
        tokens = encoder_layer(tokens, layer, TINY.heads)
    feat = _ln(tokens, model.norm_g, model.norm_b).data[:, 0, :]
    w0, b0 = model.head.weight.data.copy(), model.head.bias.data.copy()
    z = feat @ w0 + b0
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(5), y] -= 1
    lr = 0.3
    train_step(model, prompts, (x, y), TrainConfig(method="NATURAL", attack=AttackConfig(adaptive=False), lr=lr))
    np.testing.assert_allclose(model.head.weight.data - w0, -lr * feat.T @ p / 5, atol=1e-12)
    np.testing.assert_allclose(model.head.bias.data - b0, -lr * p.mean(0), atol=1e-12)


def test_train_steps_are_deterministic(tiny_model):
    finals = []
    for _ in range(2):
        model, prompts = tuned_view(tiny_model, tune_embedding=True)
        rng = np.random.default_rng(0)
        for seed in range(3):
            train_step(model, prompts, _batch(seed), _cfg(), rng=rng)
        finals.append(b"".join(t.data.tobytes() for t in trainable_tensors(model, prompts)))
    assert finals[0] == finals[1]


def test_inner_ascent_on_most_batches(tuned):
    model, prompts = tuned
    rng = np.random.default_rng(0)
    for t in prompts.tokens:
        t.data = rng.standard_normal(t.shape).astype(np.float32)
    ascended = 0
    for seed in range(20):
        trace = []
        x, y = _batch(seed, 8)
        attack_pgd(model, prompts, x, y, AttackConfig(epsilon=8 / 255, alpha=2 / 255, steps=10), rng=seed, trace=trace)
        ascended += trace[-1] >= trace[0]
    assert ascended >= 18


def _toy_ds(n=10):
    return gen_synthetic(3, n, (8, 8, 3), sigma=0.1, seed=0)


@pytest.mark.parametrize("method", METHODS)
def test_frozen_backbone_untouched(tiny_model, method):
    model, prompts = tuned_view(tiny_model, tune_embedding=True)
    snapshot = {k: v.copy() for k, v in tiny_model.state_dict().items()}
    res = prompt_tune(model, prompts, _toy_ds(), replace(_cfg(method), epochs=1, batch_size=16))
    assert res.frozen_hash_before == res.frozen_hash_after
    for k, v in tiny_model.state_dict().items():
        assert v.tobytes() == snapshot[k].tobytes()


def test_zero_epochs_returns_init(tuned):
    model, prompts = tuned
    before = [t.data.copy() for t in trainable_tensors(model, prompts)]
    res = prompt_tune(model, prompts, _toy_ds(), replace(_cfg(), epochs=0))
    assert res.history == [] and res.best_epoch == 0
    assert all(np.array_equal(a, t.data) for a, t in zip(before, trainable_tensors(model, prompts)))


def test_prompt_tune_history_and_csv(tuned):
    model, prompts = tuned
    res = prompt_tune(model, prompts, _toy_ds(), replace(_cfg(), epochs=2, batch_size=8))
    assert [r["epoch"] for r in res.history] == [0, 1]
    lines = res.metrics_csv().splitlines()
    assert lines[0] == "epoch,clean_loss,adv_loss,clean_acc,robust_acc,wall_time"
    assert len(lines) == 3
    assert "wall_time" not in res.metrics_csv(with_time=False)
    best = max(r["robust_acc"] for r in res.history)
    assert res.history[res.best_epoch]["robust_acc"] == best
