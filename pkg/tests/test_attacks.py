import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustprompt import autodiff as ad
from robustprompt.attacks import (
    AttackConfig,
    attack_fgsm,
    attack_pgd,
    cw_loss,
    input_gradient,
    project_linf,
    run_attack,
    surrogate_prompts,
)
from robustprompt.autodiff import Tensor
from robustprompt.vit import forward

from toys import TinyMLP, grid_max_loss


def test_project_clamp_examples():
    assert project_linf(np.array([0.9]), np.array([0.5]), 0.1)[0] == pytest.approx(0.6)
    # the pixel floor binds before the ball floor at -0.08
    assert project_linf(np.array([-0.5]), np.array([0.02]), 0.1)[0] == 0.0


def test_project_rejects_negative_epsilon():
    with pytest.raises(ValueError):
        project_linf(np.zeros(2), np.zeros(2), -0.1)


unit = arrays(np.float32, 6, elements=st.floats(0, 1, width=32))


@settings(max_examples=200, deadline=None)
@given(unit, arrays(np.float32, 6, elements=st.floats(-2, 2, width=32)), st.floats(0, 0.5))
def test_project_is_idempotent_and_sound(x, noise, eps):
    once = project_linf(x + noise, x, eps)
    assert once.tobytes() == project_linf(once, x, eps).tobytes()
    assert np.all(once >= 0) and np.all(once <= 1)
    assert np.max(np.abs(once - x)) <= eps + 1e-6


def test_project_inside_is_unchanged():
    x = np.array([0.3, 0.7], dtype=np.float32)
    inside = x + np.array([0.01, -0.02], dtype=np.float32)
    assert project_linf(inside, x, 0.05).tobytes() == inside.tobytes()


@pytest.mark.parametrize(
    "cfg",
    [
        dict(epsilon=-1.0),
        dict(steps=-1),
        dict(alpha=0.0, steps=3),
        dict(loss="l2"),
        dict(traditional="ignore"),
        dict(norm="2"),
    ],
)
def test_attack_config_validation(cfg):
    with pytest.raises(ValueError):
        AttackConfig(**cfg)


def test_zero_steps_no_init_is_identity():
    m = TinyMLP(4, seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 4)).astype(np.float32)
    out = attack_pgd(m, None, x, [0, 1, 0], AttackConfig(steps=0, rand_init=False, adaptive=False))
    assert out.tobytes() == x.tobytes()


def test_zero_epsilon_is_identity():
    m = TinyMLP(4, seed=0)
    x = np.random.default_rng(0).uniform(size=(3, 4)).astype(np.float32)
    for cfg in (AttackConfig(epsilon=0.0, steps=7, adaptive=False), AttackConfig(epsilon=0.0, adaptive=False)):
        assert attack_pgd(m, None, x, [0, 1, 0], cfg).tobytes() == x.tobytes()
        assert attack_fgsm(m, None, x, [0, 1, 0], cfg).tobytes() == x.tobytes()


def _linear_two_class(w):
    w = np.asarray(w, dtype=np.float64)

    def model(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = ad.reshape(x, (x.shape[0], -1))
        z1 = ad.matmul(flat, Tensor(w.reshape(-1, 1), dtype=x.dtype))
        return ad.concat([ad.mul(z1, 0.0), z1], axis=1)

    return model


def test_one_step_on_linear_loss_moves_by_sign():
    # CE for label 0 with logits [0, w.x] increases along sign(w)
    w = np.array([1.5, -0.2, 0.0, 3.0])
    x = np.array([[0.5, 0.5, 0.5, 0.99]], dtype=np.float32)
    alpha = 0.05
    out = attack_pgd(_linear_two_class(w), None, x, [0], AttackConfig(epsilon=0.1, alpha=alpha, steps=1, rand_init=False, adaptive=False))
    np.testing.assert_allclose(out, np.clip(x + alpha * np.sign(w), 0, 1), atol=1e-7)


def test_fgsm_on_linear_model_is_full_sign_step():
    w = np.array([0.7, -1.1, 0.4])
    x = np.array([[0.5, 0.5, 0.5]], dtype=np.float32)
    eps = 8 / 255
    out = attack_fgsm(_linear_two_class(w), None, x, [0], AttackConfig(epsilon=eps, adaptive=False))
    np.testing.assert_allclose(out - x, eps * np.sign(w)[None], atol=1e-7)


def test_cw_loss_examples():
    assert cw_loss(Tensor([5.0, 1.0]), 0).item() == pytest.approx(-4.0)
    z = Tensor([[3.0, 1.0, 2.0], [0.0, 4.0, -1.0]])
    assert np.all(cw_loss(z, [0, 1], reduction="none").data < 0)
    with pytest.raises(ValueError):
        cw_loss(Tensor([[1.0]]), [0])


def test_cw_grad_matches_finite_differences():
    z0 = np.array([[1.0, 2.5, 0.3], [0.2, -1.0, 0.9]])
    with ad.precision(np.float64):
        z = Tensor(z0, requires_grad=True)
        ad.backward(cw_loss(z, [0, 2]))
        num = ad.finite_diff_gradient(lambda v: cw_loss(Tensor(v), [0, 2]).item(), z0)
    np.testing.assert_allclose(z.grad, num, atol=1e-8)


@pytest.mark.parametrize("seed", [0, 1, 5])
def test_cw_attack_matches_ce_and_brute_force_on_margin_toy(seed):
    # three-class toy over 2-D inputs; a dense grid over each ball bounds what any attack can flip
    m = TinyMLP(2, 8, 3, seed=seed)
    xs = np.stack(np.meshgrid(np.linspace(0.05, 0.95, 15), np.linspace(0.05, 0.95, 15)), -1).reshape(-1, 2)
    eps = 0.1
    with ad.precision(np.float64):
        y = m(xs).data.argmax(1)
        flips = {}
        for loss in ("ce", "cw"):
            adv = attack_pgd(m, None, xs, y, AttackConfig(epsilon=eps, alpha=eps / 8, steps=20, loss=loss, adaptive=False), rng=0)
            flips[loss] = m(adv).data.argmax(1) != y
        offs = np.stack(np.meshgrid(np.linspace(-eps, eps, 21), np.linspace(-eps, eps, 21)), -1).reshape(-1, 2)
        brute = np.array([(m(np.clip(x + offs, 0, 1)).data.argmax(1) != c).any() for x, c in zip(xs, y)])
    assert flips["cw"].sum() >= flips["ce"].sum() > 0
    # gradient attacks flip at least 95% of the points brute force can flip
    assert flips["cw"].sum() >= 0.95 * brute.sum()


@pytest.mark.parametrize("eps", [0.02, 0.05, 0.1])
def test_pgd50_near_grid_optimum(eps):
    for seed in range(20):
        rng = np.random.default_rng(seed)
        m = TinyMLP(2, 8, 2, seed=seed)
        x0 = rng.uniform(0, 1, 2)
        with ad.precision(np.float64):
            y = int(m(x0[None]).data.argmax())
            xa = attack_pgd(m, None, x0[None], [y], AttackConfig(epsilon=eps, alpha=eps / 10, steps=50, adaptive=False), rng=seed)
        assert m.loss_np(xa, [y])[0] >= 0.95 * grid_max_loss(m, x0, y, eps)


def test_grid_maximum_monotone_in_epsilon():
    for seed in range(10):
        m = TinyMLP(2, 8, 2, seed=seed)
        x0 = np.random.default_rng(seed).uniform(0, 1, 2)
        y = int(m(x0[None]).data.argmax())
        vals = [grid_max_loss(m, x0, y, e, n=101) for e in (0.0, 0.02, 0.05, 0.1, 0.2)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_pgd_trace_ascends_on_average():
    m = TinyMLP(6, seed=1)
    x = np.random.default_rng(2).uniform(size=(16, 6)).astype(np.float32)
    y = m(x).data.argmax(1)
    trace = []
    attack_pgd(m, None, x, y, AttackConfig(epsilon=0.1, alpha=0.02, steps=10, adaptive=False), trace=trace)
    assert len(trace) == 11
    assert trace[-1] > trace[0]


@pytest.mark.parametrize("adaptive", [True, False])
@pytest.mark.parametrize("loss", ["ce", "cw", "kl"])
def test_vit_attacks_stay_in_box(tuned, adaptive, loss):
    model, prompts = tuned
    x = np.random.default_rng(0).uniform(size=(4, 8, 8, 3)).astype(np.float32)
    x[0, 0, 0] = [0.0, 1.0, 0.5]
    cfg = AttackConfig(epsilon=0.05, alpha=0.02, steps=3, loss=loss, adaptive=adaptive)
    for out in (attack_pgd(model, prompts, x, [0, 1, 2, 0], cfg), attack_fgsm(model, prompts, x, [0, 1, 2, 0], cfg)):
        assert out.dtype == np.float32 and out.shape == x.shape
        assert np.max(np.abs(out - x)) <= 0.05 + 1e-6
        assert out.min() >= 0 and out.max() <= 1


def test_adaptive_requires_prompts(tiny_model):
    with pytest.raises(ValueError):
        attack_pgd(tiny_model, None, np.zeros((1, 8, 8, 3)), [0], AttackConfig())


def test_surrogates():
    from robustprompt.prompting import PromptParams

    p = PromptParams.init("pt2", 16, 2, 4, seed=0)
    p.tokens[0].data += 1.0
    assert surrogate_prompts(p, AttackConfig(adaptive=False)) is None
    stale = surrogate_prompts(p, AttackConfig(adaptive=False, traditional="stale"))
    np.testing.assert_array_equal(stale.tokens[0].data, p.initial[0])
    live = surrogate_prompts(p, AttackConfig(adaptive=True))
    np.testing.assert_array_equal(live.tokens[0].data, p.tokens[0].data)
    assert not live.tokens[0].requires_grad


def test_adaptive_and_traditional_gradients_differ(tuned):
    model, prompts = tuned
    rng = np.random.default_rng(0)
    for t in prompts.tokens:
        t.data = rng.standard_normal(t.shape).astype(np.float32)
    x = rng.uniform(size=(4, 8, 8, 3)).astype(np.float32)
    y = [0, 1, 2, 1]
    g_a, _ = input_gradient(lambda v: forward(model, v, prompts.detached()), x, y)
    g_t, _ = input_gradient(lambda v: forward(model, v, None), x, y)
    cos = float((g_a * g_t).sum() / (np.linalg.norm(g_a) * np.linalg.norm(g_t)))
    assert cos < 0.999


def test_attack_leaves_parameter_grads_alone(tuned):
    model, prompts = tuned
    x = np.random.default_rng(0).uniform(size=(2, 8, 8, 3)).astype(np.float32)
    attack_pgd(model, prompts, x, [0, 1], AttackConfig(steps=2))
    assert all(t.grad is None for t in prompts.tokens)
    assert all(t.grad is None for _, t in model.named_parameters())


def test_run_attack_chunking_is_deterministic(tuned):
    model, prompts = tuned
    x = np.random.default_rng(0).uniform(size=(5, 8, 8, 3)).astype(np.float32)
    y = [0, 1, 2, 0, 1]
    cfg = AttackConfig(steps=2)
    a = run_attack(model, prompts, x, y, cfg, rng=3, batch_size=2)
    b = run_attack(model, prompts, x, y, cfg, rng=3, batch_size=2)
    assert a.tobytes() == b.tobytes()
    assert a.shape == x.shape
