"""White-box l-inf attacks: FGSM and PGD, adaptive or traditional, CE/CW/KL losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import ViTModel, forward

LOSSES = ("ce", "cw", "kl")


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    rand_init: bool = True
    loss: str = "ce"
    adaptive: bool = True
    # how a traditional attack treats the prompt: drop it, or use its untuned initialization
    traditional: str = "remove"
    norm: str = "inf"

    def __post_init__(self):
        if self.norm != "inf":
            raise ValueError("only the l-inf threat model is implemented")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.steps > 0 and self.alpha <= 0:
            raise ValueError("alpha must be positive when steps > 0")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown attack loss {self.loss!r}")
        if self.traditional not in ("remove", "stale"):
            raise ValueError(f"unknown traditional mode {self.traditional!r}")


def project_linf(x_adv: np.ndarray, x_orig: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the l-inf ball around ``x_orig``, then into [0, 1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if np.shape(x_adv) != np.shape(x_orig):
        raise ad.ShapeError(f"project_linf: shape mismatch {np.shape(x_adv)} vs {np.shape(x_orig)}")
    out = np.minimum(np.maximum(x_adv, x_orig - epsilon), x_orig + epsilon)
    return np.clip(out, 0.0, 1.0)


def cw_loss(logits, labels, reduction: str = "mean") -> Tensor:
    """Margin ``max_{i != y} z_i - z_y``; positive means misclassified."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    single = logits.ndim == 1
    z = ad.reshape(logits, (1, -1)) if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.shape[1] < 2:
        raise ValueError("cw_loss needs at least two classes")
    mask = np.zeros(z.shape, dtype=z.dtype)
    mask[np.arange(len(y)), y] = -np.inf
    other = ad.max(ad.add(z, Tensor(mask, dtype=z.dtype)), axis=-1)
    per = ad.sub(other, ad.pick(z, y))
    if single:
        return ad.reshape(per, ())
    return per if reduction == "none" else ad.mean(per)


def surrogate_prompts(prompts, cfg: AttackConfig):
    """Prompts the attacker differentiates through; ``None`` means removed."""
    if cfg.adaptive:
        if prompts is None:
            raise ValueError("adaptive attacks need the prompt")
        return prompts.detached()
    if prompts is None or cfg.traditional == "remove":
        return None
    return prompts.stale()


def _logits_fn(model, prompts):
    if isinstance(model, ViTModel):
        return lambda x: forward(model, x, prompts)
    return model


def attack_loss(logits: Tensor, y, kind: str, clean_logits: np.ndarray | None = None) -> Tensor:
    if kind == "ce":
        return ad.cross_entropy(logits, y)
    if kind == "cw":
        return cw_loss(logits, y)
    if kind == "kl":
        return ad.kl_divergence(logits, Tensor(clean_logits, dtype=logits.dtype))
    raise ValueError(f"unknown attack loss {kind!r}")


def input_gradient(fn, x: np.ndarray, y, kind: str = "ce", clean_logits=None) -> tuple[np.ndarray, float]:
    """Gradient of the attack loss w.r.t. the input, plus the loss value."""
    xt = Tensor(x, requires_grad=True, dtype=x.dtype)
    loss = attack_loss(fn(xt), y, kind, clean_logits)
    (g,) = ad.grad(loss, [xt])
    return g, float(loss.data)


def attack_pgd(model, prompts, x, y, cfg: AttackConfig, rng: np.random.Generator | int | None = 0, trace: list | None = None) -> np.ndarray:
    """Sign-gradient ascent on the attack loss with l-inf projection.

    Adaptive attacks take gradients through the prompted model; traditional
    ones through the same head/embedding with the prompt removed (or stale).
    ``trace``, if given, receives the attack-loss value before each step and
    after the last one.
    """
    x = np.asarray(x, dtype=ad.get_default_dtype())
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    fn = _logits_fn(model, surrogate_prompts(prompts, cfg) if isinstance(model, ViTModel) else None)
    clean = None
    if cfg.loss == "kl":
        with ad.no_grad():
            clean = fn(Tensor(x)).data
    x_adv = x.copy()
    if cfg.rand_init and cfg.epsilon > 0:
        x_adv = project_linf(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(x.dtype), x, cfg.epsilon)
    for _ in range(cfg.steps):
        g, val = input_gradient(fn, x_adv, y, cfg.loss, clean)
        if trace is not None:
            trace.append(val)
        x_adv = project_linf(x_adv + cfg.alpha * np.sign(g).astype(x.dtype), x, cfg.epsilon)
    if trace is not None:
        with ad.no_grad():
            trace.append(float(attack_loss(fn(Tensor(x_adv)), y, cfg.loss, clean).data))
    return x_adv.astype(x.dtype, copy=False)


def attack_fgsm(model, prompts, x, y, cfg: AttackConfig | None = None, rng=0) -> np.ndarray:
    """One full-magnitude signed step (alpha = epsilon) without random start."""
    cfg = cfg or AttackConfig()
    one = AttackConfig(
        epsilon=cfg.epsilon,
        alpha=max(cfg.epsilon, 1e-12),
        steps=1,
        rand_init=False,
        loss=cfg.loss,
        adaptive=cfg.adaptive,
        traditional=cfg.traditional,
    )
    return attack_pgd(model, prompts, x, y, one, rng)


def run_attack(model, prompts, x, y, cfg: AttackConfig, rng=0, batch_size: int = 256) -> np.ndarray:
    """Attack a dataset in fixed-size chunks; chunks share one RNG stream."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = [attack_pgd(model, prompts, x[i : i + batch_size], y[i : i + batch_size], cfg, rng) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.asarray(x)
