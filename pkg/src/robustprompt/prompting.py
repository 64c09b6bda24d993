"""Prompt parameters (PT and PT2), layer schedules and tuned-parameter accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vit import ViTModel

PT = "pt"
PT2 = "pt2"


def make_schedule(budget: int, k: int, depth: int) -> list[int]:
    """``budget // k`` tokens on each of the first ``k`` layers, zero elsewhere."""
    if budget < 0 or depth < 0:
        raise ValueError("budget and depth must be non-negative")
    if budget == 0:
        return [0] * depth
    if not 1 <= k <= depth:
        raise ValueError(f"cannot prompt {k} layers of a depth-{depth} model")
    if budget % k:
        raise ValueError(f"token budget {budget} is not divisible by {k} layers")
    return [budget // k] * k + [0] * (depth - k)


@dataclass
class PromptParams:
    variant: str
    tokens: list[Tensor]  # PT: one (m, d) block; PT2: one (m_i, d) block per layer
    tune_embedding: bool = False
    initial: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.variant not in (PT, PT2):
            raise ValueError(f"unknown prompt variant {self.variant!r}")
        if self.variant == PT and len(self.tokens) != 1:
            raise ValueError("PT prompts hold exactly one token block")
        if not self.initial:
            self.initial = [t.data.copy() for t in self.tokens]

    @classmethod
    def init(
        cls,
        variant: str,
        hidden_dim: int,
        depth: int,
        tokens: int,
        layers: int | None = None,
        tune_embedding: bool = False,
        seed: int = 0,
    ) -> "PromptParams":
        """Uniform(-1/sqrt(d), 1/sqrt(d)) prompts for a token budget."""
        rng = np.random.default_rng([seed, 7919])
        bound = 1.0 / math.sqrt(hidden_dim)
        if variant == PT:
            if layers not in (None, 1):
                raise ValueError("PT prompts have no layer schedule")
            sched = [tokens]
        elif variant == PT2:
            sched = make_schedule(tokens, depth if layers is None else layers, depth)
        else:
            raise ValueError(f"unknown prompt variant {variant!r}")
        blocks = [
            Tensor(rng.uniform(-bound, bound, size=(m, hidden_dim)), requires_grad=True, name=f"prompt.{i}")
            for i, m in enumerate(sched)
        ]
        return cls(variant, blocks, tune_embedding)

    @property
    def schedule(self) -> list[int]:
        return [t.shape[0] for t in self.tokens]

    @property
    def budget(self) -> int:
        return sum(self.schedule)

    def validate(self, model: ViTModel) -> None:
        d, depth = model.config.hidden_dim, model.config.depth
        for t in self.tokens:
            if t.ndim != 2 or t.shape[1] != d:
                raise ad.ShapeError(f"prompt block shape {t.shape} vs hidden dim {d}")
        if self.variant == PT2 and len(self.tokens) != depth:
            raise ValueError(f"PT2 schedule has {len(self.tokens)} layers, model has {depth}")

    def input_tokens(self) -> Tensor | None:
        return self.tokens[0] if self.variant == PT else None

    def layer_prefixes(self, depth: int) -> list[Tensor | None]:
        if self.variant == PT:
            return [None] * depth
        if len(self.tokens) != depth:
            raise ValueError(f"PT2 schedule has {len(self.tokens)} layers, model has {depth}")
        return [t if t.shape[0] > 0 else None for t in self.tokens]

    def detached(self) -> "PromptParams":
        return PromptParams(self.variant, [t.detach() for t in self.tokens], self.tune_embedding, self.initial)

    def stale(self) -> "PromptParams":
        """The prompts as initialized, before any tuning."""
        return PromptParams(self.variant, [Tensor(a) for a in self.initial], self.tune_embedding, self.initial)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"prompt.{i}": t.data.copy() for i, t in enumerate(self.tokens)}


def attach_pt(tokens: Tensor, prompt: Tensor) -> Tensor:
    """Prepend ``(m, d)`` prompt tokens to a ``(B, t, d)`` sequence."""
    if prompt.ndim != 2 or prompt.shape[1] != tokens.shape[-1]:
        raise ad.ShapeError(f"attach_pt: prompt shape {prompt.shape} vs tokens {tokens.shape}")
    if prompt.shape[0] == 0:
        return tokens
    B = tokens.shape[0]
    block = ad.broadcast_to(ad.reshape(prompt, (1,) + prompt.shape), (B,) + prompt.shape)
    return ad.concat([block, tokens], axis=1)


def attach_pt2(model: ViTModel, prompts: PromptParams):
    """Return ``images -> logits`` running ``model`` with per-layer key/value prefixes."""
    from .vit import forward

    if prompts.variant != PT2:
        raise ValueError("attach_pt2 needs PT2 prompts")
    prompts.validate(model)
    return lambda images: forward(model, images, prompts)


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor]

    @property
    def count(self) -> int:
        return sum(t.size for t in self.tensors)


def trainable_parameters(model: ViTModel, prompts: PromptParams | None) -> tuple[list[ParamGroup], int]:
    """Prompt tokens, the head, and the patch embedding iff ``tune_embedding``."""
    groups = []
    if prompts is not None:
        groups.append(ParamGroup("prompts", list(prompts.tokens)))
    groups.append(ParamGroup("head", [t for _, t in model.group("head")]))
    if prompts is not None and prompts.tune_embedding:
        groups.append(ParamGroup("embed", [t for _, t in model.group("embed")]))
    return groups, sum(g.count for g in groups)


def count_parameters(hidden_dim: int, num_classes: int, budget: int, embed_size: int = 0) -> int:
    """Closed-form tuned-parameter count: tokens + head (+ embedding)."""
    return budget * hidden_dim + hidden_dim * num_classes + num_classes + embed_size


def prepare_for_tuning(backbone: ViTModel, prompts: PromptParams, num_classes: int | None = None, warm_head: bool = False, seed: int = 0) -> ViTModel:
    """A tuning view of ``backbone``: encoder shared and frozen, head (and embedding) private.

    The head is re-initialized unless ``warm_head``; a different class count
    forces re-initialization.
    """
    from .vit import ClassifierHead, ViTConfig

    cfg = backbone.config
    if num_classes is not None and num_classes != cfg.num_classes:
        cfg = ViTConfig(**{**vars(cfg), "num_classes": num_classes})
        warm_head = False
    model = ViTModel(cfg, backbone.embed, backbone.layers, backbone.norm_g, backbone.norm_b, backbone.head, dict(backbone.frozen))
    if warm_head:
        model.copy_group("head")
    else:
        model.head = ClassifierHead.init(cfg, np.random.default_rng([seed, 104729]))
        if model.head.weight.dtype != backbone.norm_g.dtype:
            model.head.weight.data = model.head.weight.data.astype(backbone.norm_g.dtype)
            model.head.bias.data = model.head.bias.data.astype(backbone.norm_g.dtype)
    if prompts.tune_embedding:
        model.copy_group("embed")
    for name, t in backbone.group("layers"):
        t.requires_grad = False
    for _, t in model.group("embed"):
        t.requires_grad = prompts.tune_embedding
    for _, t in model.group("head"):
        t.requires_grad = True
    model.frozen = {"embed": not prompts.tune_embedding, "layers": True, "head": False}
    prompts.validate(model)
    return model
