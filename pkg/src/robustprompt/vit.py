"""Vision Transformer classifier: patch embedding, pre-norm encoder, linear head.

Token sequences are laid out token-major, ``(batch, tokens, hidden)``.  Prompt
objects are duck-typed: anything with ``input_tokens()`` and
``layer_prefixes(depth)`` can be passed to :func:`forward`.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ViTConfig:
    image_h: int = 16
    image_w: int = 16
    channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    use_class_token: bool = True

    def __post_init__(self):
        p = self.patch_size
        if p <= 0 or self.image_h % p or self.image_w % p:
            raise ValueError(f"image {self.image_h}x{self.image_w} is not divisible into {p}x{p} patches")
        if self.heads <= 0 or self.hidden_dim % self.heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by heads {self.heads}")
        if self.depth < 0 or self.num_classes < 2 or self.channels <= 0 or self.mlp_ratio <= 0:
            raise ValueError("depth, num_classes, channels and mlp_ratio must be positive (>= 2 classes)")

    @property
    def n_patches(self) -> int:
        return (self.image_h // self.patch_size) * (self.image_w // self.patch_size)

    @property
    def n_tokens(self) -> int:
        return self.n_patches + int(self.use_class_token)

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def _param(arr, name) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


def _linear_init(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class PatchEmbed:
    proj: Tensor  # (patch_dim, d)
    bias: Tensor  # (d,)
    pos: Tensor  # (n + cls, d)
    cls: Tensor | None = None  # (d,)

    @classmethod
    def init(cls, cfg: ViTConfig, rng) -> "PatchEmbed":
        d = cfg.hidden_dim
        return cls(
            proj=_param(_linear_init(rng, cfg.patch_dim, d), "embed.proj"),
            bias=_param(np.zeros(d), "embed.bias"),
            pos=_param(0.02 * rng.standard_normal((cfg.n_tokens, d)), "embed.pos"),
            cls=_param(0.02 * rng.standard_normal(d), "embed.cls") if cfg.use_class_token else None,
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed.proj", self.proj
        yield "embed.bias", self.bias
        yield "embed.pos", self.pos
        if self.cls is not None:
            yield "embed.cls", self.cls


@dataclass
class EncoderLayer:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, cfg: ViTConfig, rng, index: int) -> "EncoderLayer":
        d, h = cfg.hidden_dim, cfg.hidden_dim * cfg.mlp_ratio
        pre = f"layers.{index}."
        return cls(
            ln1_g=_param(np.ones(d), pre + "ln1_g"),
            ln1_b=_param(np.zeros(d), pre + "ln1_b"),
            wq=_param(_linear_init(rng, d, d), pre + "wq"),
            bq=_param(np.zeros(d), pre + "bq"),
            wk=_param(_linear_init(rng, d, d), pre + "wk"),
            bk=_param(np.zeros(d), pre + "bk"),
            wv=_param(_linear_init(rng, d, d), pre + "wv"),
            bv=_param(np.zeros(d), pre + "bv"),
            wo=_param(_linear_init(rng, d, d), pre + "wo"),
            bo=_param(np.zeros(d), pre + "bo"),
            ln2_g=_param(np.ones(d), pre + "ln2_g"),
            ln2_b=_param(np.zeros(d), pre + "ln2_b"),
            w1=_param(_linear_init(rng, d, h), pre + "w1"),
            b1=_param(np.zeros(h), pre + "b1"),
            w2=_param(_linear_init(rng, h, d), pre + "w2"),
            b2=_param(np.zeros(d), pre + "b2"),
        )

    def named(self, index: int) -> Iterator[tuple[str, Tensor]]:
        for k, v in vars(self).items():
            yield f"layers.{index}.{k}", v


@dataclass
class ClassifierHead:
    weight: Tensor  # (d, num_classes)
    bias: Tensor  # (num_classes,)

    @classmethod
    def init(cls, cfg: ViTConfig, rng) -> "ClassifierHead":
        return cls(
            weight=_param(_linear_init(rng, cfg.hidden_dim, cfg.num_classes), "head.weight"),
            bias=_param(np.zeros(cfg.num_classes), "head.bias"),
        )

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "head.weight", self.weight
        yield "head.bias", self.bias


@dataclass
class ViTModel:
    config: ViTConfig
    embed: PatchEmbed
    layers: list[EncoderLayer]
    norm_g: Tensor
    norm_b: Tensor
    head: ClassifierHead
    frozen: dict[str, bool] = field(default_factory=lambda: {"embed": False, "layers": False, "head": False})

    @classmethod
    def init(cls, cfg: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        embed = PatchEmbed.init(cfg, rng)
        layers = [EncoderLayer.init(cfg, rng, i) for i in range(cfg.depth)]
        d = cfg.hidden_dim
        return cls(
            config=cfg,
            embed=embed,
            layers=layers,
            norm_g=_param(np.ones(d), "norm_g"),
            norm_b=_param(np.zeros(d), "norm_b"),
            head=ClassifierHead.init(cfg, rng),
        )

    def group(self, name: str) -> list[tuple[str, Tensor]]:
        if name == "embed":
            return list(self.embed.named())
        if name == "layers":
            out = [kv for i, layer in enumerate(self.layers) for kv in layer.named(i)]
            return out + [("norm_g", self.norm_g), ("norm_b", self.norm_b)]
        if name == "head":
            return list(self.head.named())
        raise KeyError(name)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.group("embed") + self.group("layers") + self.group("head")

    def set_frozen(self, **flags: bool) -> None:
        for name, frozen in flags.items():
            self.frozen[name] = frozen
            for _, t in self.group(name):
                t.requires_grad = not frozen
                t.grad = None

    def freeze_backbone(self) -> "ViTModel":
        self.set_frozen(embed=True, layers=True, head=True)
        return self

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise ad.ShapeError(f"load_state_dict: {k} shape {state[k].shape} vs {t.shape}")
            t.data = np.ascontiguousarray(state[k], dtype=t.dtype)

    def astype(self, dtype) -> "ViTModel":
        for _, t in self.named_parameters():
            t.data = t.data.astype(dtype)
        return self

    def copy_group(self, name: str) -> None:
        """Give ``name`` fresh parameter tensors so in-place updates stay local."""
        if name == "embed":
            e = self.embed
            self.embed = PatchEmbed(
                proj=_clone(e.proj), bias=_clone(e.bias), pos=_clone(e.pos), cls=_clone(e.cls) if e.cls is not None else None
            )
        elif name == "head":
            self.head = ClassifierHead(weight=_clone(self.head.weight), bias=_clone(self.head.bias))
        else:
            raise KeyError(name)

    def backbone_hash(self, groups=("layers",)) -> str:
        h = hashlib.sha256()
        for g in groups:
            for k, t in self.group(g):
                h.update(k.encode())
                h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()


def _clone(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.dtype, name=t.name)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply ``x @ w + b`` over the last axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    y = ad.matmul(flat, w)
    y = ad.add(y, ad.broadcast_to(b, y.shape))
    return ad.reshape(y, lead + (w.shape[1],))


def _ln(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.layer_norm(x, g, b, eps=1e-6)


def embed_patches(images, embed: PatchEmbed, cfg: ViTConfig) -> Tensor:
    """Split ``(B, h, w, c)`` images into row-major patches and project them."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.shape[1:] != (cfg.image_h, cfg.image_w, cfg.channels):
        raise ad.ShapeError(
            f"embed_patches: image shape {x.shape[1:]} vs config {(cfg.image_h, cfg.image_w, cfg.channels)}"
        )
    B, p = x.shape[0], cfg.patch_size
    gh, gw = cfg.image_h // p, cfg.image_w // p
    x = ad.reshape(x, (B, gh, p, gw, p, cfg.channels))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (B, gh * gw, cfg.patch_dim))
    tokens = linear(x, embed.proj, embed.bias)
    if embed.cls is not None:
        cls = ad.broadcast_to(ad.reshape(embed.cls, (1, 1, -1)), (B, 1, cfg.hidden_dim))
        tokens = ad.concat([cls, tokens], axis=1)
    return ad.add(tokens, ad.broadcast_to(embed.pos, tokens.shape))


def attention(tokens: Tensor, layer: EncoderLayer, heads: int, kv_prefix: Tensor | None = None, return_weights=False):
    """Pre-norm multi-head self-attention block with residual.

    ``kv_prefix`` is an ``(m, d)`` block prepended to the key/value sequence
    only; queries and the output keep the input's token count.
    """
    B, t, d = tokens.shape
    if kv_prefix is not None and (kv_prefix.ndim != 2 or kv_prefix.shape[1] != d):
        raise ad.ShapeError(f"attention: prefix shape {kv_prefix.shape} vs hidden dim {d}")
    dh = d // heads
    h = _ln(tokens, layer.ln1_g, layer.ln1_b)
    kv_in = h
    if kv_prefix is not None and kv_prefix.shape[0] > 0:
        m = kv_prefix.shape[0]
        kv_in = ad.concat([ad.broadcast_to(ad.reshape(kv_prefix, (1, m, d)), (B, m, d)), h], axis=1)
    s = kv_in.shape[1]

    def split(x, n):
        return ad.transpose(ad.reshape(x, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(h, layer.wq, layer.bq), t)
    k = split(linear(kv_in, layer.wk, layer.bk), s)
    v = split(linear(kv_in, layer.wv, layer.bv), s)
    scores = ad.mul(ad.bmm(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(ad.bmm(weights, v), (0, 2, 1, 3)), (B, t, d))
    out = ad.add(tokens, linear(ctx, layer.wo, layer.bo))
    return (out, weights) if return_weights else out


def mlp_block(tokens: Tensor, layer: EncoderLayer) -> Tensor:
    h = _ln(tokens, layer.ln2_g, layer.ln2_b)
    h = linear(ad.gelu(linear(h, layer.w1, layer.b1)), layer.w2, layer.b2)
    return ad.add(tokens, h)


def encoder_layer(tokens: Tensor, layer: EncoderLayer, heads: int, kv_prefix: Tensor | None = None) -> Tensor:
    return mlp_block(attention(tokens, layer, heads, kv_prefix), layer)


def forward(model: ViTModel, images, prompts=None) -> Tensor:
    """Pre-softmax logits for a batch ``(B, h, w, c)`` or a single ``(h, w, c)`` image."""
    cfg = model.config
    x = images if isinstance(images, Tensor) else Tensor(images)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    tokens = embed_patches(x, model.embed, cfg)
    B = tokens.shape[0]
    offset = 0
    prefixes = [None] * cfg.depth
    if prompts is not None:
        pt = prompts.input_tokens()
        if pt is not None and pt.shape[0] > 0:
            if pt.ndim != 2 or pt.shape[1] != cfg.hidden_dim:
                raise ad.ShapeError(f"forward: prompt shape {pt.shape} vs hidden dim {cfg.hidden_dim}")
            offset = pt.shape[0]
            tokens = ad.concat([ad.broadcast_to(ad.reshape(pt, (1,) + pt.shape), (B,) + pt.shape), tokens], axis=1)
        prefixes = prompts.layer_prefixes(cfg.depth)
    for layer, prefix in zip(model.layers, prefixes):
        tokens = encoder_layer(tokens, layer, cfg.heads, prefix)
    tokens = _ln(tokens, model.norm_g, model.norm_b)
    if cfg.use_class_token:
        feat = tokens[:, offset, :]
    else:
        feat = ad.mean(tokens[:, offset:, :], axis=1)
    logits = linear(feat, model.head.weight, model.head.bias)
    return ad.reshape(logits, (cfg.num_classes,)) if single else logits


def predict(model: ViTModel, images, prompts=None, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(model, images[i : i + batch_size], prompts).data.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: ViTModel, images, labels, prompts=None) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy: empty dataset")
    return float((predict(model, images, prompts) == np.asarray(labels)).mean() * 100.0)


def pretrain_backbone(
    dataset,
    config: ViTConfig,
    *,
    epochs: int = 10,
    lr: float = 1e-3,
    weight_decay: float = 0.0,
    batch_size: int = 64,
    seed: int = 0,
    log=None,
) -> ViTModel:
    """Naturally train a ViT on ``dataset``; return it with the encoder frozen.

    ``epochs=0`` returns the seeded initialization.  Training uses Adam.
    """
    from .data import batch_iter
    from .optim import Adam

    if len(dataset) == 0:
        raise ValueError("pretrain_backbone: empty dataset")
    model = ViTModel.init(config, seed)
    params = [t for _, t in model.named_parameters()]
    opt = Adam(params, lr=lr, weight_decay=weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / batch_size)
    total = max(epochs * steps_per_epoch, 1)
    step = 0
    for epoch in range(epochs):
        for xb, yb in batch_iter(dataset, batch_size, seed=seed, epoch=epoch):
            opt.lr = lr * 0.5 * (1 + math.cos(math.pi * step / total))
            loss = ad.cross_entropy(forward(model, xb), yb)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            step += 1
        if log is not None:
            log(epoch, accuracy(model, dataset.images, dataset.labels))
    model.set_frozen(layers=True)
    return model
