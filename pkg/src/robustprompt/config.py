"""Plain-text ``key = value`` run configuration with fail-fast key checking."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from fractions import Fraction

from .attacks import AttackConfig
from .data import Dataset, gen_synthetic, load_cifar10_binary
from .defenses import TrainConfig
from .vit import ViTConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # data
    data: str = "synthetic"
    data_path: str = ""
    test_path: str = ""
    classes: int = 10
    per_class: int = 150
    test_per_class: int = 20
    sigma: float = 0.15
    spread: float = 1.0
    block: int = 2
    domain: int = 0
    pretrain_domain: int = 1
    pretrain_classes: int = 10
    pretrain_per_class: int = 100
    # backbone
    image_h: int = 16
    image_w: int = 16
    channels: int = 3
    patch_size: int = 4
    hidden_dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    use_class_token: bool = True
    pretrain_epochs: int = 8
    pretrain_lr: float = 1e-3
    pretrain_batch_size: int = 64
    # prompts
    variant: str = "pt2"
    tokens: int = 48
    layers: int = 0  # 0 means every layer for PT2
    tune_embedding: bool = False
    warm_head: bool = False
    # attack
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    rand_init: bool = True
    attack_loss: str = "ce"
    adaptive: bool = True
    traditional: str = "remove"
    # training
    method: str = "ADAPT_CE"
    lam: float = 1.0
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cyclic"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    trades_beta: float = 6.0
    mart_beta: float = 5.0
    kl_inner: str = "ce"
    val_fraction: float = 0.1
    # evaluation
    attacks: str = "clean,fgsm,pgd10,pgd10-adaptive"
    grid: int = 25
    radius: float = 8 / 255
    slice_batch: int = 64

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def override(self, values: dict[str, str]) -> "RunConfig":
        return replace(self, **{k: _parse(k, v) for k, v in values.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values: dict[str, str] = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return cls().override(values)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    # builders -------------------------------------------------------------

    def vit(self, num_classes: int | None = None) -> ViTConfig:
        return ViTConfig(
            image_h=self.image_h,
            image_w=self.image_w,
            channels=self.channels,
            patch_size=self.patch_size,
            hidden_dim=self.hidden_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_classes=num_classes or self.classes,
            use_class_token=self.use_class_token,
        )

    def attack(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.epsilon,
            alpha=self.alpha,
            steps=self.steps,
            rand_init=self.rand_init,
            loss=self.attack_loss,
            adaptive=self.adaptive,
            traditional=self.traditional,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            method=self.method,
            lam=self.lam,
            attack=self.attack(),
            optimizer=self.optimizer,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            schedule=self.schedule,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            trades_beta=self.trades_beta,
            mart_beta=self.mart_beta,
            kl_inner=self.kl_inner,
            val_fraction=self.val_fraction,
        )

    def image_size(self) -> tuple[int, int, int]:
        return (self.image_h, self.image_w, self.channels)

    def pretrain_data(self, split: str = "train") -> Dataset:
        n = self.pretrain_per_class if split == "train" else self.test_per_class
        return gen_synthetic(self.pretrain_classes, n, self.image_size(), self.sigma, self.seed, self.pretrain_domain, self.block, split, self.spread)

    def downstream(self, split: str) -> Dataset:
        if self.data == "cifar10":
            path = self.data_path if split == "train" else (self.test_path or self.data_path)
            if not path:
                raise ConfigError("data_path", "cifar10 data needs a path")
            return load_cifar10_binary(path, self.image_size(), self.classes, split)
        n = self.per_class if split == "train" else self.test_per_class
        return gen_synthetic(self.classes, n, self.image_size(), self.sigma, self.seed, self.domain, self.block, split, self.spread)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, raw):
    if key not in _FIELDS:
        raise ConfigError(key, "unknown key")
    default = getattr(RunConfig, key)
    if not isinstance(raw, str):
        return type(default)(raw)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(Fraction(raw)) if "/" in raw else float(raw)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(key, f"cannot parse {raw!r}") from exc
    return raw
