"""Datasets: CIFAR-10 binary records and a seeded synthetic prototype generator."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

CIFAR_SHAPE = (32, 32, 3)


@dataclass
class Dataset:
    images: np.ndarray  # (N, h, w, c) in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, split or self.split)

    def split_off(self, fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Deterministically carve a ``fraction`` held-out split; returns (rest, held_out)."""
        n = len(self)
        perm = np.random.default_rng(seed).permutation(n)
        k = max(1, int(round(n * fraction))) if fraction > 0 else 0
        held, rest = np.sort(perm[:k]), np.sort(perm[k:])
        return self.subset(rest, self.split), self.subset(held, "val")


def _decode_records(raw: bytes, shape) -> tuple[np.ndarray, np.ndarray]:
    h, w, c = shape
    rec = 1 + h * w * c
    if len(raw) == 0 or len(raw) % rec:
        raise ValueError(f"file size {len(raw)} is not a positive multiple of {rec}-byte records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    # stored channel-planar: (c, h, w) per record
    pix = arr[:, 1:].reshape(-1, c, h, w).transpose(0, 2, 3, 1)
    return pix, labels


def load_cifar10_binary(path: str | os.PathLike, shape=CIFAR_SHAPE, num_classes: int = 10, split: str = "test") -> Dataset:
    """Read 1-label-byte + planar-pixel records; pixels are scaled by 1/255."""
    with open(path, "rb") as fh:
        raw = fh.read()
    pix, labels = _decode_records(raw, shape)
    if labels.max() >= num_classes:
        raise ValueError(f"label {labels.max()} exceeds {num_classes - 1}")
    return Dataset(pix.astype(np.float32) / 255.0, labels, num_classes, split)


def encode_records(ds: Dataset) -> bytes:
    if ds.labels.max(initial=0) > 255:
        raise ValueError("labels must fit in one byte")
    pix = np.rint(ds.images * 255.0).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(ds), -1)
    out = np.concatenate([ds.labels.astype(np.uint8)[:, None], pix], axis=1)
    return out.tobytes()


def save_cifar10_binary(ds: Dataset, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_records(ds))


def gen_synthetic(
    classes: int,
    per_class: int,
    image_size=(16, 16, 3),
    sigma: float = 0.1,
    seed: int = 0,
    domain: int = 0,
    block: int = 2,
    split: str = "train",
    spread: float = 1.0,
) -> Dataset:
    """Class-prototype images plus clipped Gaussian noise.

    Prototypes depend only on ``(seed, domain)`` so that different domains
    give disjoint class sets (e.g. a pretraining distribution vs. a
    downstream one) while sample noise also depends on ``split``.
    Prototypes are piecewise constant on ``block``-sized squares with values
    ``0.5 + spread * (u - 0.5)``, ``u ~ U(0, 1)``; small ``spread`` brings the
    classes closer together.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    h, w, c = image_size
    if h % block or w % block:
        raise ValueError(f"block {block} must divide image size {h}x{w}")
    proto_rng = np.random.default_rng([seed, domain, 0])
    coarse = 0.5 + spread * (proto_rng.uniform(0.0, 1.0, size=(classes, h // block, w // block, c)) - 0.5)
    protos = coarse.repeat(block, axis=1).repeat(block, axis=2)
    split_key = {"train": 1, "val": 2, "test": 3}.get(split, 4)
    rng = np.random.default_rng([seed, domain, split_key])
    labels = np.repeat(np.arange(classes), per_class)
    images = protos[labels] + sigma * rng.standard_normal((len(labels), h, w, c))
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels, classes, split)


def nearest_prototype_accuracy(train: Dataset, test: Dataset) -> float:
    """Accuracy of a class-mean nearest-neighbour rule; a learnability oracle."""
    means = np.stack([train.images[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    d = ((test.images[:, None] - means[None]) ** 2).reshape(len(test), train.num_classes, -1).sum(-1)
    return float((d.argmin(axis=1) == test.labels).mean() * 100.0)


def batch_iter(ds: Dataset, batch_size: int, seed: int | None = 0, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches; order is a pure function of (seed, epoch)."""
    if batch_size <= 0:
        raise ValueError("batch_size must be positive")
    n = len(ds)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        yield ds.images[idx], ds.labels[idx]
