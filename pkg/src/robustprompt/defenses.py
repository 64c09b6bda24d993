"""Training objectives (natural, AT, TRADES, MART, N-FGSM, ADAPT-CE/KL) and the tuning loop.

Every loss function returns the scalar training loss and, when given a
``record`` dict, stores the clean and adversarial branch values and the
weight applied to the adversarial term so that
``total == clean + weight * adv`` can be checked from the log.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack_pgd, input_gradient, surrogate_prompts
from .autodiff import Tensor
from .data import Dataset, batch_iter
from .optim import make_optimizer, schedule_lr
from .prompting import PromptParams, trainable_parameters
from .vit import ViTModel, forward

METHODS = ("NATURAL", "AT", "TRADES", "MART", "NFGSM", "ADAPT_CE", "ADAPT_KL")
ADAPT_METHODS = ("ADAPT_CE", "ADAPT_KL")
METRIC_FIELDS = ("epoch", "clean_loss", "adv_loss", "clean_acc", "robust_acc", "wall_time")


@dataclass(frozen=True)
class TrainConfig:
    method: str = "ADAPT_CE"
    lam: float = 1.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "cyclic"
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    trades_beta: float = 6.0
    mart_beta: float = 5.0
    # ADAPT_KL inner maximization: "ce" follows the adaptive CE attack, "kl" maximizes the KL term
    kl_inner: str = "ce"
    val_fraction: float = 0.1
    val_attack: AttackConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.method in ADAPT_METHODS and not self.attack.adaptive:
            raise ValueError(f"{self.method} requires an adaptive inner attack")
        if self.kl_inner not in ("ce", "kl"):
            raise ValueError(f"unknown kl_inner {self.kl_inner!r}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ValueError("epochs must be >= 0 and batch_size > 0")


def _logits(model, prompts, x) -> Tensor:
    return forward(model, Tensor(x) if not isinstance(x, Tensor) else x, prompts)


def _finish(record, total, clean, adv, weight, **extra):
    if record is not None:
        record.update(
            total=float(total.data),
            clean=float(clean.data) if clean is not None else 0.0,
            adv=float(adv.data) if adv is not None else 0.0,
            weight=weight,
            **extra,
        )
    return total


def loss_natural(model, prompts, x, y, cfg: TrainConfig, rng=None, record=None) -> Tensor:
    logits = _logits(model, prompts, x)
    clean = ad.cross_entropy(logits, y)
    return _finish(record, clean, clean, None, 0.0, clean_logits=logits.data, x_adv=np.asarray(x))


def _adapt(model, prompts, x, y, cfg: TrainConfig, rng, record, kind: str) -> Tensor:
    inner = replace(cfg.attack, adaptive=True, loss="kl" if kind == "kl" and cfg.kl_inner == "kl" else "ce")
    x_adv = attack_pgd(model, prompts, x, y, inner, rng)
    clean_logits = _logits(model, prompts, x)
    adv_logits = _logits(model, prompts, x_adv)
    clean = ad.cross_entropy(clean_logits, y)
    if kind == "ce":
        adv = ad.cross_entropy(adv_logits, y)
    else:
        adv = ad.kl_divergence(adv_logits, clean_logits)
    total = ad.add(clean, ad.mul(adv, cfg.lam))
    return _finish(record, total, clean, adv, cfg.lam, clean_logits=clean_logits.data, adv_logits=adv_logits.data, x_adv=x_adv)


def loss_adapt_ce(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    """Clean CE plus ``lam`` times CE on the prompt-conditioned PGD example."""
    return _adapt(model, prompts, x, y, cfg, rng, record, "ce")


def loss_adapt_kl(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    """Clean CE plus ``lam`` times KL(f(x_adv) || f(x)); both branches carry gradient."""
    return _adapt(model, prompts, x, y, cfg, rng, record, "kl")


def loss_at(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    x_adv = attack_pgd(model, prompts, x, y, replace(cfg.attack, loss="ce"), rng)
    adv_logits = _logits(model, prompts, x_adv)
    adv = ad.cross_entropy(adv_logits, y)
    if record is not None:
        with ad.no_grad():
            clean_logits = _logits(model, prompts, x).data
        return _finish(record, adv, None, adv, 1.0, clean_logits=clean_logits, adv_logits=adv_logits.data, x_adv=x_adv)
    return adv


def loss_trades(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    x_adv = attack_pgd(model, prompts, x, y, replace(cfg.attack, loss="kl"), rng)
    clean_logits = _logits(model, prompts, x)
    adv_logits = _logits(model, prompts, x_adv)
    clean = ad.cross_entropy(clean_logits, y)
    adv = ad.kl_divergence(adv_logits, clean_logits)
    total = ad.add(clean, ad.mul(adv, cfg.trades_beta))
    return _finish(record, total, clean, adv, cfg.trades_beta, clean_logits=clean_logits.data, adv_logits=adv_logits.data, x_adv=x_adv)


def loss_mart(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    """Boosted CE on the adversarial example plus a KL term weighted by ``1 - p_y(x)``."""
    x_adv = attack_pgd(model, prompts, x, y, replace(cfg.attack, loss="ce"), rng)
    clean_logits = _logits(model, prompts, x)
    adv_logits = _logits(model, prompts, x_adv)
    y = np.asarray(y, dtype=np.int64)
    adv_probs = ad.softmax(adv_logits, axis=-1)
    # highest-scoring wrong class on the adversarial example
    masked = adv_probs.data.copy()
    masked[np.arange(len(y)), y] = -np.inf
    runner_up = masked.argmax(axis=1)
    bce = ad.add(
        ad.cross_entropy(adv_logits, y),
        ad.neg(ad.mean(ad.log(ad.add(ad.neg(ad.pick(adv_probs, runner_up)), 1.0001)))),
    )
    nat_probs = ad.softmax(clean_logits, axis=-1)
    true_probs = ad.pick(nat_probs, y)
    kl = ad.kl_divergence(clean_logits, adv_logits, reduction="none")
    robust = ad.mean(ad.mul(kl, ad.add(ad.neg(true_probs), 1.0000001)))
    total = ad.add(bce, ad.mul(robust, cfg.mart_beta))
    return _finish(record, total, bce, robust, cfg.mart_beta, clean_logits=clean_logits.data, adv_logits=adv_logits.data, x_adv=x_adv)


def nfgsm_example(model, prompts, x, y, attack: AttackConfig, rng, noise_mult: float = 2.0) -> np.ndarray:
    """Noise init in [-2eps, 2eps], one eps-sized signed step, pixel clamp only."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = np.asarray(x, dtype=ad.get_default_dtype())
    eps = attack.epsilon
    x0 = np.clip(x + rng.uniform(-noise_mult * eps, noise_mult * eps, size=x.shape).astype(x.dtype), 0.0, 1.0)
    if eps == 0:
        return x0
    sp = surrogate_prompts(prompts, attack)
    g, _ = input_gradient(lambda t: forward(model, t, sp), x0, y, "ce")
    return np.clip(x0 + eps * np.sign(g).astype(x.dtype), 0.0, 1.0)


def loss_nfgsm(model, prompts, x, y, cfg: TrainConfig, rng=0, record=None) -> Tensor:
    x_adv = nfgsm_example(model, prompts, x, y, cfg.attack, rng)
    adv_logits = _logits(model, prompts, x_adv)
    adv = ad.cross_entropy(adv_logits, y)
    if record is not None:
        with ad.no_grad():
            clean_logits = _logits(model, prompts, x).data
        return _finish(record, adv, None, adv, 1.0, clean_logits=clean_logits, adv_logits=adv_logits.data, x_adv=x_adv)
    return adv


LOSS_FNS = {
    "NATURAL": loss_natural,
    "AT": loss_at,
    "TRADES": loss_trades,
    "MART": loss_mart,
    "NFGSM": loss_nfgsm,
    "ADAPT_CE": loss_adapt_ce,
    "ADAPT_KL": loss_adapt_kl,
}


def trainable_tensors(model: ViTModel, prompts: PromptParams | None) -> list[Tensor]:
    if prompts is None:
        return [t for _, t in model.named_parameters() if t.requires_grad]
    groups, _ = trainable_parameters(model, prompts)
    return [t for g in groups for t in g.tensors]


def train_step(model, prompts, batch, cfg: TrainConfig, optimizer=None, rng=None) -> dict:
    """One inner maximization plus one descent step on the configured loss."""
    x, y = batch
    if len(y) == 0:
        raise ValueError("train_step: empty batch")
    params = trainable_tensors(model, prompts)
    if optimizer is None:
        optimizer = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(cfg.seed if rng is None else rng)
    record: dict = {}
    loss = LOSS_FNS[cfg.method](model, prompts, x, y, cfg, rng, record)
    optimizer.zero_grad()
    ad.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    y = np.asarray(y)
    clean_acc = float((record["clean_logits"].argmax(-1) == y).mean() * 100)
    adv_logits = record.get("adv_logits")
    adv_acc = float((adv_logits.argmax(-1) == y).mean() * 100) if adv_logits is not None else clean_acc
    return {
        "loss": record["total"],
        "clean_loss": record["clean"],
        "adv_loss": record["adv"],
        "weight": record["weight"],
        "clean_acc": clean_acc,
        "adv_acc": adv_acc,
        "lr": optimizer.lr,
    }


@dataclass
class TuneResult:
    model: ViTModel
    prompts: PromptParams | None
    history: list[dict]
    best_epoch: int
    frozen_hash_before: str
    frozen_hash_after: str

    def metrics_csv(self, with_time: bool = True) -> str:
        buf = io.StringIO()
        fields = METRIC_FIELDS if with_time else METRIC_FIELDS[:-1]
        w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.history:
            w.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k]) for k in fields})
        return buf.getvalue()


def _robust_accuracy(model, prompts, ds: Dataset, attack: AttackConfig, seed: int) -> tuple[float, float]:
    from .attacks import run_attack
    from .vit import predict

    clean = float((predict(model, ds.images, prompts) == ds.labels).mean() * 100)
    x_adv = run_attack(model, prompts, ds.images, ds.labels, attack, rng=seed)
    robust = float((predict(model, x_adv, prompts) == ds.labels).mean() * 100)
    return clean, robust


def prompt_tune(model: ViTModel, prompts: PromptParams | None, dataset: Dataset, cfg: TrainConfig, log=None) -> TuneResult:
    """Tune the trainable groups of ``model``/``prompts`` on ``dataset``.

    Holds out ``val_fraction`` of the data (fixed by seed) and keeps the
    parameters of the epoch with the best adaptive-PGD validation accuracy.
    ``prompts=None`` tunes every parameter that still requires grad.
    """
    frozen_names = [g for g, frozen in model.frozen.items() if frozen]
    before = model.backbone_hash(frozen_names)
    params = trainable_tensors(model, prompts)
    if cfg.epochs == 0:
        return TuneResult(model, prompts, [], 0, before, before)
    train, val = dataset.split_off(cfg.val_fraction, seed=cfg.seed) if cfg.val_fraction > 0 else (dataset, None)
    val_attack = cfg.val_attack or replace(cfg.attack, adaptive=True, loss="ce", rand_init=True)
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 31])
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    history: list[dict] = []
    best, best_epoch, best_state = -1.0, 0, [p.data.copy() for p in params]
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        sums = {"clean_loss": 0.0, "adv_loss": 0.0, "n": 0}
        for xb, yb in batch_iter(train, cfg.batch_size, seed=cfg.seed, epoch=epoch):
            opt.lr = schedule_lr(cfg.schedule, step, total_steps, cfg.lr)
            m = train_step(model, prompts, (xb, yb), cfg, opt, rng)
            sums["clean_loss"] += m["clean_loss"] * len(yb)
            sums["adv_loss"] += m["adv_loss"] * len(yb)
            sums["n"] += len(yb)
            step += 1
        eval_ds = val if val is not None else train
        clean_acc, robust_acc = _robust_accuracy(model, prompts, eval_ds, val_attack, cfg.seed)
        row = {
            "epoch": epoch,
            "clean_loss": sums["clean_loss"] / sums["n"],
            "adv_loss": sums["adv_loss"] / sums["n"],
            "clean_acc": clean_acc,
            "robust_acc": robust_acc,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(row)
        if log is not None:
            log(row)
        if robust_acc >= best:
            best, best_epoch, best_state = robust_acc, epoch, [p.data.copy() for p in params]
    for p, s in zip(params, best_state):
        p.data = s
    after = model.backbone_hash(frozen_names)
    return TuneResult(model, prompts, history, best_epoch, before, after)
