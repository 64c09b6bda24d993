"""Accuracy under attack, the single-step/adaptive obfuscation diagnostic, and loss slices."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack_fgsm, input_gradient, run_attack
from .autodiff import Tensor
from .vit import forward, predict

_NAME = re.compile(r"^(clean|fgsm|pgd|cw)(\d*)(-adaptive)?$")


@dataclass(frozen=True)
class AttackSpec:
    name: str
    kind: str  # clean | fgsm | pgd | cw
    config: AttackConfig | None

    @property
    def adaptive(self) -> bool:
        return bool(self.config and self.config.adaptive)

    @property
    def epsilon(self) -> float:
        return self.config.epsilon if self.config else 0.0


def parse_attack(name: str, epsilon: float = 8 / 255, alpha: float = 2 / 255, traditional: str = "remove") -> AttackSpec:
    """``clean``, ``fgsm``, ``pgd10``, ``cw10``, each optionally suffixed ``-adaptive``.

    Unsuffixed attacks are traditional (the prompt is removed or stale).
    """
    m = _NAME.match(name.strip().lower())
    if not m:
        raise ValueError(f"unknown attack {name!r}")
    kind, steps, adaptive = m.group(1), m.group(2), bool(m.group(3))
    if kind == "clean":
        if steps or adaptive:
            raise ValueError(f"unknown attack {name!r}")
        return AttackSpec("clean", "clean", None)
    if kind == "fgsm":
        if steps:
            raise ValueError("fgsm takes no step count")
        cfg = AttackConfig(epsilon=epsilon, alpha=max(epsilon, 1e-12), steps=1, rand_init=False, adaptive=adaptive, traditional=traditional)
    else:
        cfg = AttackConfig(
            epsilon=epsilon,
            alpha=alpha,
            steps=int(steps or 10),
            rand_init=True,
            loss="ce" if kind == "pgd" else "cw",
            adaptive=adaptive,
            traditional=traditional,
        )
    return AttackSpec(name.strip().lower(), kind, cfg)


@dataclass(frozen=True)
class EvalRow:
    attack: str
    kind: str
    adaptive: bool
    epsilon: float
    accuracy: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    samples: int
    seed: int
    config_digest: str = ""

    def __post_init__(self):
        if not any(r.kind == "clean" for r in self.rows):
            raise ValueError("an EvalReport always carries a clean row")
        for r in self.rows:
            if not 0.0 <= r.accuracy <= 100.0:
                raise ValueError(f"accuracy {r.accuracy} outside [0, 100]")

    def __getitem__(self, name: str) -> EvalRow:
        for r in self.rows:
            if r.attack == name:
                return r
        raise KeyError(name)

    def find(self, kind: str, adaptive: bool) -> list[EvalRow]:
        return [r for r in self.rows if r.kind == kind and r.adaptive == adaptive]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["attack", "adaptive", "epsilon", "accuracy", "samples", "seed", "config_digest"])
        for r in self.rows:
            w.writerow([r.attack, int(r.adaptive), f"{r.epsilon:.6f}", f"{r.accuracy:.4f}", self.samples, self.seed, self.config_digest])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rows, samples, seed, digest = [], 0, 0, ""
        for rec in csv.DictReader(io.StringIO(text)):
            kind = _NAME.match(rec["attack"]).group(1)
            rows.append(EvalRow(rec["attack"], kind, rec["adaptive"] == "1", float(rec["epsilon"]), float(rec["accuracy"])))
            samples, seed, digest = int(rec["samples"]), int(rec["seed"]), rec["config_digest"]
        return cls(rows, samples, seed, digest)


def evaluate(model, prompts, dataset, attacks, seed: int = 0, config_digest: str = "", batch_size: int = 256) -> EvalReport:
    """Percentage of ``dataset`` still classified correctly under each attack."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    specs = [a if isinstance(a, AttackSpec) else parse_attack(a) for a in attacks]
    if not any(s.kind == "clean" for s in specs):
        specs = [parse_attack("clean")] + specs
    x, y = dataset.images, dataset.labels
    rows = []
    for spec in specs:
        if spec.kind == "clean" or spec.epsilon == 0:
            x_eval = x
        elif spec.kind == "fgsm":
            x_eval = np.concatenate(
                [attack_fgsm(model, prompts, x[i : i + batch_size], y[i : i + batch_size], spec.config) for i in range(0, len(x), batch_size)]
            )
        else:
            x_eval = run_attack(model, prompts, x, y, spec.config, rng=np.random.default_rng([seed, len(rows)]), batch_size=batch_size)
        acc = float((predict(model, x_eval, prompts) == y).mean() * 100.0)
        rows.append(EvalRow(spec.name, spec.kind, spec.adaptive, spec.epsilon, acc))
    return EvalReport(rows, len(dataset), seed, config_digest)


@dataclass(frozen=True)
class ObfuscationVerdict:
    obfuscated: bool
    single_step_flag: bool
    adaptive_flag: bool
    single_step_delta: float  # acc(PGD traditional) - acc(FGSM traditional)
    adaptive_gap: float  # acc(PGD traditional) - acc(PGD adaptive)

    @property
    def label(self) -> str:
        return "OBFUSCATED" if self.obfuscated else "NOT_OBFUSCATED"


def obfuscation_check(report: EvalReport, margin: float = 2.0, gap: float = 10.0) -> ObfuscationVerdict:
    """Flag gradient obfuscation when FGSM beats PGD or the adaptive attack beats the traditional one.

    Needs traditional FGSM and PGD rows and an adaptive PGD row at one epsilon.
    """
    fgsm = report.find("fgsm", False)
    pgd = report.find("pgd", False)
    pgd_a = report.find("pgd", True)
    for f in fgsm:
        for p in pgd:
            for q in pgd_a:
                if np.isclose(f.epsilon, p.epsilon) and np.isclose(p.epsilon, q.epsilon):
                    d1 = p.accuracy - f.accuracy
                    d2 = p.accuracy - q.accuracy
                    s, a = d1 > margin, d2 > gap
                    return ObfuscationVerdict(s or a, s, a, d1, d2)
    raise ValueError("obfuscation_check needs fgsm, pgd and pgd-adaptive rows at equal epsilon")


def slice_directions(model, prompts, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Signed input gradients at the clean point: prompt removed vs. prompted."""
    x = np.asarray(x, dtype=ad.get_default_dtype())
    detached = prompts.detached() if prompts is not None else None
    g_trad, _ = input_gradient(lambda t: forward(model, t, None), x, y, "ce")
    g_adapt, _ = input_gradient(lambda t: forward(model, t, detached), x, y, "ce")
    return np.sign(g_trad).astype(x.dtype), np.sign(g_adapt).astype(x.dtype)


def _check_unit(d: np.ndarray, x_shape) -> None:
    if d.shape != tuple(x_shape):
        raise ad.ShapeError(f"loss_slice: direction shape {d.shape} vs batch {tuple(x_shape)}")
    if np.abs(d).max() > 1.0 + 1e-6 or not np.isclose(np.abs(d).max(), 1.0):
        raise ValueError("loss_slice: directions must have unit l-inf norm")


def loss_slice(model, prompts, x, y, dir_traditional, dir_adaptive, grid: int = 25, radius: float = 8 / 255) -> tuple[np.ndarray, np.ndarray]:
    """Mean batch CE on the grid ``x + a * dir_traditional + b * dir_adaptive``.

    Returns ``(offsets, losses)`` with ``losses[i, j]`` at ``(offsets[i], offsets[j])``.
    """
    x = np.asarray(x, dtype=ad.get_default_dtype())
    _check_unit(np.asarray(dir_traditional), x.shape)
    _check_unit(np.asarray(dir_adaptive), x.shape)
    offsets = np.linspace(0.0, radius, grid)
    out = np.zeros((grid, grid))
    with ad.no_grad():
        for i, a in enumerate(offsets):
            for j, b in enumerate(offsets):
                xp = x if i == 0 and j == 0 else np.clip(x + a * dir_traditional + b * dir_adaptive, 0.0, 1.0).astype(x.dtype)
                out[i, j] = float(ad.cross_entropy(forward(model, Tensor(xp), prompts), y).data)
    return offsets, out


def slice_to_csv(offsets: np.ndarray, losses: np.ndarray) -> str:
    """Header row of adaptive-axis offsets; each row leads with its traditional-axis offset."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["traditional\\adaptive"] + [f"{b:.6f}" for b in offsets])
    for a, row in zip(offsets, losses):
        w.writerow([f"{a:.6f}"] + [f"{v:.6f}" for v in row])
    return buf.getvalue()
