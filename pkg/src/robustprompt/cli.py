"""Command line: pretrain, tune, attack, eval, slice.

Exit codes: 0 ok, 1 bad configuration, 2 I/O failure, 3 corrupt input,
4 incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import persist
from .config import ConfigError, RunConfig
from .data import Dataset

log = logging.getLogger("robustprompt")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CORRUPT, EXIT_COMPAT = 0, 1, 2, 3, 4


class DataError(Exception):
    """A data file that exists but cannot be decoded."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would collide with the I/O code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("arguments", message)


def _config_flags(parser: argparse.ArgumentParser) -> None:
    g = parser.add_argument_group("configuration (overrides --config)")
    g.add_argument("--config", type=Path, help="key = value file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for f in fields(RunConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.name.upper(), default=None)
    g.add_argument("--tune-embed", dest="cfg_tune_embedding", action="store_const", const="true")
    g.add_argument("--no-tune-embed", dest="cfg_tune_embedding", action="store_const", const="false")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustprompt", description="Adversarially robust prompt tuning for small ViTs.")
    p.add_argument("--quiet", action="store_true", help="suppress progress logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("pretrain", help="naturally train a backbone")
    sp.add_argument("--out", type=Path, required=True)
    _config_flags(sp)

    sp = sub.add_parser("tune", help="prompt-tune a frozen backbone")
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--metrics", type=Path, help="per-epoch CSV (default: next to --out)")
    sp.add_argument("--no-plot", action="store_true")
    _config_flags(sp)

    sp = sub.add_parser("attack", help="write adversarial test examples")
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)
    sp.add_argument("--attack", default="pgd10-adaptive")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--report", type=Path, help="CSV with clean and attacked accuracy")
    _config_flags(sp)

    sp = sub.add_parser("eval", help="accuracy under a list of attacks")
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--no-plot", action="store_true")
    _config_flags(sp)

    sp = sub.add_parser("slice", help="loss on a traditional x adaptive direction grid")
    sp.add_argument("--backbone", type=Path, required=True)
    sp.add_argument("--prompts", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--no-plot", action="store_true")
    _config_flags(sp)
    return p


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Stored/default config, then the --config file, then individual flags."""
    cfg = base or RunConfig()
    if args.config is not None:
        cfg = cfg.override(_file_values(args.config.read_text(encoding="utf-8")))
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(item, "expected KEY=VALUE")
        k, v = item.split("=", 1)
        values[k.strip()] = v
    for f in fields(RunConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            values[f.name] = v
    return cfg.override(values)


def _file_values(text: str) -> dict[str, str]:
    # parse through RunConfig for validation, but keep only keys the file sets
    RunConfig.from_text(text)
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _check_writable(path: Path) -> None:
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {path}")


def _load_data(cfg: RunConfig, split: str) -> Dataset:
    try:
        return cfg.downstream(split)
    except ConfigError:
        raise
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_pretrain(cfg: RunConfig, split: str) -> Dataset:
    if cfg.data == "cifar10":
        return _load_data(cfg, split)
    return cfg.pretrain_data(split)


def _prompt_layers(cfg: RunConfig):
    if cfg.variant == "pt":
        if cfg.layers not in (0, 1):
            raise ConfigError("layers", "PT prompts are prepended once at the input and have no layer schedule")
        return None
    return None if cfg.layers == 0 else cfg.layers


def _guard(key: str, build):
    try:
        return build()
    except (ConfigError, OSError):
        raise
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from exc


def cmd_pretrain(args) -> int:
    from .vit import accuracy, pretrain_backbone

    cfg = resolve_config(args)
    _check_writable(args.out)
    classes = cfg.classes if cfg.data == "cifar10" else cfg.pretrain_classes
    vit_cfg = _guard("hidden_dim", lambda: cfg.vit(classes))
    train = _guard("pretrain_classes", lambda: _load_pretrain(cfg, "train"))
    test = _guard("pretrain_classes", lambda: _load_pretrain(cfg, "test"))
    t0 = time.perf_counter()
    model = pretrain_backbone(
        train,
        vit_cfg,
        epochs=cfg.pretrain_epochs,
        lr=cfg.pretrain_lr,
        batch_size=cfg.pretrain_batch_size,
        seed=cfg.seed,
        log=lambda e, a: log.info("pretrain epoch %d train acc %.2f", e, a),
    )
    persist.save_backbone(args.out, model, cfg)
    acc = accuracy(model, test.images, test.labels)
    print(f"seed: {cfg.seed}")
    print(f"config digest: {cfg.digest()}")
    print(f"final clean accuracy: {acc:.2f}")
    print(f"wall time: {time.perf_counter() - t0:.1f}s")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_tune(args) -> int:
    from .defenses import prompt_tune
    from .prompting import PromptParams, prepare_for_tuning, trainable_parameters
    from .plotting import plot_metrics

    cfg = resolve_config(args)
    _check_writable(args.out)
    metrics_path = args.metrics or args.out.with_suffix(".metrics.csv")
    _check_writable(metrics_path)
    backbone = persist.load_backbone(args.backbone)
    # the stored config describes the backbone actually used
    cfg = replace(cfg, **{k: getattr(backbone.config, k) for k in persist.ARCH_KEYS if k != "num_classes"})
    layers = _prompt_layers(cfg)
    d, depth = backbone.config.hidden_dim, backbone.config.depth
    prompts = _guard("layers", lambda: PromptParams.init(cfg.variant, d, depth, cfg.tokens, layers, cfg.tune_embedding, cfg.seed))
    train = _load_data(cfg, "train")
    tcfg = _guard("method", cfg.train)
    model = prepare_for_tuning(backbone, prompts, num_classes=train.num_classes, warm_head=cfg.warm_head, seed=cfg.seed)
    groups, total = trainable_parameters(model, prompts)
    print(f"seed: {cfg.seed}")
    print(f"config digest: {cfg.digest()}")
    print(f"prompt schedule: {prompts.schedule}")
    print("tuned parameters: " + ", ".join(f"{g.name} {g.count}" for g in groups) + f" (total {total})")
    t0 = time.perf_counter()
    result = prompt_tune(model, prompts, train, tcfg, log=lambda r: log.info("epoch %d %s", r["epoch"], _fmt_row(r)))
    persist.save_prompts(args.out, model, prompts, cfg)
    metrics_path.write_text(result.metrics_csv(), encoding="utf-8")
    if not args.no_plot:
        plot_metrics(result.history, metrics_path.with_suffix(".png"), title=f"{cfg.method} {cfg.variant}")
    if result.history:
        best = result.history[result.best_epoch]
        print(f"best epoch: {result.best_epoch} (val clean {best['clean_acc']:.2f}, val adaptive pgd {best['robust_acc']:.2f})")
    print(f"frozen backbone unchanged: {'yes' if result.frozen_hash_before == result.frozen_hash_after else 'NO'}")
    print(f"wall time: {time.perf_counter() - t0:.1f}s")
    print(f"wrote {args.out} and {metrics_path}")
    return EXIT_OK


def _fmt_row(r: dict) -> str:
    return " ".join(f"{k} {v:.4f}" for k, v in r.items() if k != "epoch")


def _load_tuned(args):
    backbone = persist.load_backbone(args.backbone)
    model, prompts, stored = persist.load_prompts(args.prompts, backbone)
    cfg = resolve_config(args, base=stored)
    return model, prompts, cfg


def cmd_attack(args) -> int:
    from .evaluation import EvalReport, evaluate, parse_attack

    model, prompts, cfg = _load_tuned(args)
    _check_writable(args.out)
    if args.report:
        _check_writable(args.report)
    spec = _guard("attack", lambda: parse_attack(args.attack, cfg.epsilon, cfg.alpha, cfg.traditional))
    test = _load_data(cfg, "test")
    if spec.kind == "clean":
        x_adv = test.images
    else:
        from .attacks import attack_fgsm, run_attack

        if spec.kind == "fgsm":
            x_adv = attack_fgsm(model, prompts, test.images, test.labels, spec.config)
        else:
            x_adv = run_attack(model, prompts, test.images, test.labels, spec.config, rng=np.random.default_rng([cfg.seed, 1]))
    ck.save(
        args.out,
        {
            "x_adv": x_adv.astype(np.float32),
            "labels": test.labels.astype(np.float32),
            "meta:attack": ck.text_section(spec.name),
            "meta:config_digest": ck.text_section(cfg.digest()),
        },
    )
    report: EvalReport = evaluate(model, prompts, test, [spec], seed=cfg.seed, config_digest=cfg.digest())
    if args.report:
        args.report.write_text(report.to_csv(), encoding="utf-8")
    for r in report.rows:
        print(f"{r.attack}: {r.accuracy:.2f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate, obfuscation_check, parse_attack
    from .plotting import plot_eval

    model, prompts, cfg = _load_tuned(args)
    _check_writable(args.out)
    names = [a for a in cfg.attacks.split(",") if a.strip()]
    specs = _guard("attacks", lambda: [parse_attack(a, cfg.epsilon, cfg.alpha, cfg.traditional) for a in names])
    test = _load_data(cfg, "test")
    t0 = time.perf_counter()
    report = evaluate(model, prompts, test, specs, seed=cfg.seed, config_digest=cfg.digest())
    args.out.write_text(report.to_csv(), encoding="utf-8")
    if not args.no_plot:
        plot_eval(report, args.out.with_suffix(".png"))
    for r in report.rows:
        print(f"{r.attack}: {r.accuracy:.2f}")
    try:
        v = obfuscation_check(report)
        print(f"obfuscation: {v.label} (pgd - fgsm {v.single_step_delta:+.2f}, traditional - adaptive pgd {v.adaptive_gap:+.2f})")
    except ValueError:
        print("obfuscation: n/a (needs fgsm, pgd and pgd-adaptive rows)")
    print(f"wall time: {time.perf_counter() - t0:.1f}s")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_slice(args) -> int:
    from .evaluation import loss_slice, slice_directions, slice_to_csv
    from .plotting import plot_slice

    model, prompts, cfg = _load_tuned(args)
    _check_writable(args.out)
    if cfg.grid < 2 or cfg.radius <= 0 or cfg.slice_batch <= 0:
        raise ConfigError("grid", "need grid >= 2, radius > 0 and slice_batch > 0")
    test = _load_data(cfg, "test")
    x, y = test.images[: cfg.slice_batch], test.labels[: cfg.slice_batch]
    d_trad, d_adapt = slice_directions(model, prompts, x, y)
    offsets, losses = loss_slice(model, prompts, x, y, d_trad, d_adapt, grid=cfg.grid, radius=cfg.radius)
    args.out.write_text(slice_to_csv(offsets, losses), encoding="utf-8")
    if not args.no_plot:
        plot_slice(offsets, losses, args.out.with_suffix(".png"))
    print(f"loss at origin {losses[0, 0]:.4f}, max {losses.max():.4f}")
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "tune": cmd_tune, "attack": cmd_attack, "eval": cmd_eval, "slice": cmd_slice}


def _thread_limit():
    raw = os.environ.get("ADAPT_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
        if n <= 0:
            raise ValueError
    except ValueError:
        raise ConfigError("ADAPT_THREADS", f"expected a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
        limiter = _thread_limit()
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ck.CorruptCheckpoint as exc:
        print(f"corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except DataError as exc:
        print(f"corrupt data: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ck.IncompatibleCheckpoint as exc:
        print(f"incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
