"""Backbone and prompt checkpoints built on the ADPT container.

A backbone file holds every ViT parameter plus its architecture.  A prompt
file holds only the tuned pieces (prompt blocks, head, optionally the patch
embedding) together with the run config, its digest and the hash of the
frozen encoder it was tuned against, so many prompt files can share one
backbone.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ck
from .autodiff import Tensor
from .config import RunConfig
from .prompting import PromptParams, prepare_for_tuning
from .vit import ViTConfig, ViTModel

ARCH_KEYS = ("image_h", "image_w", "channels", "patch_size", "hidden_dim", "depth", "heads", "mlp_ratio", "num_classes", "use_class_token")


def _arch_text(cfg: ViTConfig) -> str:
    return "".join(f"{k} = {int(getattr(cfg, k))}\n" for k in ARCH_KEYS)


def _arch_from_text(text: str) -> ViTConfig:
    values = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = int(v)
    if set(values) != set(ARCH_KEYS):
        raise ck.IncompatibleCheckpoint("meta:arch does not describe a ViT")
    values["use_class_token"] = bool(values["use_class_token"])
    return ViTConfig(**values)


def backbone_sections(model: ViTModel, config: RunConfig | None = None) -> dict[str, np.ndarray]:
    sections = {k: v.astype(np.float32) for k, v in model.state_dict().items()}
    sections["meta:kind"] = ck.text_section("backbone")
    sections["meta:arch"] = ck.text_section(_arch_text(model.config))
    if config is not None:
        sections["meta:config"] = ck.text_section(config.to_text())
        sections["meta:config_digest"] = ck.text_section(config.digest())
    return sections


def backbone_from_sections(sections: dict[str, np.ndarray]) -> ViTModel:
    ck.require(sections, ["meta:arch"])
    cfg = _arch_from_text(ck.section_text(sections["meta:arch"]))
    model = ViTModel.init(cfg, seed=0)
    names = [k for k, _ in model.named_parameters()]
    ck.require(sections, names)
    try:
        model.load_state_dict({k: sections[k] for k in names})
    except ValueError as exc:
        raise ck.IncompatibleCheckpoint(str(exc)) from exc
    model.set_frozen(layers=True)
    return model


def save_backbone(path, model: ViTModel, config: RunConfig | None = None) -> None:
    ck.save(path, backbone_sections(model, config))


def load_backbone(path) -> ViTModel:
    return backbone_from_sections(ck.load(path))


def prompt_sections(model: ViTModel, prompts: PromptParams, config: RunConfig) -> dict[str, np.ndarray]:
    sections: dict[str, np.ndarray] = {}
    sections.update({k: v.astype(np.float32) for k, v in prompts.state_dict().items()})
    sections.update({k: t.data.astype(np.float32) for k, t in model.group("head")})
    if prompts.tune_embedding:
        sections.update({k: t.data.astype(np.float32) for k, t in model.group("embed")})
    sections["meta:kind"] = ck.text_section("prompts")
    sections["meta:variant"] = ck.text_section(prompts.variant)
    sections["meta:config"] = ck.text_section(config.to_text())
    sections["meta:config_digest"] = ck.text_section(config.digest())
    sections["meta:backbone_hash"] = ck.text_section(model.backbone_hash())
    return sections


def prompts_from_sections(sections: dict[str, np.ndarray], backbone: ViTModel) -> tuple[ViTModel, PromptParams, RunConfig]:
    """Rebuild a tuned model from a prompt file; refuses a mismatched backbone."""
    ck.require(sections, ["meta:variant", "meta:config", "meta:backbone_hash", "head.weight", "head.bias"])
    expected = ck.section_text(sections["meta:backbone_hash"])
    if expected != backbone.backbone_hash():
        raise ck.IncompatibleCheckpoint("prompts were tuned against a different backbone")
    config = RunConfig.from_text(ck.section_text(sections["meta:config"]))
    variant = ck.section_text(sections["meta:variant"])
    blocks = sorted((int(k.split(".")[1]), v) for k, v in sections.items() if k.startswith("prompt."))
    embed_names = [k for k, _ in backbone.group("embed")]
    tune_embedding = all(k in sections for k in embed_names)
    try:
        prompts = PromptParams(variant, [Tensor(v, requires_grad=True, name=f"prompt.{i}") for i, v in blocks], tune_embedding)
        prompts.validate(backbone)
        # the pre-tuning snapshot is a pure function of the config; "stale" attacks need it
        init = _initial_prompts(config, backbone.config)
        if init.schedule == prompts.schedule:
            prompts.initial = [t.data.copy() for t in init.tokens]
    except ValueError as exc:
        raise ck.IncompatibleCheckpoint(str(exc)) from exc
    num_classes = sections["head.bias"].shape[0]
    model = prepare_for_tuning(backbone, prompts, num_classes=num_classes)
    state = {k: sections[k] for k in ("head.weight", "head.bias")}
    if tune_embedding:
        state.update({k: sections[k] for k in embed_names})
    params = dict(model.named_parameters())
    for k, v in state.items():
        if params[k].shape != v.shape:
            raise ck.IncompatibleCheckpoint(f"{k} has shape {v.shape}, model expects {params[k].shape}")
        params[k].data = np.ascontiguousarray(v, dtype=params[k].dtype)
    return model, prompts, config


def _initial_prompts(config: RunConfig, arch: ViTConfig) -> PromptParams:
    layers = None if config.variant == "pt" or config.layers == 0 else config.layers
    return PromptParams.init(config.variant, arch.hidden_dim, arch.depth, config.tokens, layers, config.tune_embedding, config.seed)


def save_prompts(path, model: ViTModel, prompts: PromptParams, config: RunConfig) -> None:
    ck.save(path, prompt_sections(model, prompts, config))


def load_prompts(path, backbone: ViTModel) -> tuple[ViTModel, PromptParams, RunConfig]:
    return prompts_from_sections(ck.load(path), backbone)
