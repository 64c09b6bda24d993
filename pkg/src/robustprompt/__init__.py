"""Adversarially robust visual prompt tuning on a from-scratch numpy ViT."""

from .attacks import AttackConfig, attack_fgsm, attack_pgd, project_linf, run_attack
from .autodiff import Tensor, backward, grad, no_grad, precision
from .data import Dataset, batch_iter, gen_synthetic, load_cifar10_binary
from .defenses import TrainConfig, prompt_tune, train_step
from .evaluation import EvalReport, evaluate, loss_slice, obfuscation_check
from .prompting import PromptParams, make_schedule, prepare_for_tuning, trainable_parameters
from .vit import ViTConfig, ViTModel, forward, pretrain_backbone

__all__ = [
    "AttackConfig",
    "Dataset",
    "EvalReport",
    "PromptParams",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "ViTModel",
    "attack_fgsm",
    "attack_pgd",
    "backward",
    "batch_iter",
    "evaluate",
    "forward",
    "gen_synthetic",
    "grad",
    "load_cifar10_binary",
    "loss_slice",
    "make_schedule",
    "no_grad",
    "obfuscation_check",
    "precision",
    "prepare_for_tuning",
    "pretrain_backbone",
    "project_linf",
    "prompt_tune",
    "run_attack",
    "train_step",
    "trainable_parameters",
]
