import numpy as np
import pytest

from robustprompt import autodiff as ad
from robustprompt.data import gen_synthetic
from robustprompt.prompting import PromptParams, prepare_for_tuning
from robustprompt.vit import ViTConfig, ViTModel

TINY = ViTConfig(image_h=8, image_w=8, channels=3, patch_size=4, hidden_dim=16, depth=2, heads=2, mlp_ratio=2, num_classes=3)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    model = ViTModel.init(TINY, seed=0)
    model.set_frozen(layers=True)
    return model


@pytest.fixture
def tiny_data():
    return gen_synthetic(3, 8, (8, 8, 3), sigma=0.1, seed=0, domain=0)


def tuned_view(model, variant="pt2", tokens=4, layers=None, tune_embedding=False, seed=0):
    prompts = PromptParams.init(variant, model.config.hidden_dim, model.config.depth, tokens, layers, tune_embedding, seed)
    return prepare_for_tuning(model, prompts, seed=seed), prompts


@pytest.fixture
def tuned(tiny_model):
    return tuned_view(tiny_model)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


def rel_err(a, b, floor=1e-5):
    """Elementwise max |a-b| / max(|a|, |b|), with the denominator floored.

    The floor keeps central-difference noise (about 1e-10 at h=1e-5) on
    near-zero components from dominating.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b))), initial=0.0))
