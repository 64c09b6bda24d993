"""Small differentiable models for attack and training checks."""

import numpy as np

from robustprompt import autodiff as ad
from robustprompt.autodiff import Tensor


class TinyMLP:
    """``x -> gelu(x W1 + b1) W2 + b2`` on flattened inputs; a plain callable model."""

    def __init__(self, n_in, n_hidden=8, n_out=2, seed=0, scale=2.0):
        rng = np.random.default_rng(seed)
        self.w1 = Tensor(rng.standard_normal((n_in, n_hidden)) * scale / np.sqrt(n_in))
        self.b1 = Tensor(rng.standard_normal(n_hidden) * 0.5)
        self.w2 = Tensor(rng.standard_normal((n_hidden, n_out)) * scale / np.sqrt(n_hidden))
        self.b2 = Tensor(rng.standard_normal(n_out) * 0.5)

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = ad.reshape(x, (x.shape[0], -1))
        h = ad.gelu(ad.add(ad.matmul(flat, self.w1), ad.broadcast_to(self.b1, (flat.shape[0], self.b1.shape[0]))))
        out = ad.matmul(h, self.w2)
        return ad.add(out, ad.broadcast_to(self.b2, out.shape))

    def loss_np(self, x, y):
        """Per-sample CE in float64 numpy, for grid searches."""
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        pre = flat @ self.w1.data.astype(np.float64) + self.b1.data
        from scipy.special import erf, logsumexp

        h = 0.5 * pre * (1 + erf(pre / np.sqrt(2)))
        z = h @ self.w2.data.astype(np.float64) + self.b2.data
        return logsumexp(z, axis=1) - z[np.arange(len(z)), y]


def grid_max_loss(model: TinyMLP, x0, y, eps, n=201):
    """Dense grid maximum of CE over the l-inf ball around a 2-pixel input, clipped to [0, 1]."""
    lo, hi = np.clip(x0 - eps, 0, 1), np.clip(x0 + eps, 0, 1)
    a = np.linspace(lo[0], hi[0], n)
    b = np.linspace(lo[1], hi[1], n)
    pts = np.stack(np.meshgrid(a, b, indexing="ij"), axis=-1).reshape(-1, 2)
    return float(model.loss_np(pts, np.full(len(pts), y)).max())
