"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every differentiable primitive builds its output with :func:`_record`, which
attaches a :class:`Node` holding the parents and a backward rule.  Node ids
grow monotonically, so sorting reachable nodes by id yields a valid
topological order; :class:`Tape` is that ordered list for one loss.

Broadcasting is restricted to scalar-vs-tensor.  Anything else needs an
explicit :func:`broadcast_to`, which keeps every backward rule auditable.
"""

from __future__ import annotations

import contextlib
import itertools
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Node",
    "Tape",
    "ShapeError",
    "precision",
    "get_default_dtype",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "grad",
    "finite_diff_gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "bmm",
    "transpose",
    "reshape",
    "concat",
    "broadcast_to",
    "sum",
    "mean",
    "max",
    "gelu",
    "layer_norm",
    "sign",
    "clamp",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "pick",
    "cross_entropy",
    "kl_divergence",
]

_default_dtype = np.float32
_grad_enabled = True
_node_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    prev, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """One recorded primitive: parents, backward rule and a weak output ref."""

    __slots__ = ("id", "op", "parents", "backward", "out", "__weakref__")

    def __init__(self, op: str, parents: tuple["Tensor", ...], backward_fn, out: "Tensor"):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward = backward_fn
        self.out = weakref.ref(out)


class Tensor:
    """n-dimensional array that optionally participates in a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = _default_dtype
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.ndim == 0 or arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o) if self.ndim == 2 and _as_tensor(o).ndim == 2 else bmm(self, o)

    def __getitem__(self, index) -> "Tensor":
        return _getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward_fn, out)
    return out


class Tape:
    """Topologically ordered primitive records reachable from a loss."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if node.id in seen:
                continue
            seen[node.id] = node
            for p in node.parents:
                if p.node is not None and p.node.id not in seen:
                    stack.append(p.node)
        return cls([seen[k] for k in sorted(seen)])

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def _run_backward(loss: Tensor, seed: np.ndarray, keep_interior: bool = False) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray], dict[int, Tensor]]:
    tape = Tape.from_output(loss)
    node_grads: dict[int, np.ndarray] = {loss.node.id: seed}
    leaf_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    interior: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = node_grads.pop(node.id, None)
        if g is None:
            continue
        if keep_interior:
            interior[node.id] = g
        parent_grads = node.backward(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is not None:
                key, store = p.node.id, node_grads
            else:
                key, store = id(p), leaf_grads
                leaves[key] = p
            prev = store.get(key)
            store[key] = pg if prev is None else prev + pg
    return leaf_grads, interior, leaves


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        return
    seed = np.ones_like(loss.data)
    leaf_grads, interior, leaves = _run_backward(loss, seed, keep_interior=True)
    for key, g in leaf_grads.items():
        t = leaves[key]
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
    for node in Tape.from_output(loss):
        t = node.out()
        g = interior.get(node.id)
        if t is not None and g is not None:
            t.grad = g if t.grad is None else t.grad + g


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. leaf tensors, leaving ``.grad`` alone."""
    if loss.size != 1:
        raise ShapeError(f"grad: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return [np.zeros_like(t.data) for t in wrt]
    leaf_grads, _, _ = _run_backward(loss, np.ones_like(loss.data))
    return [leaf_grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference estimate of the gradient of scalar ``f`` at ``x``."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# elementwise


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    # a scalar operand that met a full tensor receives the summed gradient
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        "mul",
        ad * bd,
        (a, b),
        lambda g: (
            _unscalar(g * bd, a) if a.requires_grad else None,
            _unscalar(g * ad, b) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    return _record(
        "div",
        ad / bd,
        (a, b),
        lambda g: (
            _unscalar(g / bd, a) if a.requires_grad else None,
            _unscalar(-g * ad / (bd * bd), b) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def sign(a) -> Tensor:
    a = _as_tensor(a)
    return _record("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(g),))


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip into ``[lo, hi]``; the gradient passes only where unclipped."""
    a = _as_tensor(a)
    lo_d = lo.data if isinstance(lo, Tensor) else lo
    hi_d = hi.data if isinstance(hi, Tensor) else hi
    out = np.clip(a.data, lo_d, hi_d)
    mask = np.ones(a.shape, dtype=bool)
    if lo_d is not None:
        mask &= a.data >= lo_d
    if hi_d is not None:
        mask &= a.data <= hi_d
    return _record("clamp", out, (a,), lambda g: (g * mask,))


_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    out = (x * cdf).astype(x.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _record("gelu", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(
        "matmul",
        ad @ bd,
        (a, b),
        lambda g: (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None),
    )


def bmm(a, b) -> Tensor:
    """Batched matrix product; leading (batch) extents must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _record(
        "bmm",
        np.matmul(ad, bd),
        (a, b),
        lambda g: (
            np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None,
            np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None,
        ),
    )


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.ascontiguousarray(np.transpose(a.data, axes)), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    src = a.shape
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ts[0].shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(ts)
        )

    return _record("concat", np.concatenate([t.data for t in ts], axis=ax), ts, bw)


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast; the backward rule sums over the expanded axes."""
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    kept = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if kept:
            g = g.sum(axis=tuple(k - lead for k in kept), keepdims=True)
        return (g,)

    return _record("broadcast_to", out, (a,), bw)


def _getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _record("slice", np.array(out, copy=True), (a,), bw)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record("sum", out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    src = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, src) / n).astype(a.dtype),)

    return _record("mean", out, (a,), bw)


def max(a, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first arg-max."""
    a = _as_tensor(a)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record("max", out, (a,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gb = gg = None
        red = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=red)
        if beta.requires_grad:
            gb = g.sum(axis=red)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _record("layer_norm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# probabilistic heads


def _check_finite(op: str, a: Tensor) -> None:
    if not np.isfinite(a.data).all():
        raise ValueError(f"{op}: non-finite input")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite("softmax", a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    _check_finite("log_softmax", a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _record("log_softmax", out, (a,), bw)


def pick(a, labels) -> Tensor:
    """Row-wise gather ``a[i, labels[i]]`` from a 2-D tensor."""
    a = _as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    if a.ndim != 2 or labels.shape != (a.shape[0],):
        raise ShapeError(f"pick: shape mismatch {a.shape} vs {labels.shape}")
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, labels] = g
        return (full,)

    return _record("pick", a.data[rows, labels].copy(), (a,), bw)


def _as_batch(logits: Tensor, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        return reshape(logits, (1, -1)), labels.reshape(1), True
    return logits, labels, False


def cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """``-log softmax(logits)[label]``, averaged over the batch by default."""
    logits = _as_tensor(logits)
    z, y, single = _as_batch(logits, labels)
    if y.shape != (z.shape[0],):
        raise ShapeError(f"cross_entropy: shape mismatch {z.shape} vs labels {y.shape}")
    if (y < 0).any() or (y >= z.shape[1]).any():
        raise ValueError(f"cross_entropy: label out of range for {z.shape[1]} classes")
    per = neg(pick(log_softmax(z, axis=-1), y))
    if single or reduction == "none":
        return reshape(per, ()) if single else per
    return mean(per) if reduction == "mean" else sum(per)


def kl_divergence(p_logits, q_logits, reduction: str = "mean") -> Tensor:
    """KL(p || q) with both distributions given as logits over the last axis."""
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence: shape mismatch {p_logits.shape} vs {q_logits.shape}")
    logp = log_softmax(p_logits, axis=-1)
    logq = log_softmax(q_logits, axis=-1)
    p = exp(logp)
    per = sum(mul(p, sub(logp, logq)), axis=-1)
    if p_logits.ndim == 1 or reduction == "none":
        return per
    return mean(per) if reduction == "mean" else sum(per)
