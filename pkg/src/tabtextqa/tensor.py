"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation evaluates eagerly and, when any input requires a gradient,
records a closure mapping the output gradient to input gradients.  The
recorded nodes form an append-only DAG (inputs always exist before outputs),
which :func:`backward` walks in reverse topological order.

Also here: finite-difference gradient checking, the Adam optimizer and the
flat checkpoint archive.
"""
from __future__ import annotations

import contextlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
CHECKPOINT_FORMAT_VERSION = 1

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand dimensions are incompatible."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value shows up where it must not."""


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- plumbing ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=-1, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- element-wise arithmetic ------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _node(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


# -- linear algebra and shape ops -----------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # batch @ matrix: fold the batch dims so BLAS sees one large product
        flat = ad.reshape(-1, ad.shape[-1])

        def bw_fold(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), flat.T @ g2

        return _node((flat @ bd).reshape(*ad.shape[:-1], bd.shape[-1]), (a, b), bw_fold, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _node(ad @ bd, (a, b), bw, "matmul")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _node(a.data[idx], (a,), bw, "getitem")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding ids out of range for table of {weight.shape[0]} rows")
    n, d = weight.shape

    def bw(g):
        z = np.zeros((n, d))
        np.add.at(z, ids.reshape(-1), g.reshape(-1, d))
        return (z,)

    return _node(weight.data[ids], (weight,), bw, "embedding")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in ts]}") from exc

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(out, ts, bw, "stack")


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)

    return _node(np.where(cond, a.data, b.data), (a, b), bw, "where")


# -- reductions -------------------------------------------------------------
def _expand_like(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(
        a.data.sum(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_like(g, shape, axis, keepdims).copy(),),
        "sum",
    )


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([shape[ax] for ax in axes]))
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {shape}")
    return _node(
        a.data.mean(axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_like(g, shape, axis, keepdims) / count,),
        "mean",
    )


def max_(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the gradient flows to the first maximiser."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"max over an empty axis of shape {a.shape}")
    arg = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, arg, axis=axis)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        z = np.zeros(shape)
        np.put_along_axis(z, arg, g, axis=axis)
        return (z,)

    return _node(out if keepdims else np.squeeze(out, axis), (a,), bw, "max")


# -- nonlinearities --------------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh approximation of GELU."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw, "gelu")


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _node(out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),), "softplus")


def softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Softmax with max subtraction; masked-out entries get probability 0.

    A slice with no admissible entry yields all zeros.
    """
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    z = e.sum(axis=axis, keepdims=True)
    out = e / np.where(z > 0, z, 1.0)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), bw, "softmax")


def log_softmax(a, axis: int = -1, mask=None) -> Tensor:
    """Log-softmax; masked-out entries are reported as 0 and receive no gradient."""
    a = as_tensor(a)
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis of shape {a.shape}")
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)
        probs = np.where(mask, probs, 0.0)

    def bw(g):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), bw, "log_softmax")


def layer_norm(a, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply the optional affine terms."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = [a] + [p for p in (gamma, beta) if p is not None]

    def bw(g):
        gx_hat = g * gamma.data if gamma is not None else g
        gx = inv * (
            gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _node(out, parents, bw, "layer_norm")


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors to unit length; zero vectors stay zero (cosine 0)."""
    a = as_tensor(a)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    zero = norm == 0
    safe = np.where(zero, 1.0, norm)
    out = np.where(zero, 0.0, x / safe)

    def bw(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _node(out, (a,), bw, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    """Pairwise cosine between the rows of ``a`` (..., m, d) and ``b`` (..., n, d)."""
    return matmul(l2_normalize(a), swapaxes(l2_normalize(b), -1, -2))


# -- differentiation ---------------------------------------------------------
def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar and return ``{name: gradient}`` for ``params``.

    Parameters the root does not depend on get zero gradients.  Each
    parameter's ``.grad`` is set to the returned array.
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, np.ndarray] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(_topo_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                leaves[id(node)] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)
    out: dict[str, np.ndarray] = {}
    for name, p in (params or {}).items():
        g = leaves.get(id(p))
        g = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        p.grad = g
        out[name] = g
    return out


def grad_check_detail(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    prefer_nonzero: bool = False,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central-difference gradients.

    ``fn`` must rebuild the graph from the current parameter values on every
    call.  ``max_coords`` caps the number of probed coordinates per parameter
    (sampled without replacement); with ``prefer_nonzero`` the sample is
    drawn from coordinates with a non-zero analytic gradient first, which
    matters for embedding tables where most rows are untouched.  ``floor``
    bounds the denominator of the relative error from below; raise it when
    gradients sit near the finite-difference noise level (about 1e-11 per
    unit of loss at eps=1e-5).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = backward(fn(), params)
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                if prefer_nonzero:
                    live = np.flatnonzero(a_flat)
                    dead = np.flatnonzero(a_flat == 0)
                    take = rng.permutation(live)[:max_coords]
                    rest = rng.permutation(dead)[: max_coords - len(take)]
                    coords = np.sort(np.concatenate([take, rest]))
                else:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(fn().data.reshape(-1)[0])
                flat[i] = orig - eps
                fm = float(fn().data.reshape(-1)[0])
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    idx = [int(j) for j in np.unravel_index(i, p.shape)]
                    raise NumericError(f"non-finite value while probing {name}{idx}")
                a = float(a_flat[i])
                err = abs(a - num) / max(floor, abs(a) + abs(num))
                worst = max(worst, err)
            report[name] = worst
    return report


def grad_check(fn: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5, **kw) -> float:
    """Max over coordinates of |analytic - numeric| / max(floor, |analytic| + |numeric|)."""
    detail = grad_check_detail(fn, params, eps, **kw)
    return max(detail.values(), default=0.0)


# -- optimisation ------------------------------------------------------------
@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


# -- checkpoints ---------------------------------------------------------------
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, params: Mapping[str, Tensor | np.ndarray], meta: Mapping) -> None:
    """Write ``name -> little-endian f64 array`` entries plus a ``meta.json`` record.

    Entries are sorted and timestamps fixed so equal inputs give equal bytes.
    """
    with zipfile.ZipFile(path, "w") as zf:
        record = {"format_version": CHECKPOINT_FORMAT_VERSION, **dict(meta)}
        _zip_write(zf, "meta.json", json.dumps(record, sort_keys=True, indent=2).encode("utf-8"))
        for name in sorted(params):
            arr = params[name]
            arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f8"), allow_pickle=False)
            _zip_write(zf, f"{name}.npy", buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    params: dict[str, np.ndarray] = {}
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json").decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')!r}")
        for info in zf.infolist():
            if info.filename.endswith(".npy"):
                arr = np.lib.format.read_array(io.BytesIO(zf.read(info.filename)), allow_pickle=False)
                params[info.filename[: -len(".npy")]] = arr.astype(np.float64)
    return params, meta
