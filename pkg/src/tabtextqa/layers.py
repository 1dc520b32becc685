"""Parameter containers and the few layers the models are built from."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-walking parameter registry.

    Any attribute holding a grad-requiring Tensor, a Module or a list of
    Modules contributes parameters under a dotted name.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key in sorted(vars(self)):
            val = getattr(self, key)
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, list) and val and all(isinstance(v, Module) for v in val):
                for i, sub in enumerate(val):
                    out.update(sub.named_parameters(f"{name}.{i}."))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        params = self.named_parameters()
        missing = [n for n in params if prefix + n not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            arr = arrays[prefix + name]
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}


def param(rng: np.random.Generator, *shape: int, std: float | None = None) -> Tensor:
    if std is None:
        std = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(rng, d_in, d_out)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = ones(d)
        self.beta = zeros(d)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class LSTMCell(Module):
    """Standard LSTM cell; gate order is input, forget, cell, output."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int):
        self.d_hidden = d_hidden
        self.w_ih = param(rng, d_in, 4 * d_hidden)
        self.w_hh = param(rng, d_hidden, 4 * d_hidden)
        bias = np.zeros(4 * d_hidden)
        bias[d_hidden : 2 * d_hidden] = 1.0
        self.bias = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        d = self.d_hidden
        gates = x @ self.w_ih + h @ self.w_hh + self.bias
        i = T.sigmoid(gates[..., :d])
        f = T.sigmoid(gates[..., d : 2 * d])
        g = T.tanh(gates[..., 2 * d : 3 * d])
        o = T.sigmoid(gates[..., 3 * d :])
        c = f * c + i * g
        return o * T.tanh(c), c


def attention(query: Tensor, keys: Tensor, values: Tensor, w_q: Tensor, mask=None) -> Tensor:
    """``softmax((query W) K^T) V`` for a batch of single queries.

    query (B, d), keys/values (B, n, d), optional mask (B, n) -> (B, d).
    """
    if keys.shape[-2] == 0:
        raise T.ShapeError("attention over an empty key set")
    if keys.shape[-2] != values.shape[-2]:
        raise T.ShapeError(f"attention: {keys.shape[-2]} keys but {values.shape[-2]} values")
    q = (query @ w_q).reshape(query.shape[0], 1, -1)
    weights = T.softmax(q @ keys.T, axis=-1, mask=None if mask is None else mask[:, None, :])
    return (weights @ values).reshape(query.shape[0], -1)
