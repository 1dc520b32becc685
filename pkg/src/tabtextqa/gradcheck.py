"""Finite-difference checks of every differentiable primitive and of the full decoder loss."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .config import RunConfig
from .layers import LSTMCell, attention
from .tensor import Tensor

TOLERANCE = 1e-4
# Denominator floor for the model-level check.  Some decoder gradients are
# ~1e-8, where central differences at eps=1e-5 carry ~5e-11 of rounding noise;
# the floor tolerates absolute discrepancies below 1e-9.
MODEL_FLOOR = 1e-5


def _leaf(rng: np.random.Generator, *shape: int, low: float | None = None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.5, size=shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    w = rng.normal(size=out.shape)
    return lambda y: (y * w).sum()


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[[], Tensor], dict[str, Tensor]]]:
    """name -> (scalar-valued closure, its leaves).  Outputs are reduced with fixed random weights."""
    rng = np.random.default_rng(seed)
    cases = {}

    def add_case(name, fn, **leaves):
        reduce = _weighted(fn(**leaves), rng)
        cases[name] = (lambda: reduce(fn(**leaves)), leaves)

    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    add_case("add", lambda a, b: a + b, a=a, b=b)
    add_case("sub", lambda a, b: a - b, a=_leaf(rng, 3, 4), b=_leaf(rng, 3, 1))
    add_case("mul", lambda a, b: a * b, a=_leaf(rng, 2, 3, 4), b=_leaf(rng, 3, 4))
    add_case("div", lambda a, b: a / b, a=_leaf(rng, 3, 4), b=_leaf(rng, 3, 4, low=0.5))
    add_case("power", lambda a: T.power(a, 2.5), a=_leaf(rng, 3, 4, low=0.5))
    add_case("matmul", lambda a, b: a @ b, a=_leaf(rng, 2, 3, 4), b=_leaf(rng, 4, 5))
    add_case("reshape", lambda a: T.reshape(a, (6, 2)) * T.reshape(a, (6, 2)), a=_leaf(rng, 3, 4))
    add_case("transpose", lambda a: T.transpose(a, (2, 0, 1)) ** 2, a=_leaf(rng, 2, 3, 4))
    add_case("swapaxes", lambda a: T.swapaxes(a, 0, 2) ** 2, a=_leaf(rng, 2, 3, 4))
    idx = np.array([0, 2, 2, 1])
    add_case("getitem", lambda a: a[idx, 1:] ** 2, a=_leaf(rng, 3, 4))
    ids = np.array([[1, 3, 1], [0, 4, 4]])
    add_case("embedding", lambda w: T.embedding(w, ids) ** 2, w=_leaf(rng, 5, 3))
    add_case("concat", lambda a, b: T.concat([a, b], axis=0) ** 2, a=_leaf(rng, 2, 3), b=_leaf(rng, 1, 3))
    add_case("stack", lambda a, b: T.stack([a, b], axis=1) ** 2, a=_leaf(rng, 2, 3), b=_leaf(rng, 2, 3))
    cond = rng.random((3, 4)) < 0.5
    add_case("where", lambda a, b: T.where(cond, a, b) ** 2, a=_leaf(rng, 3, 4), b=_leaf(rng, 3, 4))
    add_case("sum", lambda a: T.sum_(a, axis=1) ** 2, a=_leaf(rng, 3, 4))
    add_case("mean", lambda a: T.mean(a, axis=0, keepdims=True) ** 2, a=_leaf(rng, 3, 4))
    add_case("max", lambda a: T.max_(a, axis=-1), a=_leaf(rng, 3, 4))
    add_case("exp", T.exp, a=_leaf(rng, 3, 4))
    add_case("log", T.log, a=_leaf(rng, 3, 4, low=0.5))
    add_case("tanh", T.tanh, a=_leaf(rng, 3, 4))
    add_case("sigmoid", T.sigmoid, a=_leaf(rng, 3, 4))
    add_case("relu", lambda a: T.relu(a) ** 2, a=_leaf(rng, 3, 4))
    add_case("gelu", T.gelu, a=_leaf(rng, 3, 4))
    add_case("softplus", T.softplus, a=_leaf(rng, 3, 4))
    mask = np.array([[True, True, False, True], [True, False, False, False], [True, True, True, True]])
    add_case("softmax", lambda a: T.softmax(a, axis=-1, mask=mask), a=_leaf(rng, 3, 4))
    add_case("log_softmax", lambda a: T.log_softmax(a, axis=-1, mask=mask), a=_leaf(rng, 3, 4))
    add_case("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), a=_leaf(rng, 3, 5), g=_leaf(rng, 5), b=_leaf(rng, 5))
    add_case("l2_normalize", lambda a: T.l2_normalize(a), a=_leaf(rng, 3, 4))
    add_case("cosine_similarity", T.cosine_similarity, a=_leaf(rng, 3, 4), b=_leaf(rng, 5, 4))
    add_case(
        "attention",
        lambda q, k, v, w: attention(q, k, v, w, mask=np.array([[True, True, False], [True, True, True]])),
        q=_leaf(rng, 2, 4), k=_leaf(rng, 2, 3, 4), v=_leaf(rng, 2, 3, 4), w=_leaf(rng, 4, 4),
    )
    cell = LSTMCell(rng, 3, 4)
    x, h, c = _leaf(rng, 2, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 4)
    lstm_leaves = {"x": x, "h": h, "c": c, **{f"cell.{k}": v for k, v in cell.named_parameters().items()}}
    reduce = _weighted(T.concat(list(cell(x, h, c)), axis=-1), rng)
    cases["lstm_cell"] = (lambda: reduce(T.concat(list(cell(x, h, c)), axis=-1)), lstm_leaves)
    return cases


def check_primitives(seed: int = 0, max_coords: int = 100, eps: float = 1e-5) -> dict[str, float]:
    """Max relative error per primitive, probing up to ``max_coords`` random coordinates per leaf."""
    out = {}
    for name, (fn, leaves) in primitive_cases(seed).items():
        out[name] = T.grad_check(fn, leaves, eps=eps, max_coords=max_coords, seed=seed)
    return out


def toy_generator(seed: int = 0):
    """A tiny full pipeline instance: (generator, batched inputs) with k=2 retrieved sentences."""
    from .data import SynthSpec, gold_retrieval_labels, synthesize_dataset
    from .generator import Generator
    from .textenc import build_vocab

    splits = synthesize_dataset(SynthSpec(n_train=6, n_dev=1, n_test=1, length_probs=(0.0, 1.0, 0.0), seed=seed))
    ex = next(e for e in splits["train"] if len(gold_retrieval_labels(e)[0]) >= 1)
    config = RunConfig(seed=seed, k=2, d_model=8, n_layers=1, n_heads=2, num_buckets=16, max_seq_len=64)
    vocab = build_vocab(splits["train"], num_buckets=config.num_buckets)
    model = Generator(vocab, config)
    pos, neg = gold_retrieval_labels(ex)
    retrieved = (pos + neg)[:2]
    gi = model.encode([model.prepare(ex, retrieved, with_targets=True)])
    return model, gi


def check_model(seed: int = 0, max_coords: int = 12, eps: float = 1e-5, floor: float = MODEL_FLOOR) -> dict[str, float]:
    """Per-parameter max relative error of the teacher-forced decoder loss (reranker path included).

    The loss covers every step of a two-step gold program, so the history
    attention, the reranker query and the source history all carry gradient.
    """
    model, gi = toy_generator(seed)
    params = model.named_parameters()
    return T.grad_check_detail(
        lambda: model.loss(model.encode(gi.items)), params,
        eps=eps, max_coords=max_coords, seed=seed, prefer_nonzero=True, floor=floor,
    )
