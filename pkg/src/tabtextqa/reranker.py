"""Per-step sentence reranking during decoding.

The reranker space holds one vector for the question and one per retrieved
sentence.  Sentence vectors come from a shared dual-attention block followed
by mean pooling and are fixed for the whole decode; the question vector is
re-attended with the current decoder output at every step.  The query is the
decoder output attending over the source history (one row per generated
token: the token's own representation for DSL tokens, the vector of the
sentence it was copied from otherwise).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module, attention, param
from .tensor import Tensor


@dataclass
class RerankSpace:
    """Step-independent part of the space plus the masks needed to use it."""

    h_q_per_sentence: Tensor  # (B, k, d)
    h_sentences: Tensor  # (B, k, d)
    sent_mask: np.ndarray  # (B, k)
    h_q_pooled: Tensor  # (B, d), used when no sentence was retrieved

    @property
    def k(self) -> int:
        return self.h_sentences.shape[1]


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis -2 restricted to ``mask``; an empty mask gives zeros."""
    m = mask.astype(np.float64)[..., None]
    count = np.maximum(m.sum(axis=-2), 1.0)
    return (x * m).sum(axis=-2) * (1.0 / count)


class Reranker(Module):
    def __init__(self, rng: np.random.Generator, d: int):
        self.w_affinity = param(rng, d, d)
        self.w_question = param(rng, 2 * d, d)
        self.ln_question = LayerNorm(d)
        self.w_sentence = param(rng, 2 * d, d)
        self.ln_sentence = LayerNorm(d)
        self.wq_space = param(rng, d, d)
        self.wq_query = param(rng, d, d)
        self.score_hidden = Linear(rng, 2 * d, d)
        self.score_out = Linear(rng, d, 1)

    def dual_attention(self, hq: Tensor, q_mask: np.ndarray, hd: Tensor, d_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        """hq (B, n, d), hd (B, k, l, d) -> question-side (B, k, n, d), sentence-side (B, k, l, d)."""
        hq4 = hq.reshape(hq.shape[0], 1, hq.shape[1], hq.shape[2])
        affinity = (hq4 @ self.w_affinity) @ hd.T  # (B, k, n, l)
        q_ctx = T.softmax(affinity, axis=-1, mask=d_mask[:, :, None, :]) @ hd
        d_ctx = T.softmax(affinity.T, axis=-1, mask=q_mask[:, None, None, :]) @ hq4
        hq_b = hq4 + np.zeros((1, hd.shape[1], 1, 1))
        q_hat = self.ln_question(T.concat([hq_b, q_ctx], axis=-1) @ self.w_question)
        d_hat = self.ln_sentence(T.concat([hd, d_ctx], axis=-1) @ self.w_sentence)
        return q_hat, d_hat

    def build_space(self, hq: Tensor, q_mask: np.ndarray, hd: Tensor | None, d_mask: np.ndarray | None) -> RerankSpace:
        b, _, d = hq.shape
        pooled_q = masked_mean(hq, q_mask)
        if hd is None or hd.shape[1] == 0:
            empty = Tensor(np.zeros((b, 0, d)))
            return RerankSpace(empty, empty, np.zeros((b, 0), dtype=bool), pooled_q)
        q_hat, d_hat = self.dual_attention(hq, q_mask, hd, d_mask)
        sent_mask = d_mask.any(axis=-1)
        h_q_i = masked_mean(q_hat, np.broadcast_to(q_mask[:, None, :], q_hat.shape[:3]))
        h_d_i = masked_mean(d_hat, d_mask)
        return RerankSpace(h_q_i, h_d_i, sent_mask, pooled_q)

    def question_vector(self, y_hat: Tensor, space: RerankSpace) -> Tensor:
        """Attention of the decoder output over the per-sentence question vectors."""
        if space.k == 0:
            return space.h_q_pooled
        mask = space.sent_mask.copy()
        mask[~mask.any(axis=1), 0] = True
        return attention(y_hat, space.h_q_per_sentence, space.h_q_per_sentence, self.wq_space, mask=mask)

    def space_vectors(self, y_hat: Tensor, space: RerankSpace) -> Tensor:
        """(B, k+1, d): the step's question vector followed by the sentence vectors."""
        h_q = self.question_vector(y_hat, space)
        return T.concat([h_q.reshape(h_q.shape[0], 1, -1), space.h_sentences], axis=1)

    def query(self, y_hat: Tensor, history: list[Tensor]) -> Tensor:
        """Attention of the decoder output over the source history; zero before any token."""
        if not history:
            return Tensor(np.zeros(y_hat.shape))
        hist = T.stack(history, axis=1)
        return attention(y_hat, hist, hist, self.wq_query)

    def probabilities(self, q_s: Tensor, vectors: Tensor, sent_mask: np.ndarray) -> Tensor:
        """Softmax over the question and the k sentences of a two-layer scorer."""
        b, n, d = vectors.shape
        q_b = q_s.reshape(b, 1, d) + np.zeros((1, n, 1))
        logits = self.score_out(T.tanh(self.score_hidden(T.concat([q_b, vectors], axis=-1))))
        mask = np.concatenate([np.ones((b, 1), dtype=bool), sent_mask], axis=1)
        return T.softmax(logits.reshape(b, n), axis=-1, mask=mask)


def expand(probs: Tensor, block_onehot: np.ndarray, dsl_rows: np.ndarray) -> Tensor:
    """Token-level scores: each position takes its block's probability, DSL rows exactly 1.0.

    block_onehot (B, M, k+1) marks the block of every non-DSL position.
    """
    b = probs.shape[0]
    spread = (Tensor(block_onehot) @ probs.reshape(b, -1, 1)).reshape(b, -1)
    return T.where(dsl_rows, 1.0, spread)


def build_rerank_space(model: Reranker, hq: Tensor, q_mask: np.ndarray, hd: Tensor | None, d_mask: np.ndarray | None, y_hat: Tensor) -> Tensor:
    """The k+1 space vectors of one step: step question vector, then sentence vectors."""
    return model.space_vectors(y_hat, model.build_space(hq, q_mask, hd, d_mask))


def source_of(token_rep: Tensor, is_dsl: np.ndarray, block: np.ndarray, vectors: Tensor) -> Tensor:
    """Source-history rows: the token itself for DSL tokens, else the vector of its block.

    ``block`` is 0 for question tokens and i for sentence i; entries at DSL
    rows are ignored.
    """
    if np.any(block[~is_dsl] < 0) or np.any(block >= vectors.shape[1]):
        raise ValueError("token provenance outside the reranker space")
    rows = np.arange(vectors.shape[0])
    return T.where(is_dsl[:, None], token_rep, vectors[rows, np.maximum(block, 0)])


def rerank_query(model: Reranker, y_hat: Tensor, history: list[Tensor]) -> Tensor:
    return model.query(y_hat, history)


def rerank_scores(model: Reranker, q_s: Tensor, vectors: Tensor, sent_mask: np.ndarray, block_onehot: np.ndarray, dsl_rows: np.ndarray) -> Tensor:
    """s^r over every position of the scoring axis."""
    return expand(model.probabilities(q_s, vectors, sent_mask), block_onehot, dsl_rows)
