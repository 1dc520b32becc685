"""Late-interaction sentence retriever trained with a pairwise RankNet loss.

The question is framed as ``[CLS] [Q] q_1..q_m [mask].. [SEP]`` (padded with
``[mask]`` to a fixed length, every position a query row); a candidate is
framed as ``[CLS] [D] d_1..d_l [SEP] q_1..q_m [SEP]`` and only the rows from
``[D]`` through the first ``[SEP]`` are document rows.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Example, gold_retrieval_labels
from .layers import Linear, Module
from .linearize import CandidateSentence
from .tensor import Tensor
from .textenc import (
    CLS,
    DOC,
    MASK,
    QRY,
    SEP,
    SPECIAL,
    MiniEncoder,
    TokenSequence,
    TruncationCounter,
    Vocab,
    pad_batch,
    tokenize,
)

log = logging.getLogger(__name__)

_NEG_FILL = -2.0  # below any cosine


@dataclass
class RankedPool:
    ranked: list[tuple[int, float]]
    k: int

    @property
    def top(self) -> list[int]:
        return [cid for cid, _ in self.ranked[: self.k]]


def example_tokens(ex: Example, vocab: Vocab) -> tuple[TokenSequence, list[TokenSequence]]:
    """Question and candidate token sequences, cached on the example."""
    cache = ex.__dict__.setdefault("_token_cache", {})
    key = id(vocab)
    if key not in cache:
        q = tokenize(ex.question, vocab)
        cands = [tokenize(c.text, vocab, c.header_spans) for c in ex.pool]
        cache[key] = (q, cands)
    return cache[key]


def question_frame(q: TokenSequence, vocab: Vocab, query_len: int) -> tuple[list[int], list[int]]:
    ids, kinds = list(q.ids), list(q.kinds)
    if len(ids) > query_len:
        TruncationCounter.count += 1
        ids, kinds = ids[:query_len], kinds[:query_len]
    pad = query_len - len(ids)
    ids = [vocab[CLS], vocab[QRY]] + ids + [vocab[MASK]] * pad + [vocab[SEP]]
    kinds = [SPECIAL, SPECIAL] + kinds + [SPECIAL] * pad + [SPECIAL]
    return ids, kinds


def passage_frame(d: TokenSequence, q: TokenSequence, vocab: Vocab, max_len: int) -> tuple[list[int], list[int], int]:
    """Ids and kinds of the candidate frame plus the number of leading rows kept as document rows."""
    d_ids, d_kinds = list(d.ids), list(d.kinds)
    q_ids, q_kinds = list(q.ids), list(q.kinds)
    budget = max_len - 4
    if len(d_ids) + len(q_ids) > budget:
        TruncationCounter.count += 1
        keep_d = max(0, budget - len(q_ids))
        d_ids, d_kinds = d_ids[:keep_d], d_kinds[:keep_d]
        keep_q = budget - len(d_ids)
        q_ids, q_kinds = q_ids[:keep_q], q_kinds[:keep_q]
    ids = [vocab[CLS], vocab[DOC]] + d_ids + [vocab[SEP]] + q_ids + [vocab[SEP]]
    kinds = [SPECIAL, SPECIAL] + d_kinds + [SPECIAL] + q_kinds + [SPECIAL]
    return ids, kinds, len(d_ids) + 3


def late_interaction_sim(hq: Tensor, hd: Tensor) -> Tensor:
    """Sum over question rows of the best cosine against any document row."""
    if hq.shape[0] == 0 or hd.shape[0] == 0:
        raise T.ShapeError("late interaction needs non-empty question and document matrices")
    return T.cosine_similarity(hq, hd).max(axis=-1).sum()


def late_interaction_batch(hq: Tensor, hd: Tensor, doc_mask: np.ndarray) -> Tensor:
    """hq (P, m, d), hd (P, n, d), doc_mask (P, n) -> similarities (P,)."""
    sims = T.cosine_similarity(hq, hd)
    sims = T.where(doc_mask[:, None, :], sims, _NEG_FILL)
    return sims.max(axis=-1).sum(axis=-1)


def ranknet_pairs(sim_pos: Tensor, sim_neg: Tensor) -> Tensor:
    """Sum over all (positive, negative) pairs of log(1 + exp(neg - pos))."""
    diff = sim_neg.reshape(1, -1) - sim_pos.reshape(-1, 1)
    return T.softplus(diff).sum()


class LateInteractionRetriever(Module):
    kind = "late-interaction"

    def __init__(self, vocab: Vocab, config: RunConfig):
        rng = np.random.default_rng(config.seed)
        self.vocab = vocab
        self.query_len = config.query_len
        self.max_len = config.max_seq_len
        self.encoder = MiniEncoder(len(vocab), config.d_model, config.n_layers, config.n_heads, config.max_seq_len, rng=rng)

    # -- encoding ---------------------------------------------------------
    def encode_questions(self, questions: Sequence[TokenSequence]) -> Tensor:
        ids, kinds, mask = pad_batch([question_frame(q, self.vocab, self.query_len) for q in questions])
        return self.encoder(ids, kinds, mask)

    def encode_passages(self, pairs: Sequence[tuple[TokenSequence, TokenSequence]]) -> tuple[Tensor, np.ndarray]:
        frames = [passage_frame(d, q, self.vocab, self.max_len) for d, q in pairs]
        ids, kinds, mask = pad_batch([(a, b) for a, b, _ in frames])
        hd = self.encoder(ids, kinds, mask)
        doc_mask = np.zeros_like(mask)
        for i, (_, _, n_doc) in enumerate(frames):
            doc_mask[i, 1:n_doc] = True
        return hd, doc_mask

    def score_batch(self, examples: Sequence[Example]) -> tuple[Tensor, list[np.ndarray]]:
        """Similarity of every candidate of every example; returns flat scores and per-example index arrays."""
        toks = [example_tokens(ex, self.vocab) for ex in examples]
        hq = self.encode_questions([q for q, _ in toks])
        owner, pairs, index = [], [], []
        for b, (q, cands) in enumerate(toks):
            index.append(np.arange(len(pairs), len(pairs) + len(cands)))
            for d in cands:
                owner.append(b)
                pairs.append((d, q))
        hd, doc_mask = self.encode_passages(pairs)
        hq_rep = hq[np.asarray(owner, dtype=np.int64)]
        return late_interaction_batch(hq_rep, hd, doc_mask), index

    def batch_loss(self, examples: Sequence[Example], pair_cap: int | None, rng) -> tuple[Tensor | None, int]:
        labelled = []
        for ex in examples:
            pos, neg = gold_retrieval_labels(ex)
            if pos and neg:
                labelled.append((ex, pos, neg))
        if not labelled:
            return None, len(examples)
        sims, index = self.score_batch([ex for ex, _, _ in labelled])
        pi, ni = [], []
        for (ex, pos, neg), idx in zip(labelled, index):
            pos_at = {c.id: j for j, c in enumerate(ex.pool)}
            pairs = [(idx[pos_at[p]], idx[pos_at[n]]) for p in pos for n in neg]
            if pair_cap and len(pairs) > pair_cap:
                pairs = [pairs[i] for i in sorted(rng.choice(len(pairs), pair_cap, replace=False))]
            pi += [a for a, _ in pairs]
            ni += [b for _, b in pairs]
        diff = sims[np.asarray(ni)] - sims[np.asarray(pi)]
        loss = T.softplus(diff).sum() * (1.0 / len(labelled))
        return loss, len(examples) - len(labelled)


class VanillaRetriever(LateInteractionRetriever):
    """Binary relevance classifier on the pooled ``[CLS]`` row of the candidate frame."""

    kind = "vanilla"

    def __init__(self, vocab: Vocab, config: RunConfig):
        super().__init__(vocab, config)
        self.head = Linear(np.random.default_rng(config.seed + 1), config.d_model, 1)

    def score_batch(self, examples: Sequence[Example]) -> tuple[Tensor, list[np.ndarray]]:
        toks = [example_tokens(ex, self.vocab) for ex in examples]
        pairs, index = [], []
        for q, cands in toks:
            index.append(np.arange(len(pairs), len(pairs) + len(cands)))
            pairs += [(d, q) for d in cands]
        hd, _ = self.encode_passages(pairs)
        logits = self.head(hd[:, 0, :])
        return logits.reshape(-1), index

    def batch_loss(self, examples, pair_cap, rng):
        labelled = []
        for ex in examples:
            pos, neg = gold_retrieval_labels(ex)
            if pos:
                labelled.append((ex, set(pos)))
        if not labelled:
            return None, len(examples)
        logits, index = self.score_batch([ex for ex, _ in labelled])
        sign = np.concatenate([[-1.0 if c.id in pos else 1.0 for c in ex.pool] for ex, pos in labelled])
        loss = T.softplus(logits * sign).sum() * (1.0 / len(labelled))
        return loss, len(examples) - len(labelled)


def make_retriever(vocab: Vocab, config: RunConfig) -> LateInteractionRetriever:
    return VanillaRetriever(vocab, config) if config.vanilla_retriever else LateInteractionRetriever(vocab, config)


# -- single-item entry points --------------------------------------------------
def encode_question_for_retrieval(question: TokenSequence, model: LateInteractionRetriever) -> Tensor:
    hq = model.encode_questions([question])
    return hq.reshape(hq.shape[1], hq.shape[2])


def encode_passage_for_retrieval(sentence: TokenSequence, question: TokenSequence, model: LateInteractionRetriever) -> Tensor:
    hd, doc_mask = model.encode_passages([(sentence, question)])
    rows = np.flatnonzero(doc_mask[0])
    return hd[0, rows]


def ranknet_loss(ex: Example, model: LateInteractionRetriever) -> Tensor:
    """Pairwise loss of one example; raises when it has no positives or negatives."""
    pos, neg = gold_retrieval_labels(ex)
    if not pos or not neg:
        raise ValueError(f"example {ex.id} lacks positives or negatives")
    sims, (idx,) = model.score_batch([ex])
    at = {c.id: j for j, c in enumerate(ex.pool)}
    sp = sims[idx[[at[p] for p in pos]]]
    sn = sims[idx[[at[n] for n in neg]]]
    return ranknet_pairs(sp, sn)


def rank(scores: Sequence[float], pool: Sequence[CandidateSentence], k: int) -> RankedPool:
    if k < 1:
        raise ValueError("k must be at least 1")
    order = sorted(zip((c.id for c in pool), (float(s) for s in scores)), key=lambda t: (-t[1], t[0]))
    return RankedPool(order, min(k, len(order)))


def retrieve_topk(ex: Example, model: LateInteractionRetriever, k: int) -> RankedPool:
    with T.no_grad():
        sims, (idx,) = model.score_batch([ex])
    return rank(sims.data[idx], ex.pool, k)


def retrieve_all(examples: Sequence[Example], model: LateInteractionRetriever, k: int, batch_size: int = 32) -> dict[str, RankedPool]:
    out = {}
    with T.no_grad():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            sims, index = model.score_batch(chunk)
            for ex, idx in zip(chunk, index):
                out[ex.id] = rank(sims.data[idx], ex.pool, k)
    return out


def recall_at_k(ranked: RankedPool, positives: Sequence[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not positives:
        raise ValueError("recall is undefined without positives")
    top = {cid for cid, _ in ranked.ranked[:k]}
    return len(top & set(positives)) / len(set(positives))


def mean_recall(examples: Sequence[Example], ranked: dict[str, RankedPool], k: int) -> float:
    vals = []
    for ex in examples:
        pos, _ = gold_retrieval_labels(ex)
        if pos:
            vals.append(recall_at_k(ranked[ex.id], pos, k))
    return float(np.mean(vals)) if vals else 0.0


# -- training -------------------------------------------------------------------------
def train_retriever(
    train: Sequence[Example],
    dev: Sequence[Example],
    vocab: Vocab,
    config: RunConfig,
    max_steps: int | None = None,
) -> tuple[LateInteractionRetriever, list[dict]]:
    """Adam over shuffled mini-batches; keeps the parameters with the best dev recall@k."""
    model = make_retriever(vocab, config)
    params = model.named_parameters()
    state = T.AdamState(lr=config.retriever_lr)
    rng = np.random.default_rng(config.seed)
    train = [ex for ex in train if not ex.flag]
    history: list[dict] = []
    best, best_recall = model.snapshot(), -1.0
    step = 0
    for epoch in range(1, config.retriever_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        losses, skipped = [], 0
        for start in range(0, len(order), config.retriever_batch_size):
            batch = [train[i] for i in order[start : start + config.retriever_batch_size]]
            loss, n_skip = model.batch_loss(batch, config.pair_cap, rng)
            skipped += n_skip
            if loss is None:
                continue
            if not np.isfinite(loss.item()):
                raise T.NumericError(f"non-finite retriever loss at epoch {epoch} step {step}")
            grads = T.backward(loss, params)
            T.clip_grad_norm(grads, config.grad_clip)
            T.adam_step(params, grads, state)
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        recall = mean_recall(dev, retrieve_all(dev, model, config.k), config.k) if dev else float("nan")
        row = {
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else float("nan"),
            f"recall@{config.k}": recall,
            "skipped": skipped,
        }
        history.append(row)
        log.info(
            "event=epoch stage=retriever epoch=%d loss=%.6f recall@%d=%.4f skipped=%d seconds=%.1f",
            epoch, row["loss"], config.k, recall, skipped, time.perf_counter() - t0,
        )
        if not dev or recall > best_recall:
            best, best_recall = model.snapshot(), recall
        if max_steps is not None and step >= max_steps:
            break
    model.load_arrays(best)
    return model, history


def save_retriever(model: LateInteractionRetriever, config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.vocab.save(out / "vocab.tsv")
    meta = {"component": "retriever", "kind": model.kind, "config": config.to_dict(), "config_hash": config.hash(), "seed": config.seed}
    T.save_checkpoint(out / "retriever.ckpt", model.named_parameters(), meta)
    return out / "retriever.ckpt"


def load_retriever(ckpt_dir) -> LateInteractionRetriever:
    ckpt_dir = Path(ckpt_dir)
    path = ckpt_dir / "retriever.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no retriever checkpoint at {path}")
    arrays, meta = T.load_checkpoint(path)
    config = RunConfig.from_dict(meta["config"])
    vocab = Vocab.load(ckpt_dir / "vocab.tsv")
    model = make_retriever(vocab, config.replace(vanilla_retriever=meta["kind"] == "vanilla"))
    model.load_arrays(arrays)
    return model


def retrieval_records(ranked: dict[str, RankedPool]) -> list[dict]:
    return [
        {"id": qid, "k": rp.k, "ranked": [[cid, round(score, 10)] for cid, score in rp.ranked]}
        for qid, rp in ranked.items()
    ]


def ranked_from_records(records: Sequence[dict]) -> dict[str, RankedPool]:
    return {r["id"]: RankedPool([(int(c), float(s)) for c, s in r["ranked"]], int(r["k"])) for r in records}
