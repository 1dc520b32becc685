"""LSTM program decoder over question, retrieved sentences and DSL tokens.

Scoring axis of every batch: the m DSL rows first, then the question block,
then one block per retrieved sentence (``[CLS] sentence [SEP] question [SEP]``).
Only DSL rows, number tokens and the first token of a row header are
scoreable candidates.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import Example, DataError
from .dslprog import (
    CONSTANTS,
    EOF_TOKEN,
    MATH_OPERATORS,
    NONE_TOKEN,
    OPERATORS,
    TABLE_OPERATORS,
    DslToken,
    Program,
)
from .layers import LayerNorm, LSTMCell, Module, attention, param
from .reranker import Reranker, RerankSpace, expand, source_of
from .retriever import RankedPool, example_tokens
from .tensor import Tensor
from .textenc import (
    CLS,
    NUMBER,
    ROW_HEADER,
    SEP,
    SPECIAL,
    SPECIALS,
    WORD,
    MiniEncoder,
    TokenSequence,
    Vocab,
    match_flags,
    pad_batch,
    special_ids,
    truncate,
)

log = logging.getLogger(__name__)

# position categories on the scoring axis
C_EOF, C_NONE, C_MATH, C_TABLE, C_CONST, C_MEM, C_NUM, C_ROW, C_OTHER = range(9)


# template and question glue that would otherwise "match" in every frame
_FUNCTION_WORDS = ("the", "of", "is", "in", "a", "an", "and", "to", "from", "what", "was", "were", "for", ";", ",", ".", "?")


def dsl_tokens(max_ops: int) -> list[DslToken]:
    return (
        [EOF_TOKEN, NONE_TOKEN]
        + [DslToken.operator(op) for op in OPERATORS]
        + [DslToken.constant(c) for c in CONSTANTS]
        + [DslToken.memory(i) for i in range(max_ops)]
    )


def _dsl_category(tok: DslToken) -> int:
    if tok is EOF_TOKEN:
        return C_EOF
    if tok is NONE_TOKEN:
        return C_NONE
    if tok.kind == "operator":
        return C_TABLE if tok.text in TABLE_OPERATORS else C_MATH
    return C_CONST if tok.kind == "constant" else C_MEM


@dataclass
class Candidate:
    token: DslToken
    block: int  # 0 question, i >= 1 retrieved sentence i
    pos: int  # position inside the block's frame


@dataclass
class ExampleInputs:
    """Token frames and candidates of one example."""

    example: Example
    retrieved: list[int]
    q_frame: tuple[list[int], list[int]]
    d_frames: list[tuple[list[int], list[int]]]
    d_sentence_len: list[int]
    candidates: list[Candidate]
    targets: list[tuple[int, int]] | None = None  # (dsl index or -1, candidate index or -1)


def _block_candidates(tokens: TokenSequence, block: int, offset: int, limit: int, header: str | None) -> list[Candidate]:
    """Numbers of the block, plus the row header (at its first token) for table-row sentences."""
    out = []
    header_seen = header is None
    for j in range(min(len(tokens), limit)):
        kind = tokens.kinds[j]
        if kind == NUMBER:
            out.append(Candidate(DslToken.numeric(tokens.texts[j]), block, offset + j))
        elif kind == ROW_HEADER and not header_seen:
            header_seen = True
            out.append(Candidate(DslToken.row_header(header), block, offset + j))
    return out


def prepare_example(ex: Example, retrieved: Sequence[int], vocab: Vocab, max_len: int, max_ops: int, with_targets: bool) -> ExampleInputs:
    """Frames, candidate list and (optionally) teacher-forcing targets.

    Raises DataError when a gold argument is absent from the question and
    the retrieved sentences.
    """
    q, cands = example_tokens(ex, vocab)
    by_id = {c.id: i for i, c in enumerate(ex.pool)}
    cls_, sep = vocab[CLS], vocab[SEP]
    q_ids, q_kinds = truncate([cls_] + q.ids + [sep], [SPECIAL] + q.kinds + [SPECIAL], max_len)
    candidates = _block_candidates(q, 0, 1, len(q_ids) - 2, None)
    d_frames, d_lens = [], []
    for i, cid in enumerate(retrieved, start=1):
        pos = by_id[cid]
        d = cands[pos]
        budget = max_len - 3
        d_ids, d_kinds = d.ids[: budget], d.kinds[: budget]
        q_keep = max(0, budget - len(d_ids))
        ids = [cls_] + d_ids + [sep] + q.ids[:q_keep] + [sep]
        kinds = [SPECIAL] + d_kinds + [SPECIAL] + q.kinds[:q_keep] + [SPECIAL]
        d_frames.append(truncate(ids, kinds, max_len))
        d_lens.append(len(d_ids))
        candidates += _block_candidates(d, i, 1, len(d_ids), ex.pool[pos].row_header)
    inputs = ExampleInputs(ex, list(retrieved), (q_ids, q_kinds), d_frames, d_lens, candidates)
    if with_targets:
        inputs.targets = gold_targets(ex.program, candidates, max_ops, ex.id)
    return inputs


def gold_targets(prog: Program, candidates: Sequence[Candidate], max_ops: int, ex_id: str = "?") -> list[tuple[int, int]]:
    """Per target token: DSL index (candidate -1) or first matching candidate (DSL -1)."""
    if len(prog.steps) > max_ops:
        raise DataError(f"example {ex_id}: program has {len(prog.steps)} steps, decoder allows {max_ops}")
    vocab = dsl_tokens(max_ops)
    dsl_index = {(t.kind, t.text): i for i, t in enumerate(vocab)}
    out = []
    for tok in prog.tokens():
        if (tok.kind, tok.text) in dsl_index and tok.kind not in ("numeric", "row-header"):
            out.append((dsl_index[(tok.kind, tok.text)], -1))
            continue
        for ci, cand in enumerate(candidates):
            c = cand.token
            if c.kind == tok.kind and (c.value == tok.value if tok.kind == "numeric" else c.text.lower() == tok.text.lower()):
                out.append((-1, ci))
                break
        else:
            raise DataError(f"example {ex_id}: gold argument {tok.text!r} is not among the candidates")
    return out


@dataclass
class GeneratorInputs:
    """Batched encoder outputs and scoring-axis bookkeeping."""

    items: list[ExampleInputs]
    hq: Tensor
    q_mask: np.ndarray
    hd: Tensor | None  # (B, k, l, d)
    d_mask: np.ndarray | None  # (B, k, l)
    hh: Tensor  # (B, M, d): DSL rows then question then sentences
    valid: np.ndarray  # (B, M) non-padding rows
    cand_mask: np.ndarray  # (B, M)
    category: np.ndarray  # (B, M)
    mem_index: np.ndarray  # (B, M)
    block: np.ndarray  # (B, M), -1 on DSL rows
    block_onehot: np.ndarray  # (B, M, k+1)
    dsl_rows: np.ndarray  # (B, M)
    cand_at: list[dict[int, int]]  # per example: scoring position -> candidate index
    targets: np.ndarray | None = None  # (B, S) scoring positions
    step_mask: np.ndarray | None = None  # (B, S)

    @property
    def batch(self) -> int:
        return len(self.items)

    @property
    def h_rows(self) -> int:
        """Rows of the concatenated question+sentence matrix."""
        return self.hh.shape[1] - self.dsl_rows[0].sum()


@dataclass
class DecoderState:
    t: int
    h: Tensor
    c: Tensor
    y_prev: Tensor
    ys: list[Tensor] = field(default_factory=list)
    history: list[Tensor] = field(default_factory=list)
    emitted: list[list[int]] = field(default_factory=list)


@dataclass
class StepOutput:
    scores: Tensor
    context_scores: Tensor
    rerank: Tensor
    probs: Tensor | None
    token_reps: Tensor
    space: Tensor | None
    y_hat: Tensor
    lstm_state: tuple[Tensor, Tensor]


class Generator(Module):
    def __init__(self, vocab: Vocab, config: RunConfig):
        rng = np.random.default_rng(config.seed + 101)
        d = config.d_model
        self.vocab = vocab
        self.max_len = config.max_seq_len
        self.max_steps = config.max_decode_steps
        self.max_ops = (config.max_decode_steps - 1) // 3
        self.no_reranker = config.no_reranker
        self.dsl = dsl_tokens(self.max_ops)
        self.encoder = MiniEncoder(len(vocab), d, config.n_layers, config.n_heads, config.max_seq_len, rng=rng, match_feature=True)
        self._no_match = {vocab.token_id(w, WORD) for w in _FUNCTION_WORDS} | set(special_ids(vocab, *SPECIALS))
        self.h_dsl = param(rng, len(self.dsl), d, std=1.0)
        self.y0 = param(rng, d, std=1.0)
        self.lstm = LSTMCell(rng, d, d)
        self.wq_history = param(rng, d, d)
        self.wq_sequence = param(rng, d, d)
        self.w_context = param(rng, 3 * d, d)
        self.ln_context = LayerNorm(d)
        self.w_score = param(rng, 2 * d, d)
        self.reranker = Reranker(rng, d)

    # -- encoding --------------------------------------------------------------
    def prepare(self, ex: Example, retrieved: Sequence[int], with_targets: bool = False) -> ExampleInputs:
        return prepare_example(ex, retrieved, self.vocab, self.max_len, self.max_ops, with_targets)

    def encode(self, items: Sequence[ExampleInputs]) -> GeneratorInputs:
        b = len(items)
        m = len(self.dsl)
        k = max((len(it.d_frames) for it in items), default=0)
        q_ids, q_kinds, q_mask = pad_batch([it.q_frame for it in items])
        hq = self.encoder(q_ids, q_kinds, q_mask)
        nq = hq.shape[1]
        blocks = [hq]
        hd = d_mask = None
        nd = 0
        if k:
            frames = []
            for it in items:
                frames += it.d_frames + [([], [])] * (k - len(it.d_frames))
            d_ids, d_kinds, d_flat_mask = pad_batch(frames)
            nd = d_ids.shape[1]
            match = match_flags(d_ids, self.vocab[SEP], self._no_match)
            hd = self.encoder(d_ids, d_kinds, d_flat_mask, match).reshape(b, k, nd, -1)
            d_mask = d_flat_mask.reshape(b, k, nd)
            blocks.append(hd.reshape(b, k * nd, -1))
        h = T.concat(blocks, axis=1) if len(blocks) > 1 else hq
        dsl_b = self.h_dsl.reshape(1, m, -1) + np.zeros((b, 1, 1))
        hh = T.concat([dsl_b, h], axis=1)
        total = m + nq + k * nd

        valid = np.zeros((b, total), dtype=bool)
        cand = np.zeros((b, total), dtype=bool)
        category = np.full((b, total), C_OTHER, dtype=np.int64)
        mem_index = np.full((b, total), -1, dtype=np.int64)
        block = np.full((b, total), -1, dtype=np.int64)
        valid[:, :m] = cand[:, :m] = True
        for i, tok in enumerate(self.dsl):
            category[:, i] = _dsl_category(tok)
            if tok.kind == "memory":
                mem_index[:, i] = tok.index
        valid[:, m : m + nq] = q_mask
        block[:, m : m + nq] = 0
        for i in range(k):
            lo = m + nq + i * nd
            valid[:, lo : lo + nd] = d_mask[:, i]
            block[:, lo : lo + nd] = i + 1
        cand_at = []
        for bi, it in enumerate(items):
            at = {}
            for ci, c in enumerate(it.candidates):
                p = m + (c.pos if c.block == 0 else nq + (c.block - 1) * nd + c.pos)
                cand[bi, p] = True
                category[bi, p] = C_ROW if c.token.kind == "row-header" else C_NUM
                at[p] = ci
            cand_at.append(at)
        onehot = np.zeros((b, total, k + 1))
        rows, cols = np.nonzero(block >= 0)
        onehot[rows, cols, block[rows, cols]] = 1.0
        dsl_rows = block < 0

        gi = GeneratorInputs(items, hq, q_mask, hd, d_mask, hh, valid, cand, category, mem_index, block, onehot, dsl_rows, cand_at)
        if all(it.targets is not None for it in items):
            n_steps = max(len(it.targets) for it in items)
            targets = np.zeros((b, n_steps), dtype=np.int64)
            step_mask = np.zeros((b, n_steps), dtype=bool)
            inv = [{ci: p for p, ci in at.items()} for at in cand_at]
            for bi, it in enumerate(items):
                for s, (di, ci) in enumerate(it.targets):
                    targets[bi, s] = di if di >= 0 else inv[bi][ci]
                    step_mask[bi, s] = True
            gi.targets, gi.step_mask = targets, step_mask
        return gi

    # -- decoding ------------------------------------------------------------------
    def initial_state(self, b: int) -> DecoderState:
        d = self.y0.shape[0]
        zeros = Tensor(np.zeros((b, d)))
        y0 = self.y0.reshape(1, d) + np.zeros((b, 1))
        return DecoderState(t=1, h=zeros, c=zeros, y_prev=y0, emitted=[[] for _ in range(b)])

    def rerank_space(self, gi: GeneratorInputs) -> RerankSpace:
        return self.reranker.build_space(gi.hq, gi.q_mask, gi.hd, gi.d_mask)

    def step(self, state: DecoderState, gi: GeneratorInputs, space: RerankSpace | None, reranker_scores: Tensor | np.ndarray | None = None) -> StepOutput:
        """Scores of every scoring position at step ``state.t`` (state is not advanced)."""
        b = gi.batch
        h, c = self.lstm(state.y_prev, state.h, state.c)
        y_hat = h
        if state.ys:
            ys = T.stack(state.ys, axis=1)
            a_hist = attention(y_hat, ys, ys, self.wq_history)
        else:
            a_hist = Tensor(np.zeros(y_hat.shape))
        a_seq = attention(y_hat, gi.hh, gi.hh, self.wq_sequence, mask=gi.valid)
        h_ctx = self.ln_context(T.concat([a_hist, a_seq, y_hat], axis=-1) @ self.w_context)
        d = y_hat.shape[1]
        fused = T.concat([gi.hh, gi.hh * a_seq.reshape(b, 1, d)], axis=-1) @ self.w_score
        s_ctx = (fused @ h_ctx.reshape(b, d, 1)).reshape(b, -1)
        probs = vectors = None
        if reranker_scores is not None:
            s_r = T.as_tensor(reranker_scores)
        elif self.no_reranker or space is None:
            s_r = Tensor(np.ones(s_ctx.shape))
        else:
            vectors = self.reranker.space_vectors(y_hat, space)
            q_s = self.reranker.query(y_hat, state.history)
            probs = self.reranker.probabilities(q_s, vectors, space.sent_mask)
            s_r = expand(probs, gi.block_onehot, gi.dsl_rows)
        return StepOutput(s_ctx * s_r, s_ctx, s_r, probs, fused, vectors, y_hat, (h, c))

    def advance(self, state: DecoderState, out: StepOutput, gi: GeneratorInputs, chosen: np.ndarray) -> DecoderState:
        """Append the chosen tokens' representations and source rows."""
        b = gi.batch
        rows = np.arange(b)
        y_t = out.token_reps[rows, chosen]
        if out.space is not None:
            src = source_of(y_t, gi.dsl_rows[rows, chosen], gi.block[rows, chosen], out.space)
            history = state.history + [src]
        else:
            history = state.history + [y_t]
        h, c = out.lstm_state
        emitted = [e + [int(p)] for e, p in zip(state.emitted, chosen)]
        return DecoderState(state.t + 1, h, c, y_t, state.ys + [y_t], history, emitted)

    def loss(self, gi: GeneratorInputs) -> Tensor:
        """Teacher-forced cross-entropy over the candidate set, averaged per sequence then over the batch."""
        state = self.initial_state(gi.batch)
        space = None if self.no_reranker else self.rerank_space(gi)
        rows = np.arange(gi.batch)
        per_step = []
        for s in range(gi.targets.shape[1]):
            out = self.step(state, gi, space)
            logp = T.log_softmax(out.scores, axis=-1, mask=gi.cand_mask)
            per_step.append(logp[rows, gi.targets[:, s]])
            state = self.advance(state, out, gi, gi.targets[:, s])
        nll = -T.stack(per_step, axis=1)
        weights = gi.step_mask / gi.step_mask.sum(axis=1, keepdims=True)
        return (nll * weights).sum() * (1.0 / gi.batch)

    def legal_mask(self, gi: GeneratorInputs, state: DecoderState, finished: np.ndarray) -> np.ndarray:
        """Grammar-legal candidates for the next token of every sequence."""
        cat, mem = gi.category, gi.mem_index
        legal = np.zeros(cat.shape, dtype=bool)
        for bi, emitted in enumerate(state.emitted):
            if finished[bi]:
                legal[bi] = cat[bi] == C_EOF
                continue
            slot = len(emitted) % 3
            done_steps = len(emitted) // 3
            c = cat[bi]
            if slot == 0:
                ops = [self._token_at(gi, bi, p) for p in emitted[0::3]]
                stop = done_steps >= self.max_ops or "greater" in ops or len(emitted) + 4 > self.max_steps
                if not stop:
                    legal[bi] = c == C_MATH
                    if (c == C_ROW).any():
                        legal[bi] |= c == C_TABLE
                if done_steps >= 1:
                    legal[bi] |= c == C_EOF
            else:
                op = self._token_at(gi, bi, emitted[-slot])
                if op in TABLE_OPERATORS:
                    legal[bi] = (c == C_ROW) if slot == 1 else (c == C_NONE)
                else:
                    legal[bi] = (c == C_CONST) | (c == C_NUM) | ((c == C_MEM) & (mem[bi] < done_steps))
        return legal & gi.cand_mask

    def _token_at(self, gi: GeneratorInputs, bi: int, p: int) -> str:
        m = len(self.dsl)
        if p < m:
            return self.dsl[p].text
        return gi.items[bi].candidates[gi.cand_at[bi][p]].token.text

    def token_for(self, gi: GeneratorInputs, bi: int, p: int) -> DslToken:
        m = len(self.dsl)
        if p < m:
            return self.dsl[p]
        return gi.items[bi].candidates[gi.cand_at[bi][p]].token

    def decode_greedy(self, gi: GeneratorInputs, max_steps: int | None = None) -> list[DecodeResult]:
        max_steps = max_steps or self.max_steps
        b = gi.batch
        with T.no_grad():
            state = self.initial_state(b)
            space = None if self.no_reranker else self.rerank_space(gi)
            finished = np.zeros(b, dtype=bool)
            probs_log: list[list[list[float]]] = [[] for _ in range(b)]
            for _ in range(max_steps):
                out = self.step(state, gi, space)
                legal = self.legal_mask(gi, state, finished)
                if not legal.any(axis=1).all():
                    raise RuntimeError("empty legal mask")
                masked = np.where(legal, out.scores.data, -np.inf)
                chosen = np.argmax(masked, axis=1)
                for bi in range(b):
                    if not finished[bi] and out.probs is not None:
                        probs_log[bi].append([round(float(v), 6) for v in out.probs.data[bi]])
                state = self.advance(state, out, gi, chosen)
                finished |= gi.category[np.arange(b), chosen] == C_EOF
                if finished.all():
                    break
        results = []
        for bi in range(b):
            toks = [self.token_for(gi, bi, p) for p in state.emitted[bi]]
            results.append(assemble(toks, probs_log[bi]))
        return results


@dataclass
class DecodeResult:
    program: Program
    complete: bool
    rerank_probs: list[list[float]]


def assemble(tokens: Sequence[DslToken], probs: list[list[float]]) -> DecodeResult:
    """Group op/arg/arg triples into a program, stopping at EOF."""
    prog = Program()
    complete = False
    i = 0
    while i < len(tokens):
        if tokens[i].kind == "EOF":
            complete = True
            break
        if i + 2 >= len(tokens):
            break
        prog.steps.append((tokens[i].text, tokens[i + 1], tokens[i + 2]))
        i += 3
    n_used = i + 1 if complete else i
    return DecodeResult(prog, complete, probs[:n_used])


# -- functional entry points ------------------------------------------------------
def encode_inputs(model: Generator, examples: Sequence[Example], retrieved: Sequence[Sequence[int]], with_targets: bool = False) -> GeneratorInputs:
    """Encode questions with their retrieved sentence ids (in retrieval order)."""
    return model.encode([model.prepare(ex, ids, with_targets) for ex, ids in zip(examples, retrieved)])


def decode_step(
    model: Generator,
    state: DecoderState,
    gi: GeneratorInputs,
    reranker_scores=None,
    gold: np.ndarray | None = None,
    space: RerankSpace | None = None,
) -> tuple[Tensor, np.ndarray, DecoderState]:
    """One step: final scores, chosen positions (gold under teacher forcing) and the next state.

    Without ``reranker_scores`` the model's own reranker supplies s^r.
    """
    if space is None and reranker_scores is None and not model.no_reranker:
        space = model.rerank_space(gi)
    out = model.step(state, gi, space, reranker_scores)
    if gold is None:
        legal = model.legal_mask(gi, state, np.zeros(gi.batch, dtype=bool))
        if not legal.any(axis=1).all():
            raise RuntimeError("empty legal mask")
        chosen = np.argmax(np.where(legal, out.scores.data, -np.inf), axis=1)
    else:
        chosen = np.asarray(gold)
    return out.scores, chosen, model.advance(state, out, gi, chosen)


def generator_loss(scores: Tensor, gold: np.ndarray, candidate_mask: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(scores)[gold], normalized over the candidate set."""
    if not candidate_mask[np.arange(len(gold)), gold].all():
        raise DataError("gold token outside the candidate set")
    logp = T.log_softmax(scores, axis=-1, mask=candidate_mask)
    return -logp[np.arange(len(gold)), gold].mean()


def decode_greedy(gi: GeneratorInputs, model: Generator, max_steps: int | None = None) -> list[DecodeResult]:
    return model.decode_greedy(gi, max_steps)


# -- batching helpers -------------------------------------------------------------
def retrieved_ids(ranked: dict[str, RankedPool], ex: Example, k: int) -> list[int]:
    if k == 0:
        return []
    rp = ranked.get(ex.id)
    if rp is None:
        raise DataError(f"no retrieval output for example {ex.id}")
    return [cid for cid, _ in rp.ranked[:k]]


def prepare_all(model: Generator, examples: Sequence[Example], ranked: dict[str, RankedPool], k: int, with_targets: bool) -> tuple[list[ExampleInputs], list[tuple[str, str]]]:
    items, skipped = [], []
    for ex in examples:
        try:
            items.append(model.prepare(ex, retrieved_ids(ranked, ex, k), with_targets))
        except DataError as exc:
            skipped.append((ex.id, str(exc)))
    return items, skipped


def predict(model: Generator, items: Sequence[ExampleInputs], batch_size: int = 64) -> list[DecodeResult]:
    out = []
    for start in range(0, len(items), batch_size):
        gi = model.encode(items[start : start + batch_size])
        out += model.decode_greedy(gi)
    return out


# -- training -------------------------------------------------------------------------
def train_generator(
    train: Sequence[Example],
    dev: Sequence[Example],
    ranked: dict[str, RankedPool],
    vocab: Vocab,
    config: RunConfig,
    max_steps: int | None = None,
    eval_fn=None,
) -> tuple[Generator, list[dict]]:
    """Teacher-forced Adam training, keeping the parameters with the best dev program accuracy.

    ``eval_fn(model, dev) -> dict`` supplies the per-epoch dev metrics.
    """
    model = Generator(vocab, config)
    params = model.named_parameters()
    state = T.AdamState(lr=config.generator_lr)
    rng = np.random.default_rng(config.seed)
    items, skipped = prepare_all(model, [e for e in train if not e.flag], ranked, config.k, with_targets=True)
    for ex_id, why in skipped:
        log.debug("event=skip stage=generator id=%s reason=%r", ex_id, why)
    log.info("event=prepared stage=generator usable=%d skipped=%d", len(items), len(skipped))
    history: list[dict] = []
    best, best_key = model.snapshot(), None
    step = 0
    for epoch in range(1, config.generator_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(items))
        losses = []
        for start in range(0, len(order), config.generator_batch_size):
            batch = [items[i] for i in order[start : start + config.generator_batch_size]]
            loss = model.loss(model.encode(batch))
            if not np.isfinite(loss.item()):
                raise T.NumericError(f"non-finite generator loss at epoch {epoch} step {step}")
            grads = T.backward(loss, params)
            T.clip_grad_norm(grads, config.grad_clip)
            T.adam_step(params, grads, state)
            losses.append(loss.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "skipped": len(skipped)}
        if eval_fn is not None and dev:
            row.update(eval_fn(model, dev))
        history.append(row)
        log.info(
            "event=epoch stage=generator epoch=%d loss=%.6f dev_ea=%s dev_pa=%s seconds=%.1f",
            epoch, row["loss"], row.get("ea", "nan"), row.get("pa", "nan"), time.perf_counter() - t0,
        )
        key = (row.get("pa", 0.0), row.get("ea", 0.0), -row["loss"]) if eval_fn is not None and dev else None
        if key is None or best_key is None or key > best_key:
            best, best_key = model.snapshot(), key
        if max_steps is not None and step >= max_steps:
            break
    model.load_arrays(best)
    return model, history


def save_generator(model: Generator, config: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.vocab.save(out / "vocab.tsv")
    meta = {"component": "generator", "config": config.to_dict(), "config_hash": config.hash(), "seed": config.seed}
    T.save_checkpoint(out / "generator.ckpt", model.named_parameters(), meta)
    return out / "generator.ckpt"


def load_generator(ckpt_dir) -> Generator:
    ckpt_dir = Path(ckpt_dir)
    path = ckpt_dir / "generator.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"no generator checkpoint at {path}")
    arrays, meta = T.load_checkpoint(path)
    model = Generator(Vocab.load(ckpt_dir / "vocab.tsv"), RunConfig.from_dict(meta["config"]))
    model.load_arrays(arrays)
    return model
