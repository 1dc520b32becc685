"""Tokenizer, vocabulary and the small trainable contextual encoder."""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, Module, param, zeros
from .tensor import Tensor

PAD, UNK, CLS, SEP, QRY, DOC, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[Q]", "[D]", "[mask]"
SPECIALS = (PAD, UNK, CLS, SEP, QRY, DOC, MASK)
DEFAULT_NUM_BUCKETS = 1024
MAX_SEQ_LEN = 256

WORD, NUMBER, ROW_HEADER, SPECIAL = 0, 1, 2, 3
KIND_NAMES = ("word", "number", "row-header", "special")

_NUMBER = r"(?:(?<![\w.])[-+])?(?:\$\s*)?(?:(?<![\w.])[-+])?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?(?: ?%)?(?![\w])"
_TOKEN_RE = re.compile(rf"(?P<num>{_NUMBER})|(?P<word>[a-z][a-z0-9]*(?:[-'][a-z0-9]+)*)|(?P<punct>\S)")


class TruncationCounter:
    """Counts sequences cut down to the maximum length."""

    count = 0


def normalize_number(surface: str) -> str:
    """Canonical text of a numeric literal: no ``$``, commas, spaces, ``+`` or redundant zeros.

    The percent sign is kept, so ``"7 %"`` -> ``"7%"`` and ``"$ 1,802.50"`` -> ``"1802.5"``.
    """
    s = re.sub(r"[\s$,+]", "", surface)
    pct = s.endswith("%")
    s = s.rstrip("%")
    neg = s.startswith("-")
    s = s.lstrip("-")
    whole, _, frac = s.partition(".")
    whole = whole.lstrip("0") or "0"
    frac = frac.rstrip("0")
    body = f"{whole}.{frac}" if frac else whole
    if neg and body != "0":
        body = "-" + body
    return body + ("%" if pct else "")


def parse_number(surface: str) -> float:
    """Numeric value of a literal; percentages are divided by 100."""
    canon = normalize_number(surface)
    if canon.endswith("%"):
        return float(canon[:-1]) / 100.0
    return float(canon)


def render_number(value: float) -> str:
    """Shortest positional decimal that parses back to exactly ``value``."""
    if not np.isfinite(value):
        raise ValueError(f"cannot render non-finite number {value!r}")
    text = np.format_float_positional(float(value), trim="-")
    return "0" if text == "-0" else text


def is_number(text: str) -> bool:
    return re.fullmatch(_NUMBER, text.strip()) is not None


@dataclass
class TokenSequence:
    """Token ids with kind tags, character spans and parsed numeric values."""

    ids: list[int] = field(default_factory=list)
    kinds: list[int] = field(default_factory=list)
    spans: list[tuple[int, int]] = field(default_factory=list)
    texts: list[str] = field(default_factory=list)
    values: list[float | None] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


def split_tokens(text: str) -> list[tuple[str, int, int, int]]:
    """(token text, kind, start, end) for each token of the lower-cased text."""
    out = []
    for m in _TOKEN_RE.finditer(text.lower()):
        kind = m.lastgroup
        if kind == "num":
            out.append((normalize_number(m.group()), NUMBER, m.start(), m.end()))
        else:
            out.append((m.group(), WORD, m.start(), m.end()))
    return out


class Vocab:
    """Token <-> id map; specials first, then hashed number buckets, then words."""

    def __init__(self, words: Sequence[str] = (), num_buckets: int = DEFAULT_NUM_BUCKETS):
        self.num_buckets = num_buckets
        self.itos: list[str] = list(SPECIALS) + [f"[NUM-{k}]" for k in range(num_buckets)]
        self.itos += [w for w in words if w not in self.itos]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def number_id(self, canonical: str) -> int:
        bucket = zlib.crc32(canonical.encode("utf-8")) % self.num_buckets
        return len(SPECIALS) + bucket

    def token_id(self, text: str, kind: int) -> int:
        return self.number_id(text) if kind == NUMBER else self[text]

    def save(self, path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.itos)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocab:
        itos = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            tok, _, idx = line.rpartition("\t")
            if int(idx) != lineno:
                raise ValueError(f"{path}: ids are not dense at line {lineno + 1}")
            itos.append(tok)
        buckets = sum(1 for t in itos if t.startswith("[NUM-"))
        vocab = cls(num_buckets=buckets)
        vocab.itos = itos
        vocab.stoi = {t: i for i, t in enumerate(itos)}
        return vocab


def corpus_texts(example) -> Iterable[str]:
    from .linearize import linearize_row

    yield example.question
    yield from example.sentences
    for r in range(len(example.table.rows)):
        yield linearize_row(example.table, r).text


def build_vocab(corpus: Sequence, min_freq: int = 1, num_buckets: int = DEFAULT_NUM_BUCKETS) -> Vocab:
    """Vocabulary over every word of the questions, sentences and row sentences.

    Words are ordered by descending frequency, ties alphabetically, so the
    result depends only on the corpus contents.
    """
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    freq: dict[str, int] = {}
    for ex in corpus:
        for text in corpus_texts(ex):
            for tok, kind, _, _ in split_tokens(text):
                if kind == WORD:
                    freq[tok] = freq.get(tok, 0) + 1
    words = sorted((w for w, c in freq.items() if c >= min_freq), key=lambda w: (-freq[w], w))
    return Vocab(words, num_buckets=num_buckets)


def tokenize(text: str, vocab: Vocab, row_header_spans: Sequence[tuple[int, int]] = ()) -> TokenSequence:
    """Lower-cased word/number/punctuation tokens; each numeric literal is one token.

    Tokens inside any of ``row_header_spans`` are tagged as row-header words.
    """
    seq = TokenSequence()
    for tok, kind, start, end in split_tokens(text):
        if kind == WORD and any(a <= start and end <= b for a, b in row_header_spans):
            kind = ROW_HEADER
        seq.ids.append(vocab.token_id(tok, kind))
        seq.kinds.append(kind)
        seq.spans.append((start, end))
        seq.texts.append(tok)
        seq.values.append(parse_number(tok) if kind == NUMBER else None)
    return seq


def special_ids(vocab: Vocab, *tokens: str) -> list[int]:
    return [vocab[t] for t in tokens]


def sinusoid_table(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    rates = 1.0 / np.power(10000.0, (2 * (np.arange(d) // 2)) / d)
    angles = pos * rates[None, :]
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(angles[:, 0::2])
    table[:, 1::2] = np.cos(angles[:, 1::2])
    return table


REL_CLIP = 8  # relative offsets beyond this share one bias


def relative_offsets(n: int) -> np.ndarray:
    """(n, n) table of clipped key-minus-query offsets shifted to [0, 2*REL_CLIP]."""
    pos = np.arange(n)
    return np.clip(pos[None, :] - pos[:, None], -REL_CLIP, REL_CLIP) + REL_CLIP


class EncoderBlock(Module):
    def __init__(self, rng: np.random.Generator, d: int, n_heads: int, d_ff: int):
        if d % n_heads:
            raise ValueError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        # no key bias: softmax over keys is invariant to it, so it would never learn
        self.qkv = Linear(rng, d, 3 * d, bias=False)
        self.q_bias = zeros(d)
        self.v_bias = zeros(d)
        # per-head additive attention bias by relative offset, so local
        # patterns ("of 2016 is 1802") need not be learned from absolute positions
        self.rel_bias = zeros(2 * REL_CLIP + 1, n_heads)
        self.out = Linear(rng, d, d)
        self.ln1 = LayerNorm(d)
        self.ff1 = Linear(rng, d, d_ff)
        self.ff2 = Linear(rng, d_ff, d)
        self.ln2 = LayerNorm(d)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        b, n, d = x.shape
        h, dh = self.n_heads, d // self.n_heads
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q = qkv[0] + self.q_bias.reshape(h, 1, dh)
        k = qkv[1]
        v = qkv[2] + self.v_bias.reshape(h, 1, dh)
        rel = T.embedding(self.rel_bias, relative_offsets(n)).transpose(2, 0, 1)
        scores = (q @ k.T) * (1.0 / np.sqrt(dh)) + rel
        weights = T.softmax(scores, axis=-1, mask=mask[:, None, None, :])
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        x = self.ln1(x + self.out(ctx))
        return self.ln2(x + self.ff2(T.gelu(self.ff1(x))))


class MiniEncoder(Module):
    """Token + kind + sinusoidal position embeddings followed by post-LN transformer blocks."""

    def __init__(
        self,
        vocab_size: int,
        d: int = 64,
        n_layers: int = 2,
        n_heads: int = 4,
        max_len: int = MAX_SEQ_LEN,
        seed: int = 8,
        rng: np.random.Generator | None = None,
        match_feature: bool = False,
    ):
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.d = d
        self.max_len = max_len
        self.tok_emb = param(rng, vocab_size, d, std=1.0)
        self.kind_emb = param(rng, len(KIND_NAMES), d, std=0.5)
        self.match_emb = param(rng, 2, d, std=0.5) if match_feature else None
        self.emb_ln = LayerNorm(d)
        self.blocks = [EncoderBlock(rng, d, n_heads, 2 * d) for _ in range(n_layers)]
        self._pos = sinusoid_table(max_len, d) * 0.5

    def __call__(self, ids: np.ndarray, kinds: np.ndarray, mask: np.ndarray, match: np.ndarray | None = None) -> Tensor:
        """ids/kinds/mask of shape (B, n) -> representations (B, n, d).

        ``match`` flags tokens whose id also occurs in the other segment of
        the frame; it is used only by encoders built with ``match_feature``.
        """
        ids = np.asarray(ids, dtype=np.int64)
        n = ids.shape[1]
        if n > self.max_len:
            raise T.ShapeError(f"sequence length {n} exceeds the encoder maximum {self.max_len}")
        x = T.embedding(self.tok_emb, ids) + T.embedding(self.kind_emb, kinds) + self._pos[:n]
        if self.match_emb is not None:
            flags = np.zeros(ids.shape, dtype=np.int64) if match is None else np.asarray(match, dtype=np.int64)
            x = x + T.embedding(self.match_emb, flags)
        x = self.emb_ln(x)
        mask = np.asarray(mask, dtype=bool)
        for block in self.blocks:
            x = block(x, mask)
        return x


def truncate(ids: list[int], kinds: list[int], max_len: int) -> tuple[list[int], list[int]]:
    if len(ids) > max_len:
        TruncationCounter.count += 1
        return ids[:max_len], kinds[:max_len]
    return ids, kinds


def pad_batch(seqs: Sequence[tuple[list[int], list[int]]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad (ids, kinds) pairs into arrays plus a validity mask."""
    n = max((len(ids) for ids, _ in seqs), default=0)
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    kinds = np.full((len(seqs), n), SPECIAL, dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, (a, k) in enumerate(seqs):
        ids[i, : len(a)] = a
        kinds[i, : len(k)] = k
        mask[i, : len(a)] = True
    return ids, kinds, mask


def match_flags(ids: np.ndarray, sep_id: int, skip: Iterable[int] = ()) -> np.ndarray:
    """Per-row flags for ``[CLS] a [SEP] b [SEP]`` frames: token of one segment also present in the other.

    Rows without a second segment get all zeros.  Ids in ``skip`` never match.
    """
    out = np.zeros(ids.shape, dtype=bool)
    skip = set(skip) | {sep_id}
    for r, row in enumerate(np.asarray(ids)):
        seps = np.flatnonzero(row == sep_id)
        if len(seps) < 2:
            continue
        a, b = row[1 : seps[0]], row[seps[0] + 1 : seps[1]]
        sa, sb = set(a.tolist()) - skip, set(b.tolist()) - skip
        out[r, 1 : seps[0]] = np.isin(a, list(sb))
        out[r, seps[0] + 1 : seps[1]] = np.isin(b, list(sa))
    return out


def encode_sequence(tokens: TokenSequence, enc: MiniEncoder, vocab: Vocab | None = None) -> Tensor:
    """Encode one token sequence to a (len, d) matrix, truncating to the encoder length.

    When ``vocab`` is given the sequence is wrapped as ``[CLS] ... [SEP]``.
    """
    ids, kinds = list(tokens.ids), list(tokens.kinds)
    if vocab is not None:
        ids = [vocab[CLS]] + ids + [vocab[SEP]]
        kinds = [SPECIAL] + kinds + [SPECIAL]
    ids, kinds = truncate(ids, kinds, enc.max_len)
    arr_ids, arr_kinds, mask = pad_batch([(ids, kinds)])
    out = enc(arr_ids, arr_kinds, mask)
    return out.reshape(out.shape[1], out.shape[2])
