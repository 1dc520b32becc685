"""Question/table/text examples: file format, retrieval labels and a synthetic generator.

The dataset file is a JSON array of records shaped like the public FinQA
files::

    {"id": ..., "pre_text": [...], "post_text": [...],
     "table": [[col, ...], [row header, cell, ...], ...],
     "qa": {"question": ..., "program": ..., "exe_ans": ..., "gold_inds": [candidate ids]}}

``gold_inds`` may also be FinQA's ``{"text_3": ..., "table_1": ...}`` mapping.
"""
from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .dslprog import (
    NUMERIC,
    ROW_HEADER,
    Answer,
    ExecutionError,
    Program,
    ProgramParseError,
    answers_equal,
    execute,
    parse_answer,
    parse_program,
)
from .linearize import CandidateSentence, Table, build_candidate_pool
from .textenc import NUMBER, parse_number, render_number, split_tokens

log = logging.getLogger(__name__)

TABLE_ONLY, SENTENCE_ONLY, TABLE_SENTENCE = "table-only", "sentence-only", "table-sentence"


class DataError(ValueError):
    """Malformed or unusable data."""


@dataclass
class Example:
    id: str
    pre_text: list[str]
    post_text: list[str]
    table: Table
    question: str
    program_text: str
    answer: Answer | None
    gold_inds: list[int] = field(default_factory=list)
    flag: str | None = None

    @property
    def sentences(self) -> list[str]:
        return self.pre_text + self.post_text

    @cached_property
    def pool(self) -> list[CandidateSentence]:
        return build_candidate_pool(self.sentences, self.table)

    @cached_property
    def program(self) -> Program:
        return parse_program(self.program_text)

    def to_record(self) -> dict:
        ans = self.answer
        return {
            "id": self.id,
            "pre_text": self.pre_text,
            "post_text": self.post_text,
            "table": self.table.to_grid(),
            "qa": {
                "question": self.question,
                "program": self.program_text,
                "exe_ans": ans,
                "gold_inds": list(self.gold_inds),
            },
        }


def _gold_ids(raw, n_sent: int) -> list[int]:
    if raw is None:
        return []
    if isinstance(raw, dict):
        ids = []
        for key in raw:
            kind, _, idx = key.partition("_")
            if kind == "text":
                ids.append(int(idx) + 1)
            elif kind == "table":
                ids.append(n_sent + int(idx) + 1)
            else:
                raise ValueError(f"unrecognised gold index {key!r}")
        return sorted(ids)
    return sorted(int(i) for i in raw)


def example_from_record(rec: dict) -> Example:
    qa = rec["qa"]
    pre, post = list(rec.get("pre_text", [])), list(rec.get("post_text", []))
    raw_ans = qa.get("exe_ans")
    return Example(
        id=str(rec["id"]),
        pre_text=pre,
        post_text=post,
        table=Table.from_grid(rec.get("table", [])),
        question=qa["question"],
        program_text=qa["program"],
        answer=None if raw_ans is None else parse_answer(raw_ans),
        gold_inds=_gold_ids(qa.get("gold_inds"), len(pre) + len(post)),
    )


def validate(ex: Example) -> str | None:
    """Reason the example is unusable, or None."""
    try:
        prog = ex.program
    except ProgramParseError as exc:
        return f"program does not parse: {exc}"
    try:
        got = execute(prog, ex.table)
    except ExecutionError as exc:
        return f"program fails: {exc.code}"
    if not answers_equal(got, ex.answer):
        return f"program gives {got!r}, gold answer {ex.answer!r}"
    return None


def load_dataset(path) -> list[Example]:
    """Parse and validate a dataset file; inconsistent examples are kept but flagged."""
    records = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise DataError(f"{path}: expected a JSON array of records")
    out = []
    for i, rec in enumerate(records):
        try:
            ex = example_from_record(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed record {i}: {exc}") from exc
        ex.flag = validate(ex)
        if ex.flag:
            log.warning("event=inconsistent_example id=%s reason=%r", ex.id, ex.flag)
        out.append(ex)
    return out


def save_dataset(examples: Sequence[Example], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps([e.to_record() for e in examples], indent=1) + "\n", encoding="utf-8")


def usable(examples: Sequence[Example]) -> list[Example]:
    return [e for e in examples if not e.flag]


# -- provenance -----------------------------------------------------------------
@functools.lru_cache(maxsize=65536)
def _text_values(text: str) -> tuple[float, ...]:
    return tuple(parse_number(tok) for tok, kind, _, _ in split_tokens(text) if kind == NUMBER)


def candidate_values(cand: CandidateSentence) -> list[float]:
    return list(_text_values(cand.text))


def mentions(cand: CandidateSentence, arg) -> bool:
    """Whether a numeric / row-header program argument occurs in the candidate."""
    if arg.kind == NUMERIC:
        return arg.value in candidate_values(cand)
    if arg.kind == ROW_HEADER:
        return cand.is_row and cand.row_header.lower() == arg.text.lower()
    return False


def gold_retrieval_labels(ex: Example) -> tuple[list[int], list[int]]:
    """Positive and negative candidate ids.

    Explicit gold indices win; otherwise a candidate is positive when it
    contains one of the program's numeric or row-header arguments.
    """
    ids = [c.id for c in ex.pool]
    if ex.gold_inds:
        pos = [i for i in ids if i in set(ex.gold_inds)]
    else:
        try:
            args = ex.program.numeric_args()
        except ProgramParseError:
            args = []
        pos = [c.id for c in ex.pool if any(mentions(c, a) for a in args)]
    neg = [i for i in ids if i not in set(pos)]
    return pos, neg


def question_type(ex: Example) -> str:
    """Where the gold arguments live: rows only, narrative only, or both."""
    origins = []
    for arg in ex.program.numeric_args():
        src = next((c for c in ex.pool if mentions(c, arg)), None)
        if src is None and arg.kind == NUMERIC and arg.value in _question_values(ex):
            origins.append(False)
        elif src is not None:
            origins.append(src.is_row)
    if origins and all(origins):
        return TABLE_ONLY
    if not any(origins):
        return SENTENCE_ONLY
    return TABLE_SENTENCE


def _question_values(ex: Example) -> list[float]:
    return [parse_number(t) for t, k, _, _ in split_tokens(ex.question) if k == NUMBER]


def length_bucket(n_steps: int) -> str:
    return str(n_steps) if n_steps <= 2 else ">2"


# -- synthetic corpora --------------------------------------------------------------
METRICS = (
    "third-party sales", "net revenue", "net income", "operating income", "operating expenses",
    "gross margin", "interest expense", "capital expenditures", "total assets", "total liabilities",
    "long-term debt", "cash dividends", "share repurchases", "depreciation", "amortization",
    "goodwill", "inventory", "accounts payable", "accounts receivable", "deferred revenue",
    "research and development", "rental expense", "income taxes", "free cash flow", "net sales",
    "cost of sales", "selling expenses", "pension obligations", "retained earnings", "backlog",
)
ENTITIES = (
    "restructuring charges", "pension contributions", "stock-based compensation", "advertising costs",
    "warranty reserves", "environmental remediation costs", "severance payments", "acquisition costs",
    "litigation settlements", "foreign currency losses", "impairment charges", "tax credits",
    "lease payments", "insurance recoveries", "bond issuances", "dividend payments received",
)
RATES = ("effective tax rate", "operating margin", "gross profit margin", "return on equity", "payout ratio")
VERBS = ("were", "totaled", "amounted to")
YEARS = tuple(range(2008, 2021))

LENGTH1 = ("change_table", "sum_table", "ratio_rows", "change_text", "ratio_mixed", "table_agg", "greater_table")
LENGTH2 = ("pct_change_table", "pct_change_text", "avg_two", "share_pct")
LENGTH3 = ("combined_change", "pct_change_pct")
CROSS_SENTENCE = ("ratio_rows", "change_text", "ratio_mixed", "pct_change_text", "share_pct", "combined_change")


@dataclass
class SynthSpec:
    n_train: int = 800
    n_dev: int = 100
    n_test: int = 100
    rows: tuple[int, int] = (3, 6)
    year_columns: tuple[int, int] = (2, 4)
    sentences: tuple[int, int] = (2, 4)
    distractors: int = 1
    length_probs: tuple[float, float, float] = (0.5, 0.4, 0.1)
    families: tuple[str, ...] = LENGTH1 + LENGTH2 + LENGTH3
    cross_sentence: bool = False
    seed: int = 8

    def __post_init__(self):
        if min(self.n_train, self.n_dev, self.n_test) <= 0:
            raise ValueError("split sizes must be positive")
        if abs(sum(self.length_probs) - 1.0) > 1e-9 or min(self.length_probs) < 0:
            raise ValueError(f"length probabilities {self.length_probs} do not form a distribution")
        unknown = set(self.families) - set(LENGTH1 + LENGTH2 + LENGTH3)
        if unknown:
            raise ValueError(f"unknown question families {sorted(unknown)}")

    @classmethod
    def distractor_heavy(cls, **kw) -> SynthSpec:
        kw.setdefault("distractors", 3)
        kw.setdefault("length_probs", (0.5, 0.5, 0.0))
        return cls(families=CROSS_SENTENCE, cross_sentence=True, **kw)


class _Builder:
    """Assembles one synthetic example; values are unique within the example."""

    def __init__(self, rng: np.random.Generator, spec: SynthSpec):
        self.rng = rng
        self.spec = spec
        self.used: set[float] = set()
        n_years = int(rng.integers(spec.year_columns[0], spec.year_columns[1] + 1))
        start = int(rng.integers(YEARS[0], YEARS[-1] - n_years + 2))
        self.years = list(range(start + n_years - 1, start - 1, -1))
        n_rows = int(rng.integers(spec.rows[0], spec.rows[1] + 1))
        self.metrics = [METRICS[i] for i in rng.choice(len(METRICS), size=n_rows, replace=False)]
        self.dollar = bool(rng.random() < 0.6)
        self.cells = {(m, y): self.fresh() for m in self.metrics for y in self.years}
        self.facts: list[tuple[str, int, float, bool]] = []
        self.sentences: list[str] = []

    def fresh(self, near: float | None = None, decimals: bool | None = None) -> float:
        rng = self.rng
        if decimals is None:
            decimals = bool(rng.random() < 0.2)
        for _ in range(1000):
            if near is None:
                v = float(rng.integers(100, 10000))
            else:
                v = float(near + rng.integers(-60, 61))
            if decimals:
                v = round(v + float(rng.integers(1, 10)) / 10, 1)
            if v > 0 and v not in self.used and not (1990 <= v <= 2030):
                self.used.add(v)
                return v
        raise RuntimeError("could not draw a fresh value")

    def fresh_rate(self) -> float:
        for _ in range(1000):
            v = round(float(self.rng.integers(20, 400)) / 10, 1)
            if v not in self.used:
                self.used.add(v)
                return v
        raise RuntimeError("could not draw a fresh rate")

    def fmt_cell(self, v: float) -> str:
        body = f"{v:,.1f}" if v != int(v) else f"{int(v):,}"
        if self.rng.random() < 0.5:
            body = body.replace(",", "")
        return f"$ {body}" if self.dollar else body

    def fact(self, entity: str, year: int, value: float, rate: bool = False) -> str:
        rng = self.rng
        if rate:
            s = f"the {entity} was {render_number(value)}% in {year} ."
        elif rng.random() < 0.5:
            s = f"in {year} , {entity} {VERBS[int(rng.integers(len(VERBS)))]} $ {render_number(value)} million ."
        else:
            s = f"{entity} {VERBS[int(rng.integers(len(VERBS)))]} $ {render_number(value)} million in {year} ."
        self.facts.append((entity, year, value, rate))
        self.sentences.append(s)
        return s

    def table(self) -> Table:
        cols = [""] + [str(y) for y in self.years]
        rows = [[m] + [self.fmt_cell(self.cells[(m, y)]) for y in self.years] for m in self.metrics]
        return Table(columns=cols, rows=rows)

    def two_years(self) -> tuple[int, int]:
        a, b = sorted(self.rng.choice(len(self.years), size=2, replace=False))
        return self.years[b], self.years[a]  # earlier, later

    def pick(self, seq):
        return seq[int(self.rng.integers(len(seq)))]


def _num(v: float) -> str:
    return render_number(v)


def _family(b: _Builder, fam: str) -> tuple[str, str, list[float]]:
    """Question text, gold program, and the values that must not leak into distractors."""
    rng = b.rng
    pick = b.pick
    if fam in ("change_table", "sum_table", "pct_change_table", "avg_two", "greater_table", "pct_change_pct"):
        m = pick(b.metrics)
        ya, yb = b.two_years()
        va, vb = b.cells[(m, ya)], b.cells[(m, yb)]
        if fam == "change_table":
            q = pick((f"what was the change in {m} from {ya} to {yb} ?", f"by how much did {m} change between {ya} and {yb} ?"))
            return q, f"subtract({_num(vb)}, {_num(va)})", [va, vb]
        if fam == "sum_table":
            q = pick((f"what was the total {m} in {ya} and {yb} ?", f"what is the sum of {m} for {ya} and {yb} ?"))
            return q, f"add({_num(va)}, {_num(vb)})", [va, vb]
        if fam == "greater_table":
            q = f"was {m} in {yb} greater than in {ya} ?"
            return q, f"greater({_num(vb)}, {_num(va)})", [va, vb]
        if fam == "avg_two":
            q = f"what was the average {m} in {ya} and {yb} ?"
            return q, f"add({_num(va)}, {_num(vb)}), divide(#0, const_2)", [va, vb]
        if fam == "pct_change_pct":
            q = f"what was the percentage change in {m} from {ya} to {yb} , in percent ?"
            return q, f"subtract({_num(vb)}, {_num(va)}), divide(#0, {_num(va)}), multiply(#1, const_100)", [va, vb]
        q = pick((
            f"what was the percentage change in {m} from {ya} to {yb} ?",
            f"what was the change in {m} from {ya} to {yb} as a percent of the {ya} value ?",
        ))
        return q, f"subtract({_num(vb)}, {_num(va)}), divide(#0, {_num(va)})", [va, vb]
    if fam in ("ratio_rows", "share_pct", "combined_change"):
        m1, m2 = (b.metrics[i] for i in rng.choice(len(b.metrics), size=2, replace=False))
        if fam == "combined_change":
            ya, yb = b.two_years()
            a1, a2, b1, b2 = b.cells[(m1, ya)], b.cells[(m2, ya)], b.cells[(m1, yb)], b.cells[(m2, yb)]
            q = f"what was the change in the combined {m1} and {m2} from {ya} to {yb} ?"
            prog = f"add({_num(b1)}, {_num(b2)}), add({_num(a1)}, {_num(a2)}), subtract(#0, #1)"
            return q, prog, [a1, a2, b1, b2]
        y = pick(b.years)
        v1, v2 = b.cells[(m1, y)], b.cells[(m2, y)]
        if fam == "ratio_rows":
            q = f"what was the ratio of {m1} to {m2} in {y} ?"
            return q, f"divide({_num(v1)}, {_num(v2)})", [v1, v2]
        q = f"what percentage of {m2} did {m1} represent in {y} ?"
        return q, f"divide({_num(v1)}, {_num(v2)}), multiply(#0, const_100)", [v1, v2]
    if fam == "table_agg":
        m = pick(b.metrics)
        op, phrase = pick((
            ("table_sum", f"what was the total {m} across all years shown ?"),
            ("table_average", f"what was the average {m} over the years shown ?"),
            ("table_max", f"what was the highest {m} over the years shown ?"),
            ("table_min", f"what was the lowest {m} over the years shown ?"),
        ))
        return phrase, f"{op}({m}, none)", [b.cells[(m, y)] for y in b.years]
    if fam in ("change_text", "pct_change_text"):
        rate = fam == "change_text" and rng.random() < 0.25
        e = pick(RATES if rate else ENTITIES)
        ya, yb = b.two_years()
        va, vb = (b.fresh_rate(), b.fresh_rate()) if rate else (b.fresh(), b.fresh())
        b.fact(e, ya, va, rate)
        b.fact(e, yb, vb, rate)
        ta, tb = (f"{_num(v)}%" if rate else _num(v) for v in (va, vb))
        if fam == "change_text":
            q = f"what was the change in the {e} from {ya} to {yb} ?" if rate else f"what was the change in {e} from {ya} to {yb} ?"
            return q, f"subtract({tb}, {ta})", [va, vb]
        q = f"what was the percentage change in {e} from {ya} to {yb} ?"
        return q, f"subtract({tb}, {ta}), divide(#0, {ta})", [va, vb]
    if fam == "ratio_mixed":
        e = pick(ENTITIES)
        m = pick(b.metrics)
        y = pick(b.years)
        ve = b.fresh()
        b.fact(e, y, ve)
        vm = b.cells[(m, y)]
        q = f"what was the ratio of {e} to {m} in {y} ?"
        return q, f"divide({_num(ve)}, {_num(vm)})", [ve, vm]
    raise ValueError(fam)


def _synth_one(rng: np.random.Generator, spec: SynthSpec, ex_id: str) -> Example:
    b = _Builder(rng, spec)
    lengths = ((1, LENGTH1), (2, LENGTH2), (3, LENGTH3))
    probs = np.array(spec.length_probs, dtype=float)
    avail = [[f for f in fams if f in spec.families] for _, fams in lengths]
    probs = np.array([p if a else 0.0 for p, a in zip(probs, avail)])
    bucket = int(rng.choice(3, p=probs / probs.sum()))
    fam = b.pick(avail[bucket])
    question, program, gold_vals = _family(b, fam)
    gold_set = set(gold_vals)
    # same-entity facts in other years, then unrelated facts, then near-miss distractors
    n_background = int(rng.integers(spec.sentences[0], spec.sentences[1] + 1))
    entities = [e for e in ENTITIES if e not in {f[0] for f in b.facts}]
    for _ in range(max(0, n_background - len(b.sentences))):
        b.fact(b.pick(entities), b.pick(b.years), b.fresh())
    for _ in range(spec.distractors):
        anchor = b.pick(gold_vals)
        if b.facts and rng.random() < 0.5:
            ent, _, _, rate = b.pick(b.facts)
        else:
            ent, rate = b.pick(entities), False
        if rate:
            b.fact(ent, b.pick(b.years), b.fresh_rate(), rate=True)
        else:
            b.fact(ent, b.pick([y for y in YEARS if y not in b.years] or list(YEARS)), b.fresh(near=anchor))
    facts = list(zip(b.sentences, b.facts))
    order = rng.permutation(len(facts))
    facts = [facts[i] for i in order]
    sentences = [s for s, _ in facts]
    split = int(rng.integers(0, len(sentences) + 1))
    table = b.table()
    ex = Example(
        id=ex_id,
        pre_text=sentences[:split],
        post_text=sentences[split:],
        table=table,
        question=question,
        program_text=program,
        answer=None,
    )
    ex.answer = execute(ex.program, table)
    pos, _ = gold_retrieval_labels(ex)
    ex.gold_inds = pos
    # distractor text must not repeat a gold value
    for cand in ex.pool:
        if not cand.is_row and cand.id not in pos:
            assert not gold_set.intersection(candidate_values(cand)), ex_id
    return ex


def synthesize_dataset(spec: SynthSpec) -> dict[str, list[Example]]:
    """Deterministic train/dev/test splits with no question shared across splits."""
    rng = np.random.default_rng(spec.seed)
    seen: set[str] = set()
    out: dict[str, list[Example]] = {}
    for split, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        exs = []
        while len(exs) < n:
            ex = _synth_one(rng, spec, f"{split}-{len(exs):05d}")
            if ex.question in seen:
                continue
            seen.add(ex.question)
            exs.append(ex)
        out[split] = exs
    return out
