"""Execution/program accuracy, breakdowns, the end-to-end pipeline and ablations."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import (
    DataError,
    SENTENCE_ONLY,
    TABLE_ONLY,
    TABLE_SENTENCE,
    Example,
    gold_retrieval_labels,
    length_bucket,
    question_type,
)
from .dslprog import ExecutionError, Program, answers_equal, execute, program_equal, serialize_program
from .generator import DecodeResult, Generator, prepare_all, predict, train_generator
from .retriever import (
    LateInteractionRetriever,
    RankedPool,
    recall_at_k,
    retrieve_all,
    train_retriever,
)
from .textenc import Vocab, build_vocab

log = logging.getLogger(__name__)

QUESTION_TYPES = (TABLE_ONLY, SENTENCE_ONLY, TABLE_SENTENCE)
LENGTH_BUCKETS = ("1", "2", ">2")


class MetricLawError(AssertionError):
    """Execution accuracy fell below program accuracy."""


@dataclass
class Breakdown:
    n: int = 0
    ea_hits: int = 0
    pa_hits: int = 0

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "ea": self.ea_hits / self.n if self.n else 0.0,
            "pa": self.pa_hits / self.n if self.n else 0.0,
        }


@dataclass
class EvalReport:
    n: int = 0
    ea: float = 0.0
    pa: float = 0.0
    recall: float | None = None
    k: int = 0
    recall_excluded: int = 0
    by_type: dict[str, Breakdown] = field(default_factory=lambda: {t: Breakdown() for t in QUESTION_TYPES})
    by_length: dict[str, Breakdown] = field(default_factory=lambda: {b: Breakdown() for b in LENGTH_BUCKETS})
    errors: dict[str, int] = field(default_factory=lambda: {"retrieval_miss": 0, "execution_error": 0, "incomplete_decode": 0})
    execution_error_codes: dict[str, int] = field(default_factory=dict)

    def check(self) -> None:
        if self.ea + 1e-12 < self.pa:
            raise MetricLawError(f"execution accuracy {self.ea:.6f} below program accuracy {self.pa:.6f}")
        for name, parts in (("question type", self.by_type), ("length", self.by_length)):
            if sum(b.n for b in parts.values()) != self.n:
                raise AssertionError(f"{name} breakdown does not cover all {self.n} examples")
            for key, b in parts.items():
                if b.ea_hits < b.pa_hits:
                    raise MetricLawError(f"{name} {key}: EA hits {b.ea_hits} < PA hits {b.pa_hits}")

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "ea": self.ea,
            "pa": self.pa,
            f"recall@{self.k}": self.recall,
            "recall_excluded": self.recall_excluded,
            "by_question_type": {k: v.to_dict() for k, v in self.by_type.items()},
            "by_length": {k: v.to_dict() for k, v in self.by_length.items()},
            "errors": dict(self.errors),
            "execution_error_codes": dict(sorted(self.execution_error_codes.items())),
        }

    def breakdown_rows(self) -> list[list]:
        rows = [["group", "category", "n", "ea", "pa"]]
        for group, parts in (("question_type", self.by_type), ("length", self.by_length)):
            for key, b in parts.items():
                d = b.to_dict()
                rows.append([group, key, d["n"], f"{d['ea']:.6f}", f"{d['pa']:.6f}"])
        rows.append(["all", "all", self.n, f"{self.ea:.6f}", f"{self.pa:.6f}"])
        return rows


def run_prediction(pred: Program, table) -> tuple[object | None, str | None]:
    """Executed answer or the execution error code."""
    try:
        return execute(pred, table), None
    except ExecutionError as exc:
        return None, exc.code


def score_predictions(
    examples: Sequence[Example],
    programs: Sequence[Program],
    complete: Sequence[bool] | None = None,
    ranked: dict[str, RankedPool] | None = None,
    k: int = 0,
) -> EvalReport:
    """Aggregate EA/PA and breakdowns; asserts EA >= PA before returning."""
    rep = EvalReport(k=k)
    ea_hits = pa_hits = 0
    recalls = []
    complete = complete if complete is not None else [True] * len(programs)
    for ex, pred, done in zip(examples, programs, complete):
        answer, code = run_prediction(pred, ex.table)
        ea_ok = code is None and answers_equal(answer, ex.answer)
        pa_ok = program_equal(pred, ex.program)
        if code is not None:
            rep.errors["execution_error"] += 1
            rep.execution_error_codes[code] = rep.execution_error_codes.get(code, 0) + 1
        if not done:
            rep.errors["incomplete_decode"] += 1
        if ranked is not None and k:
            pos, _ = gold_retrieval_labels(ex)
            if not pos:
                rep.recall_excluded += 1
            else:
                r = recall_at_k(ranked[ex.id], pos, k)
                recalls.append(r)
                if r < 1.0:
                    rep.errors["retrieval_miss"] += 1
        ea_hits += ea_ok
        pa_hits += pa_ok
        for part in (rep.by_type[question_type(ex)], rep.by_length[length_bucket(len(ex.program.steps))]):
            part.n += 1
            part.ea_hits += ea_ok
            part.pa_hits += pa_ok
    rep.n = len(programs)
    rep.ea = ea_hits / rep.n if rep.n else 0.0
    rep.pa = pa_hits / rep.n if rep.n else 0.0
    rep.recall = float(np.mean(recalls)) if recalls else None
    rep.check()
    return rep


def prediction_records(examples: Sequence[Example], results: Sequence[DecodeResult]) -> list[dict]:
    out = []
    for ex, res in zip(examples, results):
        answer, code = run_prediction(res.program, ex.table)
        out.append({
            "id": ex.id,
            "program": serialize_program(res.program),
            "answer": answer,
            "error": code,
            "complete": res.complete,
            "rerank_probs": res.rerank_probs,
        })
    return out


def evaluate(
    model: Generator,
    retriever: LateInteractionRetriever | None,
    dataset: Sequence[Example],
    config: RunConfig,
    ranked: dict[str, RankedPool] | None = None,
) -> tuple[EvalReport, list[dict]]:
    """Retrieve (unless ``ranked`` is given), decode greedily and score every usable example.

    Examples whose gold program is inconsistent are left out of the report.
    """
    if model is None:
        raise FileNotFoundError("no generator model loaded")
    usable = [ex for ex in dataset if not ex.flag]
    if ranked is None:
        if retriever is None:
            raise FileNotFoundError("no retriever model and no retrieval output")
        ranked = retrieve_all(usable, retriever, config.k) if config.k else {}
    items, skipped = prepare_all(model, usable, ranked, config.k, with_targets=False)
    if skipped:
        raise DataError(f"cannot evaluate {len(skipped)} examples, first: {skipped[0][1]}")
    results = predict(model, items)
    report = score_predictions(usable, [r.program for r in results], [r.complete for r in results], ranked, config.k)
    return report, prediction_records(usable, results)


def dev_metrics(ranked: dict[str, RankedPool], k: int):
    """Per-epoch dev scorer for generator training."""

    def fn(model: Generator, dev: Sequence[Example]) -> dict:
        usable = [ex for ex in dev if not ex.flag]
        items, _ = prepare_all(model, usable, ranked, k, with_targets=False)
        results = predict(model, items)
        rep = score_predictions(usable, [r.program for r in results], [r.complete for r in results])
        return {"ea": rep.ea, "pa": rep.pa}

    return fn


@dataclass
class PipelineResult:
    vocab: Vocab
    retriever: LateInteractionRetriever | None
    generator: Generator
    ranked: dict[str, RankedPool]
    retriever_history: list[dict]
    generator_history: list[dict]
    reports: dict[str, EvalReport]
    predictions: dict[str, list[dict]]


def run_pipeline(
    splits: dict[str, list[Example]],
    config: RunConfig,
    vocab: Vocab | None = None,
    retriever: LateInteractionRetriever | None = None,
    retriever_history: list[dict] | None = None,
    eval_splits: Sequence[str] = ("dev", "test"),
) -> PipelineResult:
    """Train the retriever (unless given), retrieve for every split, train and evaluate the generator."""
    vocab = vocab or build_vocab(splits["train"], num_buckets=config.num_buckets)
    if retriever is None:
        retriever, retriever_history = train_retriever(splits["train"], splits.get("dev", []), vocab, config)
    ranked: dict[str, RankedPool] = {}
    if config.k:
        for name, exs in splits.items():
            ranked.update(retrieve_all([e for e in exs if not e.flag], retriever, config.k))
    generator, gen_history = train_generator(
        splits["train"], splits.get("dev", []), ranked, vocab, config, eval_fn=dev_metrics(ranked, config.k)
    )
    reports, predictions = {}, {}
    for name in eval_splits:
        if splits.get(name):
            reports[name], predictions[name] = evaluate(generator, retriever, splits[name], config, ranked)
            log.info("event=report split=%s ea=%.4f pa=%.4f n=%d", name, reports[name].ea, reports[name].pa, reports[name].n)
    return PipelineResult(vocab, retriever, generator, ranked, retriever_history or [], gen_history, reports, predictions)


ABLATION_VARIANTS = ("full", "no-reranker", "vanilla-retriever")


def variant_config(config: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return config.replace(no_reranker=False, vanilla_retriever=False)
    if variant == "no-reranker":
        return config.replace(no_reranker=True, vanilla_retriever=False)
    if variant == "vanilla-retriever":
        return config.replace(no_reranker=False, vanilla_retriever=True)
    raise ValueError(f"unknown variant {variant!r}")


def run_ablation(
    splits: dict[str, list[Example]],
    config: RunConfig,
    variants: Sequence[str] = ABLATION_VARIANTS,
    eval_split: str = "dev",
) -> dict[str, PipelineResult]:
    """Train each variant on identical data and seeds.

    The late-interaction retriever is trained once and shared by the full
    and no-reranker variants.
    """
    vocab = build_vocab(splits["train"], num_buckets=config.num_buckets)
    shared = None
    out = {}
    for name in variants:
        cfg = variant_config(config, name)
        log.info("event=variant name=%s config_hash=%s", name, cfg.hash())
        if not cfg.vanilla_retriever and shared is not None:
            res = run_pipeline(splits, cfg, vocab, shared.retriever, shared.retriever_history, eval_splits=(eval_split,))
        else:
            res = run_pipeline(splits, cfg, vocab, eval_splits=(eval_split,))
        if not cfg.vanilla_retriever and shared is None:
            shared = res
        out[name] = res
    return out


def ablation_summary(results: dict[str, PipelineResult], split: str = "dev") -> dict:
    full = results["full"].reports[split] if "full" in results else None
    out = {}
    for name, res in results.items():
        rep = res.reports[split]
        row = {"ea": rep.ea, "pa": rep.pa, "recall": rep.recall}
        if full is not None and name != "full":
            row["pa_delta_vs_full"] = rep.pa - full.pa
            row["ea_delta_vs_full"] = rep.ea - full.ea
        out[name] = row
    return out
