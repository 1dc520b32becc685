"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
Log lines are ``event=<name> key=value ...`` on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import tensor as T
from .config import RunConfig
from .data import DataError, SynthSpec, load_dataset, save_dataset, synthesize_dataset
from .dslprog import ExecutionError, ProgramParseError, execute, parse_program
from .linearize import Table
from .textenc import render_number

log = logging.getLogger("tabtextqa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- output helpers ------------------------------------------------------------------
def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return path


def write_jsonl(path, records) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from None


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        try:
            cfg = RunConfig.load(args.config)
        except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
            raise UsageError(f"bad config {args.config}: {exc}") from None
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    for flag in ("k", "no_reranker", "vanilla_retriever"):
        val = getattr(args, flag, None)
        if val not in (None, False):
            cfg = cfg.replace(**{flag: val})
    return cfg


def _load_split(path) -> list:
    if path is None:
        return []
    return load_dataset(path)


def _ranked_from_files(paths) -> dict:
    from .retriever import ranked_from_records

    ranked = {}
    for p in paths or []:
        ranked.update(ranked_from_records(read_json(p)))
    return ranked


# -- commands ------------------------------------------------------------------------
def cmd_gen_data(args, cfg: RunConfig) -> int:
    kw = {"seed": cfg.seed}
    for name in ("n_train", "n_dev", "n_test"):
        if getattr(args, name) is not None:
            kw[name] = getattr(args, name)
    if args.max_steps is not None:
        kw["length_probs"] = {1: (1.0, 0.0, 0.0), 2: (0.5, 0.5, 0.0)}.get(args.max_steps, SynthSpec().length_probs)
    spec = SynthSpec.distractor_heavy(**kw) if args.distractor_heavy else SynthSpec(**kw)
    splits = synthesize_dataset(spec)
    out = Path(args.out)
    for name, exs in splits.items():
        save_dataset(exs, out / f"{name}.json")
        log.info("event=wrote split=%s n=%d path=%s", name, len(exs), out / f"{name}.json")
    return EXIT_OK


def cmd_train_retriever(args, cfg: RunConfig) -> int:
    from .plotting import plot_history
    from .retriever import mean_recall, retrieval_records, retrieve_all, save_retriever, train_retriever
    from .textenc import build_vocab

    train, dev = load_dataset(args.train), _load_split(args.dev)
    vocab = build_vocab(train, num_buckets=cfg.num_buckets)
    model, history = train_retriever(train, dev, vocab, cfg)
    out = Path(args.out)
    save_retriever(model, cfg, out)
    write_json(out / "retriever_history.json", history)
    if history:
        plot_history(history, out / "retriever_history.png", f"retriever ({model.kind})")
    summary = {"config_hash": cfg.hash(), "k": cfg.k}
    for name, path in (("train", args.train), ("dev", args.dev), ("test", args.test)):
        if path is None:
            continue
        exs = [e for e in (train if name == "train" else dev if name == "dev" else load_dataset(path)) if not e.flag]
        ranked = retrieve_all(exs, model, cfg.k)
        write_json(out / f"retrieval_{name}.json", retrieval_records(ranked))
        summary[f"{name}_recall@{cfg.k}"] = mean_recall(exs, ranked, cfg.k)
        log.info("event=retrieval split=%s recall@%d=%.4f", name, cfg.k, summary[f"{name}_recall@{cfg.k}"])
    write_json(out / "retriever_summary.json", summary)
    return EXIT_OK


def cmd_train_generator(args, cfg: RunConfig) -> int:
    from .evaluation import dev_metrics
    from .generator import save_generator, train_generator
    from .plotting import plot_history
    from .textenc import Vocab, build_vocab

    train, dev = load_dataset(args.train), _load_split(args.dev)
    ranked = _ranked_from_files(args.retrieval)
    if args.vocab:
        vocab = Vocab.load(args.vocab)
    else:
        vocab = build_vocab(train, num_buckets=cfg.num_buckets)
    model, history = train_generator(train, dev, ranked, vocab, cfg, eval_fn=dev_metrics(ranked, cfg.k))
    out = Path(args.out)
    save_generator(model, cfg, out)
    write_json(out / "generator_history.json", history)
    if history:
        plot_history(history, out / "generator_history.png", "generator")
    return EXIT_OK


def _write_report(out: Path, stem: str, report, predictions, cfg: RunConfig) -> None:
    from .plotting import plot_breakdown

    body = report.to_dict()
    body["config_hash"] = cfg.hash()
    write_json(out / f"{stem}.json", body)
    write_csv(out / f"{stem}_breakdown.csv", report.breakdown_rows())
    write_jsonl(out / f"{stem}_predictions.jsonl", predictions)
    plot_breakdown(body, out / f"{stem}_breakdown.png", f"{stem}: EA {report.ea:.3f} / PA {report.pa:.3f}")


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .evaluation import evaluate
    from .generator import load_generator
    from .retriever import load_retriever

    data = load_dataset(args.data)
    generator = load_generator(args.generator)
    if args.no_reranker_override:
        generator.no_reranker = True
    cfg = cfg.replace(no_reranker=generator.no_reranker)
    ranked = _ranked_from_files(args.retrieval) if args.retrieval else None
    retriever = load_retriever(args.retriever) if ranked is None else None
    report, predictions = evaluate(generator, retriever, data, cfg, ranked)
    _write_report(Path(args.out), "report", report, predictions, cfg)
    print(f"ea={report.ea:.6f} pa={report.pa:.6f} n={report.n}")
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    from .evaluation import ablation_summary, run_ablation
    from .plotting import plot_ablation

    src = Path(args.data_dir)
    splits = {name: load_dataset(src / f"{name}.json") for name in ("train", "dev")}
    results = run_ablation(splits, cfg, eval_split="dev")
    out = Path(args.out)
    summary = ablation_summary(results, "dev")
    for name, res in results.items():
        _write_report(out / name, "report", res.reports["dev"], res.predictions["dev"], cfg.replace(**_flags(res)))
    write_json(out / "ablation.json", {"config_hash": cfg.hash(), "variants": summary})
    rows = [["variant", "ea", "pa", "pa_delta_vs_full", "ea_delta_vs_full"]]
    for name, row in summary.items():
        rows.append([name, f"{row['ea']:.6f}", f"{row['pa']:.6f}", f"{row.get('pa_delta_vs_full', 0.0):.6f}", f"{row.get('ea_delta_vs_full', 0.0):.6f}"])
    write_csv(out / "ablation.csv", rows)
    plot_ablation(summary, out / "ablation.png", "ablation (dev)")
    for row in rows[1:]:
        print(",".join(row))
    return EXIT_OK


def _flags(res) -> dict:
    return {"no_reranker": res.generator.no_reranker, "vanilla_retriever": res.retriever.kind == "vanilla"}


def cmd_exec_program(args, cfg: RunConfig) -> int:
    table = None
    if args.table:
        grid = read_json(args.table)
        if isinstance(grid, dict):
            grid = grid.get("table", grid)
        try:
            table = Table.from_grid(grid)
        except (ValueError, TypeError) as exc:
            raise DataError(f"{args.table}: bad table ({exc})") from None
    answer = execute(parse_program(args.program), table)
    print(render_number(answer) if isinstance(answer, float) else answer)
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    from .gradcheck import TOLERANCE, check_model, check_primitives

    prim = check_primitives(seed=cfg.seed)
    model = {} if args.primitives_only else check_model(seed=cfg.seed)
    worst = max(list(prim.values()) + list(model.values()))
    for name, err in sorted(prim.items()):
        log.info("event=grad_check scope=primitive name=%s max_rel_err=%.3e", name, err)
    for name, err in sorted(model.items()):
        log.info("event=grad_check scope=model param=%s max_rel_err=%.3e", name, err)
    ok = worst < TOLERANCE
    print(f"max_rel_err={worst:.3e} tolerance={TOLERANCE:.0e} {'pass' if ok else 'fail'}")
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-retriever": cmd_train_retriever,
    "train-generator": cmd_train_generator,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "exec-program": cmd_exec_program,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON file with run configuration fields")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    p = _Parser(prog="tabtextqa", description="Retriever-generator question answering over tables and text.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic train/dev/test files")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-dev", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--max-steps", type=int, choices=[1, 2, 3], help="longest program length to draw")
    g.add_argument("--distractor-heavy", action="store_true")

    r = sub.add_parser("train-retriever", parents=[common], help="train the retriever and write retrieval output")
    r.add_argument("--train", required=True)
    r.add_argument("--dev")
    r.add_argument("--test")
    r.add_argument("--out", required=True)
    r.add_argument("--k", type=int)
    r.add_argument("--vanilla-retriever", action="store_true")

    t = sub.add_parser("train-generator", parents=[common], help="train the program generator")
    t.add_argument("--train", required=True)
    t.add_argument("--dev")
    t.add_argument("--retrieval", nargs="+", required=True, help="retrieval output files covering train and dev")
    t.add_argument("--vocab", help="vocabulary file (defaults to one built from --train)")
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=int)
    t.add_argument("--no-reranker", action="store_true")

    e = sub.add_parser("evaluate", parents=[common], help="decode a dataset and write the report")
    e.add_argument("--data", required=True)
    e.add_argument("--generator", required=True, help="directory holding generator.ckpt")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--retriever", help="directory holding retriever.ckpt")
    src.add_argument("--retrieval", nargs="+", help="precomputed retrieval output files")
    e.add_argument("--out", required=True)
    e.add_argument("--k", type=int)
    e.add_argument("--no-reranker", dest="no_reranker_override", action="store_true")

    a = sub.add_parser("ablate", parents=[common], help="train and compare the full model with both ablations")
    a.add_argument("--data-dir", required=True, help="directory with train.json and dev.json")
    a.add_argument("--out", required=True)

    x = sub.add_parser("exec-program", parents=[common], help="execute a program, optionally against a table")
    x.add_argument("program")
    x.add_argument("--table", help="JSON grid (first row = column names) or a record with a 'table' field")

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    c.add_argument("--primitives-only", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ProgramParseError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ExecutionError as exc:
        print(f"execution error [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except T.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
