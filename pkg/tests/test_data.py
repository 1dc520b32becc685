import json

import pytest

from tabtextqa.data import (
    DataError,
    SynthSpec,
    gold_retrieval_labels,
    load_dataset,
    mentions,
    question_type,
    save_dataset,
    synthesize_dataset,
    usable,
)
from tabtextqa.dslprog import execute, parse_program

SPLITS = synthesize_dataset(SynthSpec(n_train=120, n_dev=30, n_test=30, seed=4))

FIG1_RECORD = {
    "id": "fig1",
    "pre_text": ["the company operates in two segments ."],
    "post_text": ["sales in 2016 reflect the divestiture of a product line ."],
    "table": [["", "2016", "2015", "2014"], ["third-party sales", "$ 1802", "$ 1882", "$ 1910"]],
    "qa": {
        "question": "what was the percentage change in third-party sales from 2015 to 2016?",
        "program": "subtract(1802, 1882), divide(#0, 1882)",
        "exe_ans": -0.04251,
        "gold_inds": [],
    },
}


def write(tmp_path, records):
    path = tmp_path / "d.json"
    path.write_text(json.dumps(records), encoding="utf-8")
    return path


def test_empty_file(tmp_path):
    assert load_dataset(write(tmp_path, [])) == []


def test_fig1_record(tmp_path):
    (ex,) = load_dataset(write(tmp_path, [FIG1_RECORD]))
    assert ex.flag is None
    row = ex.pool[-1]
    assert row.is_row and "1802" in row.text and "1882" in row.text
    pos, neg = gold_retrieval_labels(ex)
    assert pos == [row.id]
    assert sorted(pos + neg) == [c.id for c in ex.pool]
    assert question_type(ex) == "table-only"


def test_inconsistent_record_flagged(tmp_path):
    rec = json.loads(json.dumps(FIG1_RECORD))
    rec["qa"]["program"] = "divide(1802, 0)"
    (ex,) = load_dataset(write(tmp_path, [rec]))
    assert ex.flag and "division_by_zero" in ex.flag
    assert usable([ex]) == []


def test_malformed_record_names_index(tmp_path):
    with pytest.raises(DataError, match="record 1"):
        load_dataset(write(tmp_path, [FIG1_RECORD, {"id": "x"}]))


def test_constant_only_program_uses_explicit_indices():
    ex = synthesize_dataset(SynthSpec(n_train=1, n_dev=1, n_test=1, seed=0))["train"][0]
    ex.program_text = "add(const_1, const_2)"
    ex.__dict__.pop("program", None)
    ex.gold_inds = []
    assert gold_retrieval_labels(ex)[0] == []
    ex.gold_inds = [1]
    assert gold_retrieval_labels(ex)[0] == [1]


def test_synthetic_examples_are_self_consistent():
    for split in SPLITS.values():
        for ex in split:
            assert execute(ex.program, ex.table) == ex.answer
            for arg in ex.program.numeric_args():
                assert any(mentions(c, arg) for c in ex.pool) or arg.text in ex.question


def test_no_question_leaks_across_splits():
    seen = [set(e.question for e in SPLITS[s]) for s in ("train", "dev", "test")]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])


def test_same_seed_gives_identical_files(tmp_path):
    again = synthesize_dataset(SynthSpec(n_train=120, n_dev=30, n_test=30, seed=4))
    save_dataset(SPLITS["train"], tmp_path / "a.json")
    save_dataset(again["train"], tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    reloaded = load_dataset(tmp_path / "a.json")
    assert [e.program_text for e in reloaded] == [e.program_text for e in SPLITS["train"]]
    assert all(e.flag is None for e in reloaded)


def test_length_one_subtract_and_percent_change_shapes():
    steps = {}
    for ex in SPLITS["train"]:
        steps.setdefault(tuple(op for op, _, _ in ex.program.steps), ex)
    sub = steps[("subtract",)]
    (_, a, b), = sub.program.steps
    assert sub.answer == a.value - b.value
    pct = steps[("subtract", "divide")]
    (_, x, y), (_, m, base) = pct.program.steps
    assert m.text == "#0" and base.value == y.value


def test_distractor_heavy_spec():
    spec = SynthSpec.distractor_heavy(n_train=20, n_dev=5, n_test=5)
    splits = synthesize_dataset(spec)
    assert all(len(ex.program) <= 2 for ex in splits["train"])
    with pytest.raises(ValueError):
        SynthSpec(length_probs=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        SynthSpec(n_train=0)


def test_program_text_parses_back():
    for ex in SPLITS["dev"]:
        assert parse_program(ex.program_text) == ex.program
