import json

import pytest

from tabtextqa.cli import main

TINY = {
    "d_model": 16, "n_layers": 1, "n_heads": 2, "num_buckets": 64, "max_seq_len": 128,
    "retriever_epochs": 1, "generator_epochs": 1, "retriever_lr": 1e-3, "generator_lr": 1e-3,
}


def test_exec_program(capsys):
    assert main(["exec-program", "subtract(1882, 1802)"]) == 0
    assert capsys.readouterr().out.strip() == "80"
    assert main(["exec-program", "subtract(1882, 1802), divide(#0, 1882)"]) == 0
    assert capsys.readouterr().out.strip().startswith("0.0425")


def test_exec_program_with_table(tmp_path, capsys):
    path = tmp_path / "t.json"
    path.write_text(json.dumps([["", "2016", "2015"], ["sales", "1802", "1882"]]))
    assert main(["exec-program", "table_max(sales, none)", "--table", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "1882"


@pytest.mark.parametrize(
    "argv,code",
    [
        (["exec-program", "divide(1, 0)"], 3),
        (["exec-program", "foo(1"], 2),
        (["exec-program", "table_max(sales, none)", "--table", "/nonexistent.json"], 2),
        (["no-such-command"], 1),
        (["gen-data"], 1),
    ],
)
def test_exit_codes(argv, code):
    with pytest.raises(SystemExit) as exc:
        raise SystemExit(main(argv))
    assert exc.value.code == code


def test_bad_config_is_usage_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"not_a_field": 1}))
    assert main(["exec-program", "add(1, 2)", "--config", str(cfg)]) == 1


def test_missing_data_file_is_data_error(tmp_path):
    assert main(["train-retriever", "--train", str(tmp_path / "none.json"), "--out", str(tmp_path / "o")]) == 2


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / name), "--n-train", "20", "--n-dev", "5", "--n-test", "5", "--seed", "3"]) == 0
    for split in ("train", "dev", "test"):
        assert (tmp_path / "a" / f"{split}.json").read_bytes() == (tmp_path / "b" / f"{split}.json").read_bytes()
    assert main(["gen-data", "--out", str(tmp_path / "c"), "--n-train", "20", "--n-dev", "5", "--n-test", "5", "--seed", "4"]) == 0
    assert (tmp_path / "a" / "train.json").read_bytes() != (tmp_path / "c" / "train.json").read_bytes()


@pytest.mark.slow
def test_small_pipeline_end_to_end(tmp_path, capsys):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--n-train", "24", "--n-dev", "6", "--n-test", "6", "--max-steps", "2"]) == 0
    common = ["--config", str(cfg)]
    assert main(["train-retriever", "--train", str(data / "train.json"), "--dev", str(data / "dev.json"),
                 "--test", str(data / "test.json"), "--out", str(tmp_path / "ret"), *common]) == 0
    assert main(["train-generator", "--train", str(data / "train.json"), "--dev", str(data / "dev.json"),
                 "--retrieval", str(tmp_path / "ret" / "retrieval_train.json"), str(tmp_path / "ret" / "retrieval_dev.json"),
                 "--out", str(tmp_path / "gen"), *common]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--data", str(data / "test.json"), "--generator", str(tmp_path / "gen"),
                 "--retriever", str(tmp_path / "ret"), "--out", str(tmp_path / "eval"), *common]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("ea=") and "n=6" in line
    report = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert report["ea"] >= report["pa"]
    for name in ("report_breakdown.csv", "report_predictions.jsonl", "report_breakdown.png"):
        assert (tmp_path / "eval" / name).exists()
