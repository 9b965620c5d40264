from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml

from oracles import dense_ppr, dense_transition
from tabgr.cli import EXIT_CONFIG, EXIT_INPUT, EXIT_LLM, EXIT_OK, main

DATA = Path(__file__).parent / "data"
KESH = "What is the population of Kesh?"


@pytest.fixture
def in_data(monkeypatch):
    monkeypatch.chdir(DATA)


def _eval(out, *extra):
    return main(["eval", "--dataset", "questions.jsonl", "--tables", "tables.jsonl",
                 "--mock-script", "mock_script.yaml", "--out", str(out), *extra])


def test_build_graph_tiny(in_data, capsys, tmp_path):
    assert main(["build-graph", "tables.jsonl", "--table-id", "tiny",
                 "--export-triples", str(tmp_path / "t.json"), "--export-edges", str(tmp_path / "e.txt")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "nodes=7" in out and "triples=4" in out and "build_ms=" in out
    assert len(json.loads((tmp_path / "t.json").read_text())) == 4
    assert len((tmp_path / "e.txt").read_text().splitlines()) == 6


def test_build_graph_large_is_fast(tmp_path, capsys):
    rows = [[f"r{i}c{j}" for j in range(20)] for i in range(100)]
    (tmp_path / "big.jsonl").write_text(json.dumps({"id": "b", "header": [f"h{j}" for j in range(20)], "rows": rows}))
    reported = []
    # best of three reports, so one scheduler or GC pause does not decide the check
    for _ in range(3):
        assert main(["build-graph", str(tmp_path / "big.jsonl")]) == EXIT_OK
        reported.append(float(capsys.readouterr().out.split("build_ms=")[1]))
    assert min(reported) < 50


def test_build_graph_malformed(tmp_path, capsys):
    (tmp_path / "bad.jsonl").write_text('{"id": "x", "rows": []}\n')
    assert main(["build-graph", str(tmp_path / "bad.jsonl")]) == EXIT_INPUT
    assert "header" in capsys.readouterr().err


def test_score_golden(in_data, capsys):
    assert main(["score", "--tables", "tables.jsonl", "--table-id", "cities", "--question", KESH,
                 "--mock-script", "mock_script.yaml"]) == EXIT_OK
    assert capsys.readouterr().out == (DATA / "golden_score_cities.txt").read_text(encoding="utf-8")


def test_score_golden_matches_dense_oracle():
    # key columns City, Population (LLM) and value Kesh (exact match, df=1 of 6 rows)
    rows = [json.loads(l) for l in (DATA / "tables.jsonl").read_text().splitlines()]
    table = next(r for r in rows if r["id"] == "cities")
    headers = table["header"]
    raw = []
    for i, row in enumerate(table["rows"]):
        for j, v in enumerate(row):
            score = 1.0 if headers[j] in ("City", "Population") else 0.0
            if v == "Kesh":
                score += 2.0 * math.log(1 + 6 / 2)
            raw.append(score)
    p0 = np.array(raw) / sum(raw)
    s, _ = dense_ppr(p0, dense_transition(6, 4, 0.6, 0.4), 0.35, 20)
    listed = {}
    for line in (DATA / "golden_score_cities.txt").read_text(encoding="utf-8").splitlines():
        _, score, triple = line.split("\t")
        listed[triple] = float(score)
    for i, row in enumerate(table["rows"]):
        for j, v in enumerate(row):
            assert listed[f"(row{i + 1}; {headers[j]}; {v})"] == pytest.approx(s[i * 4 + j], abs=1e-9)


def test_score_no_llm_and_order_sensitive(in_data, capsys):
    assert main(["score", "--tables", "tables.jsonl", "--table-id", "tour", "--no-llm",
                 "--question", "Who was the last rider in the classification?"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert [l.split("\t")[2] for l in lines[:2]] == ["(row1; Rank; 1)", "(row1; Rider; Ana Ruiz)"]
    assert len(lines) == 20


def test_score_llm_failure_exit(tmp_path, in_data):
    script = tmp_path / "s.yaml"
    script.write_text(yaml.safe_dump({"rules": [{"pattern": "zzz", "response": "x"}]}))
    # column selection is unavailable: full mode degrades to exact matches, so this still succeeds
    assert main(["score", "--tables", "tables.jsonl", "--question", KESH, "--mock-script", str(script)]) == EXIT_OK
    assert main(["answer", "--tables", "tables.jsonl", "--question", KESH, "--mock-script", str(script)]) == EXIT_LLM


def test_answer_figure6(in_data, capsys):
    assert main(["answer", "--tables", "tables.jsonl", "--table-id", "kit", "--mock-script", "mock_script.yaml",
                 "--question", "During what time period was there no shirt sponsors?"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["answer"] == "1982–1985"
    assert record["path"] == ["(row2; Shirt Sponsor; )", "(row2; Year; 1982–1985)"]
    assert record["grounded_fraction"] == 1.0 and "trace" not in record


def test_answer_parse_failure_is_data(in_data, capsys):
    assert main(["answer", "--tables", "tables.jsonl", "--table-id", "cities", "--mock-script", "mock_script.yaml",
                 "--question", "How many cities are in Norland?"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["parse_status"] == "failed"


def test_answer_decomposed_has_trace(in_data, capsys):
    assert main(["answer", "--tables", "tables.jsonl", "--table-id", "kit", "--mock-script", "mock_script.yaml",
                 "--mode", "decomposed",
                 "--question", "During what time period was there no shirt sponsors?"]) == EXIT_OK
    record = json.loads(capsys.readouterr().out)
    assert record["trace"]["sufficiency"] == "sufficient"
    assert record["answer"] == "1982–1985"


def test_eval_golden_and_config_copy(in_data, tmp_path):
    assert _eval(tmp_path / "run") == EXIT_OK
    summary = (tmp_path / "run" / "summary.json").read_bytes()
    assert summary == (DATA / "golden_summary.json").read_bytes()
    config = yaml.safe_load((tmp_path / "run" / "config.yaml").read_text())
    assert config["mock_script"] == "mock_script.yaml" and config["out"] == str(tmp_path / "run")
    assert (tmp_path / "run" / "timings.json").exists()
    assert len((tmp_path / "run" / "records.jsonl").read_text().splitlines()) == 20


def test_eval_config_file_and_overrides(in_data, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": "questions.jsonl", "tables": "tables.jsonl", "alpha": 0.2,
                                   "mock_script": "mock_script.yaml", "w_row": 0.5}))
    assert main(["eval", "--config", str(cfg), "--alpha", "0.3", "--out", str(tmp_path / "o")]) == EXIT_OK
    snap = json.loads((tmp_path / "o" / "summary.json").read_text())["config"]
    assert (snap["alpha"], snap["w_row"], snap["w_col"]) == (0.3, 0.5, 0.5)


def test_eval_resume_no_duplicates(in_data, tmp_path):
    out = tmp_path / "run"
    assert _eval(out) == EXIT_OK
    records = out / "records.jsonl"
    lines = records.read_text(encoding="utf-8").splitlines(keepends=True)
    # simulate a run killed mid-write: seven complete records and a torn eighth
    records.write_text("".join(lines[:7]) + lines[7][:25], encoding="utf-8")
    (out / "summary.json").unlink()
    assert _eval(out, "--resume") == EXIT_OK
    ids = [json.loads(l)["id"] for l in records.read_text(encoding="utf-8").splitlines()]
    assert sorted(ids) == sorted(set(ids)) and len(ids) == 20
    assert (out / "summary.json").read_bytes() == (DATA / "golden_summary.json").read_bytes()


def test_shuffle_eval_two_seeds(in_data, tmp_path, capsys):
    assert main(["shuffle-eval", "--dataset", "questions.jsonl", "--tables", "tables.jsonl",
                 "--mock-script", "mock_script.yaml", "--out", str(tmp_path / "s"), "--seeds", "1", "2"]) == EXIT_OK
    perm = json.loads((tmp_path / "s" / "summary.json").read_text())["permutation"]
    for mode in ("row", "row_col"):
        per = perm["modes"][mode]["per_seed"]
        assert len(per) == 2
        assert perm["modes"][mode]["mean_delta"] == pytest.approx((per[0]["delta"] + per[1]["delta"]) / 2)


@pytest.mark.parametrize("args", [
    ["eval", "--dataset", "questions.jsonl", "--tables", "tables.jsonl", "--out", "x"],
    ["eval", "--dataset", "questions.jsonl", "--tables", "tables.jsonl", "--out", "x",
     "--mock-script", "mock_script.yaml", "--llm-base-url", "http://h", "--llm-model", "m"],
    ["score", "--tables", "tables.jsonl", "--question", "q", "--no-llm", "--mode", "decomposed"],
    ["score", "--tables", "tables.jsonl", "--question", "q", "--no-llm", "--alpha", "1.5"],
])
def test_config_errors(in_data, args):
    assert main(args) == EXIT_CONFIG


def test_unknown_config_key(tmp_path, in_data):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("bogus: 1\n")
    assert main(["score", "--config", str(cfg), "--tables", "tables.jsonl", "--question", "q", "--no-llm"]) == EXIT_CONFIG


def test_missing_table_is_input_error(in_data):
    assert main(["score", "--tables", "tables.jsonl", "--table-id", "nope", "--question", "q", "--no-llm"]) == EXIT_INPUT
