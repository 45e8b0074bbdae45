import csv
import hashlib
import json
import xml.etree.ElementTree as ET
from pathlib import Path

import pytest

from hijacklab.cli import main

TINY = """
[flow]
embed_dim = 8
hidden_width = 16
tau_fourier_frequencies = 2
ode_steps = 3

[train]
steps = 20
attack_steps = 10
batch_size = 8
jitter_copies = 0
demos_per_task = 2

[poison]
rate = 0.5
"""


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """A tiny end-to-end pipeline shared by the tests below."""
    d = tmp_path_factory.mktemp("run")
    cfg = d / "tiny.toml"
    cfg.write_text(TINY)
    c = ["--config", str(cfg)]

    def go(*argv):
        rc = main([*argv, *c])
        assert rc == 0, argv
        return rc

    go("gen-data", "--seed", "7", "--out", str(d / "data.jsonl"))
    go("train-clean", "--data", str(d / "data.jsonl"), "--out", str(d / "clean.fhck"))
    go("train-attack", "--attack", "pl", "--trigger", "patch", "--data", str(d / "data.jsonl"),
       "--clean", str(d / "clean.fhck"), "--out", str(d / "pl.fhck"))
    go("eval", "--model", str(d / "pl.fhck"), "--trigger", "patch", "--episodes", "2",
       "--reference", str(d / "clean.fhck"), "--clean-model", str(d / "clean.fhck"),
       "--data", str(d / "data.jsonl"), "--probes", "60", "--out", str(d / "pl_eval.csv"))
    go("sweep", "--model", str(d / "pl.fhck"), "--trigger", "patch", "--axis", "size",
       "--values", "0.01,0.5,1,2", "--episodes", "5", "--out", str(d / "sweep.csv"))
    go("defend", "--model", str(d / "pl.fhck"), "--trigger", "patch", "--data", str(d / "data.jsonl"),
       "--checkpoints", "2,4", "--episodes", "1", "--out", str(d / "defense.csv"))
    return d, c


def test_gen_data_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-data", "--seed", "7", "--demos", "2", "--out", str(a)]) == 0
    assert main(["gen-data", "--seed", "7", "--demos", "2", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert len(a.read_text().splitlines()) == 10


def test_seed_env_fallback(tmp_path, monkeypatch):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    monkeypatch.setenv("FLOWHIJACK_SEED", "7")
    main(["gen-data", "--demos", "1", "--out", str(a)])
    monkeypatch.delenv("FLOWHIJACK_SEED")
    main(["gen-data", "--demos", "1", "--seed", "7", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert json.loads((tmp_path / "a.manifest.json").read_text())["seeds"]["seed"] == 7


def test_attack_artifacts(run):
    d, _ = run
    for name in ("pl.fhck", "pl.fhck.json", "pl.loss.csv", "pl.manifest.json"):
        assert (d / name).is_file(), name
    rows = _rows(d / "pl.loss.csv")
    assert rows[0] == ["step", "l_fm", "l_bd", "l_mimic", "total", "lr"]
    assert len(rows) == 1 + 10


def test_eval_metrics_schema(run):
    d, _ = run
    rows = _rows(d / "pl_eval.csv")
    assert rows[0] == ["condition", "sr", "asr", "n"]
    assert len(rows) == 3
    assert rows[1][0].endswith(":untriggered") and rows[1][2] == "NA" and rows[1][3] == "10"
    assert rows[2][0].endswith(":triggered:patch") and rows[2][1] == "NA"
    summary = json.loads((d / "pl_eval.summary.json").read_text())
    assert 0.0 <= summary["bhattacharyya"] <= 1.0
    assert "anomaly" in summary
    assert len(_rows(d / "pl_eval.projection.csv")) == 1 + 120


def test_manifest_lists_outputs_and_inputs(run):
    d, _ = run
    m = json.loads((d / "pl_eval.manifest.json").read_text())
    assert m["command"] == "eval"
    for out in m["outputs"]:
        assert Path(out).is_file(), out
    assert str(d / "pl.fhck") in m["inputs"]
    assert m["inputs"][str(d / "pl.fhck")] == _digest(d / "pl.fhck")
    assert m["config"]["flow"]["hidden_width"] == 16
    for key in ("seeds", "version", "wall_clock_seconds"):
        assert key in m


def test_inputs_not_mutated(run):
    d, c = run
    before = {p: _digest(p) for p in (d / "data.jsonl", d / "clean.fhck")}
    assert main(["train-attack", "--attack", "ip", "--trigger", "state", "--drop", "mimic", "--data",
                 str(d / "data.jsonl"), "--clean", str(d / "clean.fhck"), "--out", str(d / "ip.fhck"), *c]) == 0
    assert {p: _digest(p) for p in before} == before
    meta = json.loads((d / "ip.fhck.json").read_text())["meta"]
    assert meta["drops"] == ["mimic"]


@pytest.mark.parametrize("manifest,outputs", [
    ("clean.manifest.json", ["clean.fhck", "clean.loss.csv"]),
    ("pl_eval.manifest.json", ["pl_eval.csv", "pl_eval.speed.csv", "pl_eval.projection.csv"]),
    ("sweep.manifest.json", ["sweep.csv"]),
    ("defense.manifest.json", ["defense.csv", "defense.finetune.csv"]),
])
def test_rerun_reproduces_bytes(run, manifest, outputs):
    d, _ = run
    before = {o: (d / o).read_bytes() for o in outputs}
    assert main(["rerun", str(d / manifest)]) == 0
    for o in outputs:
        assert (d / o).read_bytes() == before[o], o


def test_rerun_detects_changed_input(run, tmp_path):
    d, c = run
    data = tmp_path / "data.jsonl"
    data.write_bytes((d / "data.jsonl").read_bytes())
    out = tmp_path / "m.fhck"
    assert main(["train-clean", "--data", str(data), "--steps", "2", "--out", str(out), *c]) == 0
    data.write_text(data.read_text() + "\n")
    assert main(["rerun", str(tmp_path / "m.manifest.json")]) == 1


def test_sweep_rows(run):
    d, _ = run
    rows = _rows(d / "sweep.csv")
    assert rows[0] == ["axis", "value", "sr", "asr"]
    assert [r[1] for r in rows[1:]] == ["0.01", "0.5", "1.0", "2.0"]


def test_defense_tables(run):
    d, _ = run
    rows = _rows(d / "defense.csv")
    assert [r[0] for r in rows[1:]] == ["0.5", "0.25", "0.05"]
    ft = _rows(d / "defense.finetune.csv")
    assert [r[0] for r in ft[1:]] == ["0", "2", "4"]


def test_report_full(run, tmp_path):
    d, _ = run
    out = tmp_path / "rep"
    assert main(["report", "--run-dir", str(d), "--out-dir", str(out)]) == 0
    summary = (out / "summary.md").read_text()
    for heading in ("Attack efficacy", "Trigger robustness", "Velocity profiles", "Projection overlap",
                    "Endpoint filter", "Clean fine-tuning"):
        assert heading in summary
    svgs = list(out.glob("*.svg"))
    assert len(svgs) >= 5
    for s in svgs:
        assert ET.parse(s).getroot().tag.endswith("svg")
    m = json.loads((out / "report.manifest.json").read_text())
    n_metrics = sum(len(_rows(p)) - 1 for p in d.glob("*.csv") if _rows(p)[0] == ["condition", "sr", "asr", "n"])
    assert m["row_counts"]["metrics"] == n_metrics
    assert m["row_counts"]["sweep"] == len(_rows(d / "sweep.csv")) - 1
    assert m["row_counts"]["filter"] == len(_rows(d / "defense.csv")) - 1
    table = [l for l in summary.split("## Attack efficacy")[1].split("##")[0].splitlines() if l.startswith("| ")]
    assert len(table) - 1 == n_metrics


def test_report_partial_inputs(run, tmp_path):
    d, _ = run
    only = tmp_path / "evals"
    only.mkdir()
    (only / "pl_eval.csv").write_bytes((d / "pl_eval.csv").read_bytes())
    assert main(["report", "--run-dir", str(only)]) == 0
    summary = (only / "summary.md").read_text()
    assert "Attack efficacy" in summary
    assert "endpoint-filter table skipped" in summary
    assert "fine-tuning table skipped" in summary


def test_report_no_inputs(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path)]) == 1
    assert "metrics" in capsys.readouterr().err


@pytest.mark.parametrize("argv,code", [
    (["eval", "--model", "missing.fhck", "--out", "x.csv"], 1),
    (["gen-data", "--out", "x.jsonl", "--bogus"], 1),
    (["train-attack", "--attack", "xx", "--trigger", "patch", "--data", "d", "--clean", "c", "--out", "o"], 1),
    (["frobnicate"], 1),
    (["gen-data", "--out", "x.jsonl", "--demos", "0"], 1),
    (["--version"], 0),
])
def test_exit_codes(tmp_path, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[weights]\ngamma = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == 1
    assert "weights.gamma" in capsys.readouterr().err


def test_corrupt_checkpoint_exit_2(tmp_path):
    ck = tmp_path / "bad.fhck"
    ck.write_bytes(b"garbage")
    assert main(["eval", "--model", str(ck), "--out", str(tmp_path / "e.csv")]) == 2


def test_sweep_axis_mismatch_is_usage_error(run):
    d, c = run
    assert main(["sweep", "--model", str(d / "pl.fhck"), "--trigger", "patch", "--axis", "state",
                 "--values", "0", "--out", str(d / "bad_sweep.csv"), *c]) == 1
