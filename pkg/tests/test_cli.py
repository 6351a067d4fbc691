from __future__ import annotations

import importlib.util
import json

import pytest

from saver.cli import main


@pytest.fixture
def synth_dir(tmp_path):
    out = tmp_path / "synth"
    assert main(["synth", "--n", "4", "--seed", "1", "--out", str(out)]) == 0
    return out


def test_synth_then_run_then_report(synth_dir, tmp_path, capsys):
    run = tmp_path / "run"
    args = ["run", "--dataset", str(synth_dir / "dataset.jsonl"), "--fixture", str(synth_dir / "fixture.jsonl")]
    assert main(args + ["--seed", "1", "--out", str(run)]) == 0
    assert "usr" in capsys.readouterr().out
    assert main(["report", "--run", str(run)]) == 0
    if importlib.util.find_spec("matplotlib") is not None:
        assert main(["plot", "--run", str(run), "--out", str(tmp_path / "u.svg")]) == 0
        assert (tmp_path / "u.svg").exists()


def test_run_with_wrong_seed_misses_fixture(synth_dir, tmp_path, capsys):
    args = ["run", "--dataset", str(synth_dir / "dataset.jsonl"), "--fixture", str(synth_dir / "fixture.jsonl")]
    assert main(args + ["--seed", "2", "--out", str(tmp_path / "r")]) == 1
    assert "tasks failed" in capsys.readouterr().err


def test_run_argument_errors(synth_dir, tmp_path):
    assert main(["run", "--dataset", str(synth_dir / "dataset.jsonl"), "--out", str(tmp_path / "r")]) == 2
    assert main(["run", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "r")]) == 2


def test_http_backend_needs_endpoint(synth_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("SAVER_API_BASE", raising=False)
    args = ["run", "--dataset", str(synth_dir / "dataset.jsonl"), "--backend", "http", "--out", str(tmp_path / "r")]
    assert main(args) == 2


def test_report_detects_tampering(synth_dir, tmp_path):
    run = tmp_path / "run"
    main(["run", "--dataset", str(synth_dir / "dataset.jsonl"), "--fixture", str(synth_dir / "fixture.jsonl"), "--seed", "1", "--out", str(run)])
    rep = json.loads((run / "report.json").read_text())
    rep["faithfulness"]["n_repaired"] += 7
    (run / "report.json").write_text(json.dumps(rep))
    assert main(["report", "--run", str(run)]) == 1


def test_audit_command(tmp_path, book_task, presupposing_trajectory, grounded_trajectory, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"task": book_task.to_dict(), "trajectory": presupposing_trajectory.to_dict()}))
    assert main(["audit", "--trajectory", str(bad), "--repair"]) == 3
    out = json.loads(capsys.readouterr().out)
    assert out["profile"]["Circular_Reasoning"] == 1
    assert out["repair"]["converged"] is True
    good = tmp_path / "good.json"
    good.write_text(json.dumps(grounded_trajectory.to_dict()))
    task = tmp_path / "task.yaml"
    task.write_text(json.dumps(book_task.to_dict()))
    assert main(["audit", "--trajectory", str(good), "--task", str(task)]) == 0


def test_inject_command(tmp_path, capsys):
    spec = tmp_path / "spec.yaml"
    spec.write_text(
        "specs:\n" + "".join(f"  - inject: [{{type: {t}}}]\n" for t in (
            "Missing_Assumption", "Invalid_Precondition", "Unjustified_Inference",
            "Circular_Reasoning", "Contradiction", "Overgeneralization",
        ))
    )
    corpus = tmp_path / "corpus.jsonl"
    assert main(["inject", "--spec", str(spec), "--n", "24", "--out", str(corpus), "--evaluate"]) == 0
    text = capsys.readouterr().out
    assert "clean\t12" in text and "usr_repair" in text
    assert len(corpus.read_text().splitlines()) == 24


def test_convert_command(tmp_path):
    raw = tmp_path / "raw.json"
    raw.write_text(json.dumps([{"_id": "h", "question": "q?", "answer": "a", "context": [["T", ["S."]]]}]))
    out = tmp_path / "out.jsonl"
    assert main(["convert", "--benchmark", "hotpotqa", str(raw), str(out)]) == 0
    assert json.loads(out.read_text())["id"] == "h"


def test_bad_config_exits_2(tmp_path, synth_dir):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("K: 0\n")
    assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
