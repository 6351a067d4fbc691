from __future__ import annotations

import json

import numpy as np
import pytest

from saver.backend import MockBackend
from saver.config import SaverConfig
from saver.eval.injection import build_injection_corpus, default_specs
from saver.eval.pipeline import evaluate_corpus, run_pipeline, vanilla_belief
from saver.eval.reports import format_table, plot_usr, read_jsonl, recompute, usr_curves
from saver.eval.synthetic import build_fixture
from saver.trajectory import Task

FILES = ("run_records.jsonl", "audit_log.jsonl", "memory.jsonl", "report.json", "report.csv")


@pytest.fixture(scope="module")
def synth():
    return build_fixture(6, seed=0)


def _run(synth, tmp_path, name, mode="saver", **kw):
    tasks, fx = synth
    out = tmp_path / name
    return run_pipeline(tasks, SaverConfig(), MockBackend(fx), mode, 0, out_dir=out, **kw), out


def test_saver_run_writes_all_logs(synth, tmp_path):
    res, out = _run(synth, tmp_path, "a", dump_selection=True)
    assert res.ok and res.n_failed == 0
    for name in FILES + ("selection.jsonl",):
        assert (out / name).exists(), name
    records = read_jsonl(out / "run_records.jsonl")
    assert [r["task_id"] for r in records] == [t.id for t in synth[0]]
    for r in records:
        assert len(r["candidates"]) == 4
        assert len(r["selected"]) == 2 and set(r["selected"]) <= set(r["kept"])
        assert r["committed"]["index"] in r["selected"]
        assert 0 <= r["f1"] <= 1
    finals = [a for a in read_jsonl(out / "audit_log.jsonl") if a["round"] == "final"]
    assert len(finals) == 2 * len(records)
    assert len(read_jsonl(out / "memory.jsonl")) == len(records)
    sel = read_jsonl(out / "selection.jsonl")[0]
    assert abs(sum(p for _, p in sel["subset_probabilities"]) - 1) < 1e-9
    assert recompute(out)["faithfulness"] == res.report["faithfulness"]
    assert "usr" in format_table(res.report)


def test_runs_are_byte_identical(synth, tmp_path):
    _, a = _run(synth, tmp_path, "a")
    _, b = _run(synth, tmp_path, "b")
    tasks, fx = synth
    run_pipeline(tasks, SaverConfig(), MockBackend(fx), "saver", 0, parallel=3, out_dir=tmp_path / "c")
    for name in FILES:
        assert (a / name).read_bytes() == (b / name).read_bytes() == (tmp_path / "c" / name).read_bytes(), name


def test_vanilla_mode_is_always_flagged(synth, tmp_path):
    res, out = _run(synth, tmp_path, "v", mode="vanilla")
    assert res.ok
    for r in read_jsonl(out / "run_records.jsonl"):
        assert r["final"] == {"L": 1, "violations": 1, "flagged": 1, "repair_rounds": 0, "u_rate": 1.0}
    assert res.report["faithfulness"]["usr"] == 1.0
    assert vanilla_belief("").claim == "(no answer)"


def test_cot_mode(synth, tmp_path):
    res, out = _run(synth, tmp_path, "c", mode="cot")
    assert res.ok
    assert all(r["final"]["repair_rounds"] == 0 for r in read_jsonl(out / "run_records.jsonl"))
    assert not (out / "memory.jsonl").read_text()


def test_failure_budget(synth):
    tasks, fx = synth
    ghost = Task("ghost", "Unscripted question?")
    res = run_pipeline(tasks[:2] + [ghost], SaverConfig(), MockBackend(fx), "saver", 0)
    assert res.n_failed == 1 and not res.ok
    assert res.report["failed"][0]["task_id"] == "ghost"
    big, bigfx = build_fixture(20, seed=0)
    res = run_pipeline(big + [ghost], SaverConfig(), MockBackend(bigfx), "vanilla", 0)
    assert res.n_failed == 1 and res.ok


def test_bad_arguments(synth):
    tasks, fx = synth
    with pytest.raises(ValueError):
        run_pipeline(tasks, SaverConfig(), MockBackend(fx), "sampling")
    with pytest.raises(ValueError):
        run_pipeline(tasks, SaverConfig(), MockBackend(fx), parallel=0)


def test_usr_plot(synth, tmp_path):
    pytest.importorskip("matplotlib")
    _, out = _run(synth, tmp_path, "p")
    curves = usr_curves(out / "audit_log.jsonl")
    assert curves and all(all(a >= b for a, b in zip(c, c[1:])) for c in curves.values())
    svg = tmp_path / "usr.svg"
    assert plot_usr(out / "audit_log.jsonl", svg) == len(curves)
    assert svg.read_text().lstrip().startswith("<?xml")


def test_corpus_evaluation_small():
    cases = build_injection_corpus(default_specs(), 48, np.random.default_rng(5))
    with_repair, traces = evaluate_corpus(cases, repair=True)
    without, _ = evaluate_corpus(cases, repair=False)
    assert set(with_repair) == set(without) == {s.name for s in default_specs()} | {"clean"}
    for name in with_repair:
        assert with_repair[name].usr <= without[name].usr
    assert without["clean"].avg_viol == 0.0
    assert all(t.identical for t in traces if t.slice == "clean")
    assert json.dumps(with_repair["clean"].to_dict())
