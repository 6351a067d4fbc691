from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from saver.eval.metrics import TrajectorySummary, em_f1, faithfulness_metrics

FIXTURES = json.loads((Path(__file__).parent / "fixtures" / "metrics.json").read_text())


@pytest.mark.parametrize(
    "pred, golds, em, f1",
    [
        ("the Animorphs series", ["Animorphs"], 0, Fraction(2, 3)),
        ("Animorphs", ["Animorphs"], 1, Fraction(1)),
        ("The  Animorphs!", ["animorphs"], 1, Fraction(1)),
        ("Goosebumps", ["Animorphs"], 0, Fraction(0)),
        ("K. A. Applegate", ["Katherine Applegate", "K A Applegate"], 1, Fraction(1)),
        ("Katherine Alice Applegate", ["Katherine Applegate"], 0, Fraction(4, 5)),
        ("", ["Animorphs"], 0, Fraction(0)),
        ("the", ["a"], 1, Fraction(1)),
    ],
)
def test_em_f1(pred, golds, em, f1):
    got_em, got_f1 = em_f1(pred, golds)
    assert got_em == em
    assert got_f1 == pytest.approx(float(f1))


def test_em_f1_needs_gold():
    with pytest.raises(ValueError):
        em_f1("x", [])


@pytest.mark.parametrize("case", FIXTURES, ids=[c["name"] for c in FIXTURES])
def test_faithfulness_fixtures(case):
    rep = faithfulness_metrics(case["logs"])
    exp = case["expected"]
    for key in ("avg_viol", "vfr", "usr", "post_res"):
        assert getattr(rep, key) == pytest.approx(float(Fraction(exp[key])), abs=1e-12), key
    assert rep.n_repaired == exp["n_repaired"]
    assert rep.n_trajectories == len(case["logs"])


def test_fixture_count():
    assert len(FIXTURES) >= 10


def test_empty_logs_rejected():
    with pytest.raises(ValueError):
        faithfulness_metrics([])


@pytest.mark.parametrize(
    "kwargs",
    [dict(L=0, violations=0, flagged=0), dict(L=3, violations=1, flagged=4), dict(L=3, violations=1, flagged=2)],
)
def test_summary_validation(kwargs):
    with pytest.raises(ValueError):
        TrajectorySummary(**kwargs)


summaries = st.integers(1, 12).flatmap(
    lambda L: st.integers(0, L).flatmap(
        lambda f: st.builds(
            TrajectorySummary,
            st.just(L),
            st.integers(f, f + 4),
            st.just(f),
            st.integers(0, 3),
        )
    )
)


@given(st.lists(summaries, min_size=1, max_size=20), st.randoms(use_true_random=False))
def test_metrics_are_order_invariant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    assert faithfulness_metrics(rows) == faithfulness_metrics(shuffled)


@given(st.lists(summaries, min_size=1, max_size=20))
def test_metric_ranges(rows):
    rep = faithfulness_metrics(rows)
    assert 0.0 <= rep.vfr <= 1.0 and 0.0 <= rep.usr <= 1.0
    assert rep.avg_viol >= 0 and rep.post_res >= 0
    assert (rep.vfr == 1.0) == (rep.avg_viol == 0.0)
