from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from saver.trajectory import (
    Belief,
    EvidenceDoc,
    ReasoningStep,
    StepKind,
    SupportAssessment,
    Task,
    Trajectory,
    assessment_from_flags,
    premise_closure,
    premise_graph,
    refs_from_graph,
    unfaithfulness_rate,
    validate_trajectory,
)

S = ReasoningStep


@pytest.mark.parametrize(
    "scores, expected",
    [
        ([1.0, 1.0, 1.0], 0.0),
        ([0.0, 0.0], 1.0),
        ([0.9, 0.4, 0.6, 0.2], 0.5),
        ([0.5, 0.5, 0.49], 1 / 3),
    ],
)
def test_unfaithfulness_rate_counts_strictly_below(scores, expected):
    assert unfaithfulness_rate(SupportAssessment(tuple(scores), 0.5)) == expected


def test_unfaithfulness_rate_rejects_empty():
    with pytest.raises(ValueError, match="empty trajectory"):
        unfaithfulness_rate(SupportAssessment((), 0.5))


def test_assessment_rejects_out_of_range():
    with pytest.raises(ValueError):
        SupportAssessment((1.2,), 0.5)
    with pytest.raises(ValueError):
        SupportAssessment((0.2,), 1.0)


@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=30),
    st.floats(0.01, 0.98),
    st.floats(0.0, 0.01),
)
def test_rate_bounds_integrality_and_monotonicity(scores, eps, bump):
    a = SupportAssessment(tuple(scores), eps)
    u = unfaithfulness_rate(a)
    assert 0.0 <= u <= 1.0
    assert Fraction(u).limit_denominator(100) * len(scores) == round(u * len(scores))
    assert (u == 0.0) == all(s >= eps for s in scores)
    assert unfaithfulness_rate(SupportAssessment(tuple(scores), eps + bump)) >= u


def test_flags_map_to_binary_support():
    traj = Trajectory(tuple(S(i, StepKind.CLAIM, f"s{i}") for i in range(1, 5)))
    a = assessment_from_flags(traj, {2, 4})
    assert a.scores == (1.0, 0.0, 1.0, 0.0)
    assert unfaithfulness_rate(a) == 0.5


def test_premise_graph_keeps_edges_verbatim():
    traj = Trajectory(
        (
            S(1, StepKind.CLAIM, "a"),
            S(2, StepKind.INFERENCE, "b", premise_refs={2}),
            S(3, StepKind.INFERENCE, "c", premise_refs={1, 2}),
            S(4, StepKind.CONCLUSION, "d", premise_refs={9}),
        )
    )
    g = premise_graph(traj)
    assert sorted(g.edges) == [(2, 2), (3, 1), (3, 2), (4, 9)]
    assert g.nodes[9]["dangling"] is True
    assert refs_from_graph(g) == {s.index: s.premise_refs for s in traj.steps}


def test_premise_graph_edgeless():
    traj = Trajectory(tuple(S(i, StepKind.CLAIM, "x") for i in (1, 2, 3)))
    g = premise_graph(traj)
    assert g.number_of_nodes() == 3 and g.number_of_edges() == 0


@st.composite
def trajectories(draw):
    n = draw(st.integers(1, 8))
    steps = []
    for i in range(1, n + 1):
        prem = draw(st.frozensets(st.integers(0, n + 2), max_size=3))
        kind = draw(st.sampled_from([StepKind.CLAIM, StepKind.INFERENCE, StepKind.ASSUMPTION]))
        steps.append(S(i, kind, f"step {i}", premise_refs=prem))
    return Trajectory(tuple(steps))


@given(trajectories())
def test_graph_round_trip(traj):
    assert refs_from_graph(premise_graph(traj)) == {s.index: s.premise_refs for s in traj.steps}


def test_validate_reports_schema_faults():
    ok = Trajectory((S(1, StepKind.CLAIM, "a"), S(2, StepKind.INFERENCE, "b"), S(3, StepKind.CONCLUSION, "c")))
    assert validate_trajectory(ok) == []
    gap = Trajectory((S(1, StepKind.CLAIM, "a"), S(3, StepKind.CONCLUSION, "c")))
    assert [f.code for f in validate_trajectory(gap)] == ["gap"]
    two = Trajectory((S(1, StepKind.CONCLUSION, "a"), S(2, StepKind.CONCLUSION, "b")))
    assert [f.code for f in validate_trajectory(two)] == ["duplicate-conclusion"]
    early = Trajectory((S(1, StepKind.CONCLUSION, "a"), S(2, StepKind.CLAIM, "b")))
    assert [f.code for f in validate_trajectory(early)] == ["conclusion-not-final"]
    blank = Trajectory((S(1, StepKind.CLAIM, "  "),))
    assert [f.code for f in validate_trajectory(blank)] == ["empty-text"]


def test_constructors_accept_forward_and_self_refs():
    s = S(2, StepKind.INFERENCE, "x", premise_refs={2, 5})
    assert s.premise_refs == frozenset({2, 5})


def test_empty_trajectory_and_claim_rejected():
    with pytest.raises(ValueError, match="empty trajectory"):
        Trajectory(())
    with pytest.raises(ValueError):
        Belief("p", "", Trajectory((S(1, StepKind.CLAIM, "x"),)))


def test_task_rejects_duplicate_docs():
    d = EvidenceDoc("d1", "t", ("s",))
    with pytest.raises(ValueError):
        Task("t", "q", (d, d))
    with pytest.raises(ValueError):
        Task("", "q")


def test_task_resolves_sentences(book_task):
    assert book_task.resolves(("d2", 1))
    assert not book_task.resolves(("d2", 2))
    assert not book_task.resolves(("d9", 0))
    assert book_task.sentence(("d1", 1)).startswith("It tells")


def test_json_round_trip(book_task, grounded_trajectory):
    assert Task.from_dict(book_task.to_dict()) == book_task
    assert Trajectory.from_dict(grounded_trajectory.to_dict()) == grounded_trajectory
    b = Belief("p", "Animorphs", grounded_trajectory)
    assert Belief.from_dict(b.to_dict()) == b
    d = grounded_trajectory.steps[2].to_dict()
    assert d == {
        "index": 3,
        "kind": "Inference",
        "text": "The companion book belongs to the Applegate series.",
        "premises": [1, 2],
        "evidence": [["d2", 0]],
        "scope": None,
    }


def test_premise_closure_follows_refs(grounded_trajectory):
    assert premise_closure(grounded_trajectory, 4) == {1, 2, 3, 4}
    assert premise_closure(grounded_trajectory, 1) == {1}
