from __future__ import annotations

import pytest
from hypothesis import given, strategies as st

from saver.audit import UnfaithfulnessProfile, ViolationType as V, audit, profile
from saver.backend import BackendError, GenRequest, GenResponse
from saver.repair import (
    EditKind,
    EditOp,
    RepairCandidate,
    apply_ops,
    audit_repair_loop,
    build_constraints,
    commit,
    commit_score,
    constraint_loss,
    hedge_assumption_text,
    hedge_text,
    new_step_token,
    propose_repairs,
    repair_round,
    sat,
)
from saver.trajectory import Belief, ReasoningStep, StepKind, Task, Trajectory

S = ReasoningStep
C, A, I, Z = StepKind.CLAIM, StepKind.ASSUMPTION, StepKind.INFERENCE, StepKind.CONCLUSION
D1 = {("d1", 0)}


def cons_for(traj, task):
    return build_constraints(audit(traj, task), traj, task)


def bad_ref_traj():
    return Trajectory(
        (
            S(1, C, "Applegate wrote it.", evidence_refs=D1),
            S(2, I, "The book is by Applegate.", premise_refs={1}, evidence_refs={("d9", 0)}),
            S(3, Z, "Animorphs", premise_refs={2}),
        )
    )


def overgeneral_bad_ref_traj():
    return Trajectory(
        (
            S(1, C, "Some companion books are Animorphs books."),
            S(2, Z, "All companion books are Animorphs books.", premise_refs={1}, evidence_refs={("d9", 0)}),
        )
    )


def test_constraints_follow_violations(book_task, presupposing_trajectory):
    cons = cons_for(presupposing_trajectory, book_task)
    assert [(c.source.type, c.step, c.prescribed_edit_kind) for c in cons] == [
        (V.MISSING_ASSUMPTION, 2, EditKind.SCOPE_ASSUMPTION),
        (V.CIRCULAR_REASONING, 3, EditKind.REMOVE_CYCLE_EDGE),
    ]
    assert constraint_loss(presupposing_trajectory, cons, book_task) == 2


def test_unjustified_without_matching_evidence_asks_for_assumption(book_task):
    traj = Trajectory((S(1, C, "x", evidence_refs=D1), S(2, I, "zzz qqq"), S(3, Z, "y", premise_refs={2})))
    (c,) = cons_for(traj, book_task)
    assert c.prescribed_edit_kind is EditKind.INSERT_ASSUMPTION
    traj2 = traj.replace_step(S(2, I, "Applegate wrote books."))
    (c2,) = cons_for(traj2, book_task)
    assert c2.prescribed_edit_kind is EditKind.ATTACH_EVIDENCE


def test_sat_fix_reference(book_task):
    traj = bad_ref_traj()
    (c,) = cons_for(traj, book_task)
    assert not sat(traj, c, book_task)
    fixed = traj.replace_step(traj.step(2).with_(evidence_refs=frozenset()))
    assert sat(fixed, c, book_task)


def test_sat_scope_and_hedge(book_task, presupposing_trajectory):
    cons = cons_for(presupposing_trajectory, book_task)
    scoped = presupposing_trajectory.replace_step(
        presupposing_trajectory.step(2).with_(text="Assume the book is in the series.", assumption_scope=frozenset({3}))
    )
    assert sat(scoped, cons[0], book_task)
    og = overgeneral_bad_ref_traj()
    hedge = [c for c in cons_for(og, book_task) if c.prescribed_edit_kind is EditKind.HEDGE_CONCLUSION][0]
    assert not sat(og, hedge, book_task)
    assert sat(og.replace_step(og.step(2).with_(text="Most companion books are Animorphs books.")), hedge, book_task)


def test_sat_unknown_criterion(book_task):
    traj = bad_ref_traj()
    (c,) = cons_for(traj, book_task)
    from dataclasses import replace

    with pytest.raises(ValueError):
        sat(traj, replace(c, prescribed_edit_kind="Rewrite"), book_task)


def test_single_fix_reference_round(book_task):
    traj = bad_ref_traj()
    cons = cons_for(traj, book_task)
    res = repair_round(traj, cons, book_task)
    assert (res.loss_before, res.loss_after) == (1, 0)
    assert res.delta == 1
    assert res.trajectory.step(2).evidence_refs == frozenset()
    assert res.trajectory.step(2).premise_refs == frozenset({1})
    assert res.residual == []
    assert audit(res.trajectory, book_task) == []


def test_zero_constraints_leave_trajectory_unchanged(book_task, grounded_trajectory):
    res = repair_round(grounded_trajectory, [], book_task)
    assert res.trajectory == grounded_trajectory
    assert res.applied == [] and res.loss_trace == [0]


def _hook(cands):
    def proposer(traj, group, task, backend, n, mode, lexicons):
        return cands

    return proposer


def _cand(traj, ops):
    new, mapping = apply_ops(traj, ops)
    return RepairCandidate(new, ops, mapping)


def _scripted_candidates(traj):
    fix = traj.step(2).with_(text="Most companion books are Animorphs books.", evidence_refs=frozenset())
    small_ops = (EditOp("modify", 2, fix),)
    big_ops = (
        EditOp("modify", 1, traj.step(1).with_(text="Several companion books are Animorphs books.")),
        EditOp("modify", 2, fix),
        EditOp("insert", 2, S(new_step_token(), C, "Filler claim.")),
    )
    return _cand(traj, small_ops), _cand(traj, big_ops)


@pytest.mark.parametrize("lam", [0.0, 0.1, 1.0])
def test_smaller_edit_wins(book_task, lam):
    traj = overgeneral_bad_ref_traj()
    cons = cons_for(traj, book_task)
    assert len(cons) == 2 and {c.step for c in cons} == {2}
    small, big = _scripted_candidates(traj)
    assert (small.delta, big.delta) == (1, 3)
    res = repair_round(traj, cons, book_task, lam=lam, proposer=_hook([big, small]))
    assert res.applied == [small]
    assert res.loss_trace == [2, 0]


def test_edit_not_applied_unless_loss_strictly_drops(book_task):
    traj = bad_ref_traj()
    cons = cons_for(traj, book_task)
    ops = (EditOp("modify", 2, traj.step(2).with_(evidence_refs=frozenset())),)
    cand = _cand(traj, ops)
    # loss 1 -> 0 costs 0 + 1.0 * 1, which does not beat the current loss of 1
    res = repair_round(traj, cons, book_task, lam=1.0, proposer=_hook([cand]))
    assert res.applied == [] and res.trajectory == traj


def test_same_step_constraints_merge_into_one_edit(book_task):
    traj = overgeneral_bad_ref_traj()
    cons = cons_for(traj, book_task)
    cands = propose_repairs(traj, cons, book_task)
    assert cands and cands[0].delta == 1
    res = repair_round(traj, cons, book_task)
    assert res.delta == 1 and res.loss_trace == [2, 0]
    assert res.trajectory.step(2).text == "Most companion books are Animorphs books."


def test_propose_rejects_bad_n(book_task):
    traj = bad_ref_traj()
    with pytest.raises(ValueError):
        propose_repairs(traj, cons_for(traj, book_task), book_task, n=0)
    with pytest.raises(ValueError):
        repair_round(traj, [], book_task, lam=-1)


def test_apply_ops_insert_and_delete():
    traj = Trajectory(
        (S(1, C, "a"), S(2, I, "b", premise_refs={1}), S(3, Z, "c", premise_refs={1, 2}))
    )
    tok = new_step_token()
    new, mapping = apply_ops(
        traj,
        (
            EditOp("insert", 2, S(tok, A, "Assume b.", assumption_scope={2})),
            EditOp("modify", 2, traj.step(2).with_(premise_refs=frozenset({1, tok}))),
        ),
    )
    assert mapping == {1: 1, tok: 2, 2: 3, 3: 4}
    assert [s.kind for s in new.steps] == [C, A, I, Z]
    assert new.step(3).premise_refs == {1, 2}
    assert new.step(2).assumption_scope == {3}
    assert new.step(4).premise_refs == {1, 3}
    gone, mapping = apply_ops(traj, (EditOp("delete", 2),))
    assert gone.L == 2 and gone.step(2).premise_refs == {1}
    assert 2 not in mapping
    with pytest.raises(ValueError):
        apply_ops(traj, (EditOp("swap", 1),))


def test_hedges():
    assert hedge_text("All books always sell.") == "Most books usually sell."
    assert hedge_text("every EVERY never") == "most Most rarely"
    assert hedge_assumption_text("The Hork-Bajir book is canon.") == "Assume that The Hork-Bajir book is canon."
    assert hedge_assumption_text("Perhaps it is canon.") == "Perhaps it is canon."


def test_loop_repairs_presupposition(book_task, presupposing_trajectory):
    out = audit_repair_loop(Belief("p", "Animorphs", presupposing_trajectory), book_task)
    assert out.converged and not out.stalled
    assert audit(out.trajectory, book_task) == []
    trace = out.violation_trace
    assert trace[0] == 2 and trace[-1] == 0
    assert all(a >= b for a, b in zip(trace, trace[1:]))
    assert out.rounds_used == out.repair_rounds == len(out.rounds)
    assert out.usr_trace[0] == pytest.approx(2 / 3) and out.usr_trace[-1] == 0.0
    rec = out.rounds[0]
    assert rec["loss_trace"][0] == rec["loss_before"] and rec["loss_trace"][-1] == rec["loss_after"]
    assert rec["resolved"]


def test_loop_on_clean_input_is_identity(book_task, grounded_trajectory):
    out = audit_repair_loop(Belief("p", "Animorphs", grounded_trajectory), book_task)
    assert out.trajectory is grounded_trajectory
    assert out.rounds_used == 1 and out.repair_rounds == 0
    assert out.converged and out.rounds == []
    assert out.usr_trace == [0.0] and out.violation_trace == [0]


def test_loop_stalls_without_candidates():
    task = Task("t", "q")
    traj = Trajectory((S(1, C, "a"), S(2, I, "b", evidence_refs={("d9", 0)}), S(3, Z, "c", premise_refs={2})))
    out = audit_repair_loop(Belief("p", "c", traj), task)
    assert out.stalled and not out.converged
    assert out.rounds_used == 1 and out.repair_rounds == 0
    assert out.trajectory == traj
    assert [v.key for v in out.residual] == [(V.INVALID_PRECONDITION, 2)]


def test_loop_respects_round_budget(book_task, presupposing_trajectory):
    seen = []
    out = audit_repair_loop(Belief("p", "a", presupposing_trajectory), book_task, r_max=1, log_round=seen.append)
    assert out.rounds_used == 1 and len(seen) == 1
    with pytest.raises(ValueError):
        audit_repair_loop(Belief("p", "a", presupposing_trajectory), book_task, r_max=0)


class OneShotBackend:
    """Answers the first request with a scripted reply, then fails."""

    def __init__(self, reply: str) -> None:
        self.reply = reply
        self.requests: list[GenRequest] = []

    def generate(self, req: GenRequest) -> GenResponse:
        self.requests.append(req)
        if len(self.requests) > 1:
            raise BackendError("script exhausted")
        return GenResponse(self.reply, "scripted", 0, (0, 0))


def test_llm_repair_that_introduces_a_contradiction(book_task):
    traj = Trajectory(
        (
            S(1, C, "Applegate is the author.", evidence_refs=D1),
            S(2, I, "Applegate is the author of the series."),
            S(3, Z, "Animorphs", premise_refs={1, 2}),
        )
    )
    backend = OneShotBackend("[2] INFERENCE (premises: 1) (evidence: d1:0) Applegate is not the author.\n")
    out = audit_repair_loop(Belief("p", "Animorphs", traj), book_task, backend, repair_mode="llm")
    assert [r["repairs"][0]["source"] for r in out.rounds] == ["llm", "rule"]
    assert out.rounds[1]["instances"][0]["type"] == "Contradiction"
    assert out.violation_trace == [1, 1, 0]
    assert out.converged
    assert out.trajectory.step(2).text == "Applegate is the author."
    assert "step 2" in backend.requests[0].user_prompt


def test_llm_mode_without_backend_uses_rules(book_task):
    traj = bad_ref_traj()
    cands = propose_repairs(traj, cons_for(traj, book_task), book_task, None, mode="llm")
    assert cands and all(c.source == "rule" for c in cands)


def _prof(*counts: int) -> UnfaithfulnessProfile:
    return UnfaithfulnessProfile(tuple(counts) + (0,) * (6 - len(counts)))


def test_commit_prefers_quality_net_of_violations():
    b = Belief("p", "x", Trajectory((S(1, C, "x"),)))
    w = {"Missing_Assumption": 0.2}
    assert commit([(b, _prof(1), 0.8), (b, _prof(), 0.7)], 1.0, w) == 1
    assert commit([(b, _prof(1), 0.8), (b, _prof(), 0.7)], 0.0, w) == 0
    assert commit_score(0.8, _prof(1), 1.0, w) == pytest.approx(0.6)


def test_commit_tie_breaks():
    b = Belief("p", "x", Trajectory((S(1, C, "x"),)))
    assert commit([(b, _prof(), 0.5), (b, _prof(), 0.5)]) == 0
    w = {"Missing_Assumption": 0.0}
    assert commit([(b, _prof(1), 0.7), (b, _prof(), 0.7)], 1.0, w) == 1


def test_commit_rejects_bad_arguments():
    b = Belief("p", "x", Trajectory((S(1, C, "x"),)))
    with pytest.raises(ValueError):
        commit([])
    with pytest.raises(ValueError):
        commit([(b, _prof(), 0.5)], alpha=-1)
    with pytest.raises(ValueError):
        commit([(b, _prof(), 0.5)], weights={"Contradiction": -1.0})


@given(
    st.lists(
        st.tuples(st.sampled_from([0.0, 0.2, 0.4, 0.6, 0.8, 1.0]), st.lists(st.integers(0, 2), min_size=6, max_size=6)),
        min_size=1,
        max_size=5,
    ),
    st.sampled_from([-0.5, 0.25, 3.0]),
)
def test_commit_is_shift_invariant(items, shift):
    b = Belief("p", "x", Trajectory((S(1, C, "x"),)))
    base = [(b, _prof(*c), q) for q, c in items]
    moved = [(b, _prof(*c), q + shift) for q, c in items]
    assert commit(base) == commit(moved)


def test_profile_of_residual(book_task, presupposing_trajectory):
    out = audit_repair_loop(Belief("p", "a", presupposing_trajectory), book_task)
    assert out.profile == profile([])
