"""Constraint-guided minimal repair, the audit-repair loop, and commitment.

Each violation becomes a constraint with a mechanical acceptance check
(``sat``). A repair round walks the constraints in ascending step order and,
for each, applies the proposed edit that minimizes

    (# constraints still unsatisfied) + lam * (# step edits)

but only if that beats leaving the trajectory alone. Edits touch only the
failure slice of the constraint being repaired.
"""

from __future__ import annotations

import enum
import itertools
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from .audit import (
    DEFAULT_LEXICONS,
    TYPE_ORDER,
    UnfaithfulnessProfile,
    ViolationInstance,
    ViolationType,
    assumption_citers,
    assumption_ok,
    audit,
    bad_references,
    closure_evidence,
    cycle_edges,
    detect_contradiction,
    flagged_steps,
    is_overgeneral,
    presupposing_assumption,
    profile,
    rule_contradictions,
)
from .backend import Backend, BackendError, GenRequest
from .config import Lexicons
from .text import contains_any, overlap, tokens
from .trajectory import (
    Belief,
    EvidenceRef,
    ReasoningStep,
    StepKind,
    Task,
    Trajectory,
    validate_trajectory,
)

log = logging.getLogger(__name__)


class EditKind(str, enum.Enum):
    ATTACH_EVIDENCE = "AttachEvidence"
    INSERT_ASSUMPTION = "InsertAssumption"
    SCOPE_ASSUMPTION = "ScopeAssumption"
    REMOVE_CYCLE_EDGE = "RemoveCycleEdge"
    REVISE_STEP_TEXT = "ReviseStepText"
    FIX_REFERENCE = "FixReference"
    HEDGE_CONCLUSION = "HedgeConclusion"


@dataclass(frozen=True)
class RepairConstraint:
    source: ViolationInstance
    prescribed_edit_kind: EditKind
    sat_params: Mapping[str, Any]

    @property
    def step(self) -> int:
        return int(self.sat_params.get("step", self.sat_params.get("assumption", self.source.step)))

    def remap(self, mapping: Mapping[int, int]) -> "RepairConstraint":
        if not mapping or all(k == v for k, v in mapping.items()):
            return self
        return replace(self, sat_params=_remap_params(self.sat_params, mapping))

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.source.type.value,
            "edit": self.prescribed_edit_kind.value,
            "params": dict(self.sat_params),
        }


def _remap_params(params: Mapping[str, Any], mapping: Mapping[int, int]) -> dict[str, Any]:
    m = lambda i: mapping.get(i, i)  # noqa: E731
    out = dict(params)
    for key in ("step", "assumption", "other", "presupposition"):
        if key in out and out[key] is not None:
            out[key] = m(out[key])
    for key in ("citing", "bad_premises"):
        if key in out:
            out[key] = [m(i) for i in out[key]]
    if "cycles" in out:
        out["cycles"] = [[[m(u), m(v)] for u, v in cyc] for cyc in out["cycles"]]
    return out


# ---------------------------------------------------------------------------
# edits

_NEW_BASE = -1000


def new_step_token(n: int = 0) -> int:
    """Placeholder index for the n-th step inserted by one candidate."""
    return _NEW_BASE - n


@dataclass(frozen=True)
class EditOp:
    """One unit-cost step edit.

    ``step`` and every reference inside ``new`` use the pre-edit numbering;
    inserted steps are addressed through ``new_step_token`` placeholders.
    An insert goes immediately before pre-edit step ``step``.
    """

    op: str
    step: int
    new: ReasoningStep | None = None

    def describe(self) -> str:
        from .generation import render_step

        if self.op == "delete":
            return f"delete {self.step}"
        assert self.new is not None
        return f"{self.op} {self.step}: {render_step(self.new)}"


def apply_ops(traj: Trajectory, ops: Sequence[EditOp]) -> tuple[Trajectory, dict[int, int]]:
    """Apply step edits and renumber to 1..L.

    Returns the new trajectory and the old-to-new index map (placeholders of
    inserted steps included). References to deleted steps are dropped.
    """
    modified = {op.step: op.new for op in ops if op.op == "modify"}
    deleted = {op.step for op in ops if op.op == "delete"}
    inserts: dict[int, list[ReasoningStep]] = {}
    for op in ops:
        if op.op == "insert":
            assert op.new is not None
            inserts.setdefault(op.step, []).append(op.new)
        elif op.op not in ("modify", "delete"):
            raise ValueError(f"unknown edit op {op.op!r}")

    old_L = traj.L
    old_indices = set(traj.indices())
    seq: list[tuple[int, ReasoningStep]] = []
    for s in traj.steps:
        for ins in inserts.pop(s.index, []):
            seq.append((ins.index, ins))
        if s.index in deleted:
            continue
        seq.append((s.index, modified.get(s.index, s)))
    for pos in sorted(inserts):
        for ins in inserts[pos]:
            seq.append((ins.index, ins))

    mapping = {old: new for new, (old, _) in enumerate(seq, start=1)}
    shift = len(seq) - old_L

    def ref(i: int) -> int | None:
        if i in mapping:
            return mapping[i]
        if i in deleted:
            return None
        if i > old_L and i not in old_indices:
            return i + shift
        return i

    def refs(items: Iterable[int]) -> frozenset[int]:
        return frozenset(r for r in (ref(i) for i in items) if r is not None)

    steps = []
    for new_idx, (_, s) in enumerate(seq, start=1):
        steps.append(
            ReasoningStep(
                index=new_idx,
                kind=s.kind,
                text=s.text,
                premise_refs=refs(s.premise_refs),
                evidence_refs=s.evidence_refs,
                assumption_scope=None if s.assumption_scope is None else refs(s.assumption_scope),
            )
        )
    return Trajectory(tuple(steps)), mapping


@dataclass(frozen=True)
class RepairCandidate:
    trajectory: Trajectory
    edit_ops: tuple[EditOp, ...]
    index_map: Mapping[int, int] = field(default_factory=dict)
    source: str = "rule"

    @property
    def delta(self) -> int:
        return len(self.edit_ops)

    @property
    def description(self) -> str:
        return "; ".join(op.describe() for op in self.edit_ops)

    def touched(self) -> set[int]:
        """Pre-edit indices of modified/deleted steps."""
        return {op.step for op in self.edit_ops if op.op != "insert"}


# ---------------------------------------------------------------------------
# acceptance checks


def _check_attach(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    s = traj.step(p["step"])
    return s is not None and any(task.resolves(r) for r in s.evidence_refs)


def _check_insert_assumption(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    i = p["step"]
    s = traj.step(i)
    if s is None:
        return False
    for a in s.premise_refs:
        if a < i and assumption_ok(traj, a, [i], lex):
            return True
    return False


def _check_scope(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    a = p["assumption"]
    live = [c for c in p.get("citing", []) if c in assumption_citers(traj, a)]
    return not live or assumption_ok(traj, a, live, lex)


def _check_cycle(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    if p.get("presupposition") is not None:
        return presupposing_assumption(traj, p["step"]) is None
    present = {(s.index, q) for s in traj.steps for q in s.premise_refs}
    return all(not all(tuple(e) in present for e in cyc) for cyc in p.get("cycles", []))


def _check_reference(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    if traj.step(p["step"]) is None:
        return True
    bad_ev, bad_p = bad_references(traj, p["step"], task)
    return not bad_ev and not bad_p


def _check_hedge(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    return not is_overgeneral(traj, p["step"], lex)


def _check_revise(traj: Trajectory, p: Mapping[str, Any], task: Task, lex: Lexicons) -> bool:
    step, vtype = p["step"], ViolationType(p.get("type", ViolationType.CONTRADICTION))
    if traj.step(step) is None:
        return True
    if vtype is ViolationType.CONTRADICTION:
        if p.get("detector") == "llm-judge":
            # the judge cannot be re-run deterministically; the flagged text must change
            # and the rule detector must stay quiet
            if traj.step(step).text == p.get("flagged_text"):
                return False
        return not any(inst.step == step for inst in detect_contradiction(traj, "rule", None, lex))
    return not any(i.key == (vtype, step) for i in audit(traj, task, "rule", None, lex))


SAT_CHECKS: dict[str, Callable[[Trajectory, Mapping[str, Any], Task, Lexicons], bool]] = {
    EditKind.ATTACH_EVIDENCE.value: _check_attach,
    EditKind.INSERT_ASSUMPTION.value: _check_insert_assumption,
    EditKind.SCOPE_ASSUMPTION.value: _check_scope,
    EditKind.REMOVE_CYCLE_EDGE.value: _check_cycle,
    EditKind.FIX_REFERENCE.value: _check_reference,
    EditKind.HEDGE_CONCLUSION.value: _check_hedge,
    EditKind.REVISE_STEP_TEXT.value: _check_revise,
}


def sat(
    traj: Trajectory,
    constraint: RepairConstraint,
    task: Task,
    lexicons: Lexicons = DEFAULT_LEXICONS,
) -> bool:
    """Whether ``traj`` meets the constraint's acceptance criterion."""
    kind = constraint.prescribed_edit_kind
    key = kind.value if isinstance(kind, EditKind) else str(kind)
    try:
        check = SAT_CHECKS[key]
    except KeyError:
        raise ValueError(f"unknown criterion {key!r}") from None
    return check(traj, constraint.sat_params, task, lexicons)


def constraint_loss(
    traj: Trajectory, constraints: Sequence[RepairConstraint], task: Task, lexicons: Lexicons = DEFAULT_LEXICONS
) -> int:
    return sum(1 for c in constraints if not sat(traj, c, task, lexicons))


# ---------------------------------------------------------------------------
# constraints


def ranked_evidence(task: Task, text: str, exclude: Iterable[EvidenceRef] = ()) -> list[EvidenceRef]:
    """Context sentences sharing at least one token with ``text``, best overlap first."""
    skip = set(exclude)
    scored = [
        (overlap(text, sent), ref)
        for ref, sent in task.all_sentences()
        if ref not in skip
    ]
    order = {ref: i for i, (_, ref) in enumerate(scored)}
    return [ref for score, ref in sorted(scored, key=lambda t: (-t[0], order[t[1]])) if score > 0]


def build_constraints(
    instances: Iterable[ViolationInstance], traj: Trajectory, task: Task
) -> list[RepairConstraint]:
    out = []
    for inst in instances:
        kind = EditKind(inst.acceptance.criterion_id)
        params = dict(inst.acceptance.params)
        if inst.type is ViolationType.UNJUSTIFIED_INFERENCE:
            s = traj.step(inst.step)
            if s is None or not ranked_evidence(task, s.text):
                kind = EditKind.INSERT_ASSUMPTION
        if inst.type is ViolationType.CONTRADICTION:
            params["type"] = inst.type.value
            s = traj.step(inst.step)
            params["flagged_text"] = s.text if s is not None else ""
        out.append(RepairConstraint(inst, kind, params))
    return sorted(out, key=lambda c: (c.step, TYPE_ORDER.index(c.source.type)))


# ---------------------------------------------------------------------------
# templated edits
#
# A template yields alternative "patches": dicts {pre-edit step index: new step}
# plus an optional list of inserted steps. Patches from constraints on the same
# step are composed so that step is modified once.

Patch = tuple[dict[int, ReasoningStep], tuple[EditOp, ...]]

_UNIVERSAL_SWAP = {"all": "most", "every": "most", "always": "usually", "never": "rarely"}


def _ground_if_bare(step: ReasoningStep, task: Task, alt: int = 0) -> ReasoningStep | None:
    """Attach the alt-th best evidence sentence when an Inference is left with no refs."""
    if step.kind is not StepKind.INFERENCE or step.premise_refs or step.evidence_refs:
        return step
    ranked = ranked_evidence(task, step.text)
    if alt >= len(ranked):
        return None
    return step.with_(evidence_refs=frozenset({ranked[alt]}))


def hedge_text(text: str, lexicons: Lexicons = DEFAULT_LEXICONS) -> str:
    def swap(m: re.Match[str]) -> str:
        word = m.group(0)
        repl = _UNIVERSAL_SWAP.get(word.lower(), "some")
        return repl.capitalize() if word[0].isupper() else repl

    pattern = r"\b(" + "|".join(sorted(map(re.escape, lexicons.universal))) + r")\b"
    return re.sub(pattern, swap, text, flags=re.IGNORECASE)


def hedge_assumption_text(text: str, lexicons: Lexicons = DEFAULT_LEXICONS) -> str:
    if contains_any(text, lexicons.hedge):
        return text
    return f"Assume that {text.strip()}"


def _patches_for(
    traj: Trajectory, c: RepairConstraint, task: Task, lex: Lexicons, n: int
) -> list[Patch]:
    p = c.sat_params
    kind = c.prescribed_edit_kind

    if kind is EditKind.ATTACH_EVIDENCE:
        s = traj.step(p["step"])
        if s is None:
            return []
        return [
            ({s.index: s.with_(evidence_refs=s.evidence_refs | {ref})}, ())
            for ref in ranked_evidence(task, s.text, s.evidence_refs)[:n]
        ]

    if kind is EditKind.INSERT_ASSUMPTION:
        s = traj.step(p["step"])
        if s is None:
            return []
        token = new_step_token()
        assumption = ReasoningStep(
            token,
            StepKind.ASSUMPTION,
            hedge_assumption_text(s.text, lex),
            assumption_scope=frozenset({s.index}),
        )
        return [
            (
                {s.index: s.with_(premise_refs=s.premise_refs | {token})},
                (EditOp("insert", s.index, assumption),),
            )
        ]

    if kind is EditKind.SCOPE_ASSUMPTION:
        a = traj.step(p["assumption"])
        if a is None:
            return []
        citers = set(assumption_citers(traj, a.index))
        fixed = a.with_(
            kind=StepKind.ASSUMPTION,
            text=hedge_assumption_text(a.text, lex),
            assumption_scope=a.scope | citers,
        )
        return [({a.index: fixed}, ())]

    if kind is EditKind.FIX_REFERENCE:
        s = traj.step(p["step"])
        if s is None:
            return []
        bad_ev, bad_p = bad_references(traj, s.index, task)
        cleaned = s.with_(
            evidence_refs=s.evidence_refs - set(bad_ev),
            premise_refs=s.premise_refs - set(bad_p),
        )
        out = []
        for alt in range(n):
            grounded = _ground_if_bare(cleaned, task, alt)
            if grounded is None:
                break
            out.append(({s.index: grounded}, ()))
            if grounded is cleaned:
                break
        return out

    if kind is EditKind.REMOVE_CYCLE_EDGE:
        if p.get("presupposition") is not None:
            s = traj.step(p["step"])
            if s is None:
                return []
            ranked = ranked_evidence(task, s.text, s.evidence_refs)
            if ranked:
                return [({s.index: s.with_(evidence_refs=s.evidence_refs | {r})}, ()) for r in ranked[:n]]
            return [({s.index: s.with_(premise_refs=frozenset())}, ())]
        per_cycle: list[list[tuple[int, int]]] = []
        for cyc in p.get("cycles", []):
            edges = [tuple(e) for e in cyc]
            live = [(u, v) for u, v in edges if traj.step(u) is not None and v in traj.step(u).premise_refs]
            if len(live) < len(edges):
                continue  # already broken
            per_cycle.append(sorted((u, v) for u, v in live if u <= v) or sorted(live))
        if not per_cycle:
            return []
        out = []
        for choice in itertools.islice(itertools.product(*per_cycle), n):
            patch: dict[int, ReasoningStep] = {}
            for u, v in sorted(set(choice)):
                base = patch.get(u, traj.step(u))
                patch[u] = base.with_(premise_refs=base.premise_refs - {v})
            patch = {u: g for u, g in ((u, _ground_if_bare(s, task)) for u, s in patch.items()) if g is not None}
            out.append((patch, ()))
        return out

    if kind is EditKind.HEDGE_CONCLUSION:
        s = traj.step(p["step"])
        if s is None:
            return []
        out = [({s.index: s.with_(text=hedge_text(s.text, lex))}, ())]
        have = closure_evidence(traj, s.index)
        extra = [r for r in ranked_evidence(task, s.text, have)]
        need = max(0, 2 - len(have))
        if need and len(extra) >= need:
            out.append(({s.index: s.with_(evidence_refs=s.evidence_refs | set(extra[:need]))}, ()))
        return out[:n]

    if kind is EditKind.REVISE_STEP_TEXT:
        s = traj.step(p["step"])
        other = traj.step(p.get("other", -1))
        if s is None:
            return []
        out = []
        if other is not None:
            out.append(({s.index: s.with_(text=other.text)}, ()))
        stripped = " ".join(w for w in s.text.split() if tokens(w) and tokens(w)[0] not in lex.negation)
        if stripped and stripped != s.text and (other is None or stripped != other.text):
            out.append(({s.index: s.with_(text=stripped)}, ()))
        return out[:n]

    raise ValueError(f"unknown criterion {kind!r}")


def _compose(traj: Trajectory, patches: Sequence[Patch]) -> Patch:
    merged: dict[int, ReasoningStep] = {}
    inserts: list[EditOp] = []
    for mods, ins in patches:
        for i, new in mods.items():
            if i not in merged:
                merged[i] = new
                continue
            cur, orig = merged[i], traj.step(i)
            assert orig is not None
            # fold the second patch's changes (relative to the original) onto the first
            merged[i] = cur.with_(
                kind=new.kind if new.kind != orig.kind else cur.kind,
                text=new.text if new.text != orig.text else cur.text,
                premise_refs=(cur.premise_refs - (orig.premise_refs - new.premise_refs))
                | (new.premise_refs - orig.premise_refs),
                evidence_refs=(cur.evidence_refs - (orig.evidence_refs - new.evidence_refs))
                | (new.evidence_refs - orig.evidence_refs),
                assumption_scope=new.assumption_scope if new.assumption_scope != orig.assumption_scope else cur.assumption_scope,
            )
        inserts.extend(ins)
    return merged, tuple(inserts)


def _candidate(traj: Trajectory, patch: Patch, source: str) -> RepairCandidate | None:
    mods, inserts = patch
    ops = [EditOp("modify", i, new) for i, new in sorted(mods.items()) if new != traj.step(i)]
    renumbered = list(inserts)
    for k, op in enumerate(renumbered):
        # placeholders must be unique within one candidate
        if k:
            old_tok = op.new.index
            tok = new_step_token(k)
            renumbered[k] = replace(op, new=op.new.with_(index=tok))
            ops = [
                replace(o, new=o.new.with_(premise_refs=frozenset(tok if r == old_tok else r for r in o.new.premise_refs)))
                for o in ops
            ]
    ops = sorted(ops, key=lambda o: o.step) + renumbered
    if not ops:
        return None
    new_traj, mapping = apply_ops(traj, ops)
    if validate_trajectory(new_traj):
        return None
    return RepairCandidate(new_traj, tuple(ops), mapping, source)


def _llm_candidates(
    traj: Trajectory,
    group: Sequence[RepairConstraint],
    task: Task,
    backend: Backend,
    n: int,
) -> list[RepairCandidate]:
    from .generation import ParseError, format_contexts, parse_step_line, read_prompt, render

    c = group[0]
    step = c.step
    user = read_prompt("repair").format(
        question=task.question,
        contexts=format_contexts(task),
        trajectory=render(traj).rstrip(),
        step=step,
        violation=", ".join(g.source.type.value for g in group),
        explanation=" ".join(g.source.explanation for g in group),
        criterion=", ".join(g.prescribed_edit_kind.value for g in group),
        n=n,
    )
    req = GenRequest(read_prompt("system").strip(), user, temperature=0.7, max_tokens=512, seed=step)
    try:
        text = backend.generate(req).text
    except BackendError as exc:
        log.warning("llm repair proposal failed: %s", exc)
        return []
    out = []
    for no, line in enumerate(text.splitlines(), start=1):
        try:
            new = parse_step_line(line, no)
        except ParseError:
            continue
        if new is None:
            continue
        cand = _candidate(traj, ({step: new.with_(index=step)}, ()), "llm")
        if cand is not None and cand.description not in {x.description for x in out}:
            out.append(cand)
        if len(out) >= n:
            break
    return out


def propose_repairs(
    traj: Trajectory,
    constraints: RepairConstraint | Sequence[RepairConstraint],
    task: Task,
    backend: Backend | None = None,
    n: int = 3,
    mode: str = "rule",
    lexicons: Lexicons = DEFAULT_LEXICONS,
) -> list[RepairCandidate]:
    """Candidate edits for one constraint, or several sharing a step (composed).

    ``llm`` mode asks the backend to rewrite only the flagged step and falls
    back to the rule templates when it yields nothing schema-valid.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    group = [constraints] if isinstance(constraints, RepairConstraint) else list(constraints)
    if not group:
        return []
    if mode == "llm" and backend is not None:
        cands = _llm_candidates(traj, group, task, backend, n)
        if cands:
            return cands
    options = [_patches_for(traj, c, task, lexicons, n) for c in group]
    options = [o for o in options if o]
    if not options:
        return []
    out: list[RepairCandidate] = []
    seen: set[str] = set()
    for combo in itertools.islice(itertools.product(*options), n):
        cand = _candidate(traj, _compose(traj, combo), "rule")
        if cand is not None and cand.description not in seen:
            seen.add(cand.description)
            out.append(cand)
    return out


# ---------------------------------------------------------------------------
# rounds and loop


@dataclass
class RoundResult:
    trajectory: Trajectory
    applied: list[RepairCandidate]
    constraints: list[RepairConstraint]
    residual: list[RepairConstraint]
    loss_before: int
    loss_after: int
    loss_trace: list[int]

    @property
    def delta(self) -> int:
        return sum(c.delta for c in self.applied)


def repair_round(
    traj: Trajectory,
    constraints: Sequence[RepairConstraint],
    task: Task,
    backend: Backend | None = None,
    lam: float = 0.1,
    n: int = 3,
    mode: str = "rule",
    lexicons: Lexicons = DEFAULT_LEXICONS,
    proposer: Callable[..., list[RepairCandidate]] | None = None,
) -> RoundResult:
    """One greedy pass over the constraints in ascending step order.

    ``proposer`` replaces ``propose_repairs`` (same signature) when given.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    current = traj
    cons = list(constraints)
    loss = constraint_loss(current, cons, task, lexicons)
    trace = [loss]
    applied: list[RepairCandidate] = []
    pending_steps = sorted({c.step for c in cons})
    # constraint identity survives remapping through its position in ``cons``
    ids_by_step = {s: [i for i, c in enumerate(cons) if c.step == s] for s in pending_steps}
    for s in pending_steps:
        group_ids = [i for i in ids_by_step[s] if not sat(current, cons[i], task, lexicons)]
        if not group_ids:
            continue
        cands = (proposer or propose_repairs)(current, [cons[i] for i in group_ids], task, backend, n, mode, lexicons)
        best: tuple[float, int, str] | None = None
        best_cand = None
        best_cons = None
        for cand in cands:
            remapped = [c.remap(cand.index_map) for c in cons]
            after = constraint_loss(cand.trajectory, remapped, task, lexicons)
            key = (after + lam * cand.delta, cand.delta, cand.description)
            if best is None or key < best:
                best, best_cand, best_cons = key, cand, remapped
        if best_cand is not None and best is not None and best[0] < loss:
            current = best_cand.trajectory
            cons = best_cons
            applied.append(best_cand)
            loss = constraint_loss(current, cons, task, lexicons)
            trace.append(loss)
    residual = [c for c in cons if not sat(current, c, task, lexicons)]
    return RoundResult(current, applied, cons, residual, trace[0], loss, trace)


def unfaithful_step_rate(traj: Trajectory, instances: Iterable[ViolationInstance]) -> float:
    return len(flagged_steps(instances)) / traj.L


@dataclass
class RepairOutcome:
    trajectory: Trajectory
    rounds_used: int
    residual: list[ViolationInstance]
    converged: bool
    initial: list[ViolationInstance] = field(default_factory=list)
    rounds: list[dict[str, Any]] = field(default_factory=list)
    stalled: bool = False

    @property
    def repair_rounds(self) -> int:
        """Rounds in which at least one edit was applied."""
        return sum(1 for r in self.rounds if r["delta"] > 0)

    @property
    def violation_trace(self) -> list[int]:
        return [len(self.initial)] + [r["violations_after"] for r in self.rounds]

    @property
    def usr_trace(self) -> list[float]:
        if not self.rounds:
            return [0.0]  # no round ran, so the input was clean
        return [self.rounds[0]["usr_before"]] + [r["usr_after"] for r in self.rounds]

    @property
    def profile(self) -> UnfaithfulnessProfile:
        return profile(self.residual)


def audit_repair_loop(
    belief: Belief,
    task: Task,
    backend: Backend | None = None,
    r_max: int = 10,
    lam: float = 0.1,
    audit_mode: str = "rule",
    repair_mode: str = "rule",
    n: int = 3,
    lexicons: Lexicons = DEFAULT_LEXICONS,
    log_round: Callable[[dict[str, Any]], None] | None = None,
) -> RepairOutcome:
    """Alternate audit and repair until no violation remains, r_max rounds
    pass, or a round applies no edit (stalled)."""
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    traj = belief.trajectory
    flags: list[str] = []
    found = audit(traj, task, audit_mode, backend, lexicons, flags)
    initial = list(found)
    rounds: list[dict[str, Any]] = []
    stalled = False
    r = 0
    while found and r < r_max:
        r += 1
        cons = build_constraints(found, traj, task)
        result = repair_round(traj, cons, task, backend, lam, n, repair_mode, lexicons)
        new_traj = result.trajectory
        after = audit(new_traj, task, audit_mode, backend, lexicons, flags) if result.applied else found
        record = {
            "round": r,
            "trajectory_before": traj.to_dict(),
            "instances": [i.to_dict() for i in found],
            "constraints": [c.to_dict() for c in cons],
            "repairs": [
                {"ops": [op.describe() for op in c.edit_ops], "delta": c.delta, "source": c.source}
                for c in result.applied
            ],
            "delta": result.delta,
            "loss_before": result.loss_before,
            "loss_after": result.loss_after,
            "loss_trace": result.loss_trace,
            "violations_before": len(found),
            "violations_after": len(after),
            "usr_before": unfaithful_step_rate(traj, found),
            "usr_after": unfaithful_step_rate(new_traj, after),
            "L_before": traj.L,
            "L_after": new_traj.L,
            "resolved": [
                [c.source.type.value, c.source.step, list(c.source.offending_refs)]
                for c in result.constraints
                if c not in result.residual
            ],
        }
        rounds.append(record)
        if log_round is not None:
            log_round(record)
        if not result.applied:
            stalled = True
            break
        traj, found = new_traj, after
    return RepairOutcome(
        trajectory=traj,
        rounds_used=max(r, 1),
        residual=list(found),
        converged=not found,
        initial=initial,
        rounds=rounds,
        stalled=stalled,
    )


# ---------------------------------------------------------------------------
# commitment


def commit_score(q_tilde: float, prof: UnfaithfulnessProfile, alpha: float, weights: Mapping[str, float]) -> float:
    return q_tilde - alpha * prof.weighted(weights)


def commit(
    repaired: Sequence[tuple[Belief, UnfaithfulnessProfile, float]],
    alpha: float = 1.0,
    weights: Mapping[str, float] | None = None,
) -> int:
    """Index of the belief maximizing quality minus weighted residual violations.

    Ties go to fewer residual violations, then to the lower index.
    """
    if not repaired:
        raise ValueError("nothing to commit")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    from .config import DEFAULT_WEIGHTS

    w = dict(DEFAULT_WEIGHTS if weights is None else weights)
    if any(v < 0 for v in w.values()):
        raise ValueError("severity weights must be >= 0")
    scored = [
        (-commit_score(q, prof, alpha, w), prof.total, i)
        for i, (_, prof, q) in enumerate(repaired)
    ]
    return min(scored)[2]
