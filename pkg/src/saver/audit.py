"""Typed, step-localized violation detection.

Every detector is a pure function of the trajectory (and task, where evidence
matters). Each instance carries the acceptance criterion the repair engine
must verify before the violation counts as resolved.
"""

from __future__ import annotations

import enum
import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import networkx as nx

from .backend import Backend, BackendError, GenRequest
from .config import Lexicons
from .text import contains_any, token_set, tokens
from .trajectory import StepKind, Task, Trajectory, premise_closure, premise_graph

log = logging.getLogger(__name__)

DEFAULT_LEXICONS = Lexicons()
MAX_CYCLES = 1000

# words ignored when testing whether an assumption already states the conclusion
_STOPWORDS = frozenset(
    "a an the is are was were be been of to in on at for by with as from and or so "
    "therefore thus hence that this it its answer final conclusion".split()
)


class ViolationType(str, enum.Enum):
    MISSING_ASSUMPTION = "Missing_Assumption"
    INVALID_PRECONDITION = "Invalid_Precondition"
    UNJUSTIFIED_INFERENCE = "Unjustified_Inference"
    CIRCULAR_REASONING = "Circular_Reasoning"
    CONTRADICTION = "Contradiction"
    OVERGENERALIZATION = "Overgeneralization"


TYPE_ORDER: tuple[ViolationType, ...] = tuple(ViolationType)

CRITERION_FOR_TYPE = {
    ViolationType.MISSING_ASSUMPTION: "ScopeAssumption",
    ViolationType.INVALID_PRECONDITION: "FixReference",
    ViolationType.UNJUSTIFIED_INFERENCE: "AttachEvidence",
    ViolationType.CIRCULAR_REASONING: "RemoveCycleEdge",
    ViolationType.CONTRADICTION: "ReviseStepText",
    ViolationType.OVERGENERALIZATION: "HedgeConclusion",
}


@dataclass(frozen=True)
class AcceptanceCriterion:
    criterion_id: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"id": self.criterion_id, "params": _jsonable(self.params)}


@dataclass(frozen=True)
class ViolationInstance:
    type: ViolationType
    step: int
    detector_id: str
    offending_refs: tuple[str, ...]
    explanation: str
    acceptance: AcceptanceCriterion

    @property
    def key(self) -> tuple[ViolationType, int]:
        return (self.type, self.step)

    @property
    def triple(self) -> tuple[ViolationType, int, tuple[str, ...]]:
        return (self.type, self.step, self.offending_refs)

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type.value,
            "step": self.step,
            "detector": self.detector_id,
            "offending_refs": list(self.offending_refs),
            "explanation": self.explanation,
            "acceptance": self.acceptance.to_dict(),
        }


@dataclass(frozen=True)
class UnfaithfulnessProfile:
    counts: tuple[int, ...] = (0,) * len(TYPE_ORDER)

    def __getitem__(self, t: ViolationType | str) -> int:
        return self.counts[TYPE_ORDER.index(ViolationType(t))]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def weighted(self, weights: Mapping[str, float]) -> float:
        return sum(weights.get(t.value, 0.0) * c for t, c in zip(TYPE_ORDER, self.counts))

    def to_dict(self) -> dict[str, int]:
        return {t.value: c for t, c in zip(TYPE_ORDER, self.counts)}


def _jsonable(value: Any) -> Any:
    if isinstance(value, Mapping):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = [_jsonable(v) for v in value]
        return sorted(items, key=json.dumps) if isinstance(value, (set, frozenset)) else items
    return value


def _instance(
    vtype: ViolationType,
    step: int,
    detector: str,
    refs: Iterable[str],
    explanation: str,
    /,
    **params: Any,
) -> ViolationInstance:
    return ViolationInstance(
        vtype,
        step,
        detector,
        tuple(refs),
        explanation,
        AcceptanceCriterion(CRITERION_FOR_TYPE[vtype], params),
    )


# ---------------------------------------------------------------------------
# circular reasoning


def _step_graph(traj: Trajectory) -> nx.DiGraph:
    g = premise_graph(traj)
    g.remove_nodes_from([n for n, d in g.nodes(data=True) if d.get("dangling")])
    return g


def _canonical_cycle(nodes: list[int]) -> list[int]:
    i = nodes.index(min(nodes))
    return nodes[i:] + nodes[:i]


def cycle_edges(cycle: Sequence[int]) -> list[tuple[int, int]]:
    return [(cycle[i], cycle[(i + 1) % len(cycle)]) for i in range(len(cycle))]


def find_cycles(traj: Trajectory) -> list[list[int]]:
    g = _step_graph(traj)
    found = [_canonical_cycle(list(c)) for c in itertools.islice(nx.simple_cycles(g), MAX_CYCLES)]
    return sorted(found, key=lambda c: (max(c), len(c), c))


def presupposing_assumption(traj: Trajectory, conclusion_index: int) -> int | None:
    """An unevidenced Assumption that already states the conclusion it is used to reach.

    Fires only when nothing in the conclusion's premise closure cites evidence,
    so the assumption is the sole support for the conclusion.
    """
    concl = traj.step(conclusion_index)
    if concl is None or concl.kind is not StepKind.CONCLUSION:
        return None
    closure = premise_closure(traj, conclusion_index)
    if any(traj.step(i).evidence_refs for i in closure if traj.step(i) is not None):
        return None
    content = {t for t in tokens(concl.text) if t not in _STOPWORDS}
    if not content:
        return None
    for i in sorted(closure - {conclusion_index}):
        s = traj.step(i)
        if s is not None and s.kind is StepKind.ASSUMPTION and content <= token_set(s.text):
            return i
    return None


def detect_circular(traj: Trajectory) -> list[ViolationInstance]:
    """Premise-graph cycles, localized at the highest step on the cycle, plus
    conclusions whose only support is an assumption that presupposes them."""
    by_step: dict[int, list[list[int]]] = {}
    for c in find_cycles(traj):
        by_step.setdefault(max(c), []).append(c)
    out = []
    for step in sorted(by_step):
        cycles = by_step[step]
        edges = sorted({e for c in cycles for e in cycle_edges(c)})
        out.append(
            _instance(
                ViolationType.CIRCULAR_REASONING,
                step,
                "premise-cycle",
                (f"edge:{u}->{v}" for u, v in edges),
                "premise chain " + "; ".join("->".join(map(str, c + [c[0]])) for c in cycles) + " closes on itself",
                step=step,
                cycles=[[list(e) for e in cycle_edges(c)] for c in cycles],
            )
        )
    concl = traj.conclusion()
    if concl is not None and concl.index not in by_step:
        a = presupposing_assumption(traj, concl.index)
        if a is not None:
            out.append(
                _instance(
                    ViolationType.CIRCULAR_REASONING,
                    concl.index,
                    "presupposition",
                    (f"assumption:{a}",),
                    f"conclusion rests only on assumption {a}, which already asserts it",
                    step=concl.index,
                    presupposition=a,
                )
            )
    return out


# ---------------------------------------------------------------------------
# support: unjustified inference, missing assumption, invalid precondition,
# overgeneralization


def bad_references(traj: Trajectory, index: int, task: Task) -> tuple[list[tuple[str, int]], list[int]]:
    """(unresolvable evidence refs, invalid premise refs) of one step.

    A premise is invalid when it names no step, or points forward without
    closing a cycle (a cycle is reported as circular reasoning instead).
    """
    s = traj.step(index)
    if s is None:
        return [], []
    bad_ev = sorted(r for r in s.evidence_refs if not task.resolves(r))
    present = set(traj.indices())
    g = None
    bad_p = []
    for p in sorted(s.premise_refs):
        if p not in present:
            bad_p.append(p)
        elif p > index:
            g = g or _step_graph(traj)
            if not nx.has_path(g, p, index):
                bad_p.append(p)
    return bad_ev, bad_p


def closure_evidence(traj: Trajectory, index: int) -> set[tuple[str, int]]:
    ev: set[tuple[str, int]] = set()
    for i in premise_closure(traj, index):
        s = traj.step(i)
        if s is not None:
            ev |= s.evidence_refs
    return ev


def assumption_citers(traj: Trajectory, a: int) -> list[int]:
    return [
        s.index
        for s in traj.steps
        if a in s.premise_refs and s.index != a and s.kind in (StepKind.INFERENCE, StepKind.CONCLUSION)
    ]


def assumption_ok(traj: Trajectory, a: int, citers: Iterable[int], lexicons: Lexicons) -> bool:
    s = traj.step(a)
    if s is None or s.kind is not StepKind.ASSUMPTION:
        return False
    return bool(s.scope) and set(citers) <= s.scope and contains_any(s.text, lexicons.hedge)


def is_overgeneral(traj: Trajectory, index: int, lexicons: Lexicons) -> bool:
    s = traj.step(index)
    if s is None or s.kind is not StepKind.CONCLUSION:
        return False
    return contains_any(s.text, lexicons.universal) and len(closure_evidence(traj, index)) <= 1


def detect_support(
    traj: Trajectory, task: Task, lexicons: Lexicons = DEFAULT_LEXICONS
) -> list[ViolationInstance]:
    out: list[ViolationInstance] = []
    for s in traj.steps:
        if s.kind is StepKind.INFERENCE and not s.premise_refs and not s.evidence_refs:
            out.append(
                _instance(
                    ViolationType.UNJUSTIFIED_INFERENCE,
                    s.index,
                    "ungrounded-inference",
                    (f"step:{s.index}",),
                    "inference cites neither a premise nor evidence",
                    step=s.index,
                )
            )
        bad_ev, bad_p = bad_references(traj, s.index, task)
        if bad_ev or bad_p:
            refs = [f"doc:{d}:{i}" for d, i in bad_ev] + [f"premise:{p}" for p in bad_p]
            out.append(
                _instance(
                    ViolationType.INVALID_PRECONDITION,
                    s.index,
                    "dangling-reference",
                    refs,
                    "references that do not resolve to available evidence or prior steps: " + ", ".join(refs),
                    step=s.index,
                    bad_evidence=[list(r) for r in bad_ev],
                    bad_premises=bad_p,
                )
            )
        if s.kind is StepKind.ASSUMPTION:
            citers = assumption_citers(traj, s.index)
            if citers and not assumption_ok(traj, s.index, citers, lexicons):
                out.append(
                    _instance(
                        ViolationType.MISSING_ASSUMPTION,
                        s.index,
                        "unscoped-assumption",
                        tuple(f"citer:{c}" for c in citers),
                        f"assumption used by step(s) {', '.join(map(str, citers))} is not stated as a scoped hypothesis",
                        assumption=s.index,
                        citing=citers,
                    )
                )
        if is_overgeneral(traj, s.index, lexicons):
            n_ev = len(closure_evidence(traj, s.index))
            out.append(
                _instance(
                    ViolationType.OVERGENERALIZATION,
                    s.index,
                    "universal-claim",
                    (f"step:{s.index}",),
                    f"universal conclusion backed by {n_ev} evidence sentence(s)",
                    step=s.index,
                )
            )
    return out


# ---------------------------------------------------------------------------
# contradiction


def _negation_variant(a: list[str], b: list[str], negation: frozenset[str]) -> bool:
    """True if one token list equals the other with exactly one negation token inserted."""
    if len(a) == len(b) + 1:
        a, b = b, a
    if len(b) != len(a) + 1:
        return False
    for i, tok in enumerate(b):
        if tok in negation and b[:i] + b[i + 1:] == a:
            return True
    return False


def negation_conflict(text_a: str, text_b: str, lexicons: Lexicons = DEFAULT_LEXICONS) -> bool:
    return _negation_variant(tokens(text_a), tokens(text_b), lexicons.negation)


_CONTRA_KINDS = (StepKind.CLAIM, StepKind.INFERENCE)


def rule_contradictions(traj: Trajectory, lexicons: Lexicons = DEFAULT_LEXICONS) -> list[tuple[int, int]]:
    """(earlier, later) step pairs whose texts differ by one inserted negation token."""
    steps = [s for s in traj.steps if s.kind in _CONTRA_KINDS]
    toks = {s.index: tokens(s.text) for s in steps}
    pairs = []
    for i, a in enumerate(steps):
        for b in steps[i + 1:]:
            if _negation_variant(toks[a.index], toks[b.index], lexicons.negation):
                lo, hi = sorted((a.index, b.index))
                pairs.append((lo, hi))
    return sorted(set(pairs))


_JSON_RE = re.compile(r"\{.*\}", re.DOTALL)


def judge_request(traj: Trajectory, temperature: float = 0.0) -> GenRequest | None:
    from .generation import read_prompt, render_step

    claims = [s for s in traj.steps if s.kind is StepKind.CLAIM]
    if len(claims) < 2:
        return None
    user = read_prompt("contradiction_judge").format(claims="\n".join(render_step(s) for s in claims))
    return GenRequest(read_prompt("system").strip(), user, temperature=temperature, max_tokens=128, seed=0)


def parse_judge(text: str, traj: Trajectory) -> tuple[int, int] | None:
    """Parse ``{"conflict": bool, "steps": [i, j]}``; None when no conflict. Raises ValueError if malformed."""
    m = _JSON_RE.search(text)
    if not m:
        raise ValueError("no JSON object in judge output")
    data = json.loads(m.group(0))
    if not data.get("conflict"):
        return None
    steps = [int(x) for x in data.get("steps", [])]
    if len(steps) != 2 or steps[0] == steps[1]:
        raise ValueError(f"judge named {steps!r}, expected two distinct steps")
    for i in steps:
        s = traj.step(i)
        if s is None or s.kind is not StepKind.CLAIM:
            raise ValueError(f"judge named step {i}, which is not a Claim step")
    lo, hi = sorted(steps)
    return lo, hi


def detect_contradiction(
    traj: Trajectory,
    mode: str = "rule",
    backend: Backend | None = None,
    lexicons: Lexicons = DEFAULT_LEXICONS,
    flags: list[str] | None = None,
) -> list[ViolationInstance]:
    out = []
    seen: set[int] = set()
    for lo, hi in rule_contradictions(traj, lexicons):
        if hi in seen:
            continue
        seen.add(hi)
        out.append(
            _instance(
                ViolationType.CONTRADICTION,
                hi,
                "negation-rule",
                (f"step:{lo}", f"step:{hi}"),
                f"step {hi} negates step {lo}",
                step=hi,
                other=lo,
                detector="negation-rule",
            )
        )
    if mode == "rule+llm" and backend is not None:
        req = judge_request(traj)
        if req is not None:
            try:
                pair = parse_judge(backend.generate(req).text, traj)
            except (BackendError, ValueError) as exc:
                log.warning("contradiction judge skipped: %s", exc)
                if flags is not None:
                    flags.append(f"judge-skipped: {exc}")
                pair = None
            if pair is not None and pair[1] not in seen:
                lo, hi = pair
                out.append(
                    _instance(
                        ViolationType.CONTRADICTION,
                        hi,
                        "llm-judge",
                        (f"step:{lo}", f"step:{hi}"),
                        f"judge reports step {hi} conflicts with step {lo}",
                        step=hi,
                        other=lo,
                        detector="llm-judge",
                    )
                )
    return out


# ---------------------------------------------------------------------------


def dedupe(instances: Iterable[ViolationInstance]) -> list[ViolationInstance]:
    """Keep the first instance per (type, step), ordered by step then type."""
    seen: dict[tuple[ViolationType, int], ViolationInstance] = {}
    for inst in instances:
        seen.setdefault(inst.key, inst)
    return sorted(seen.values(), key=lambda v: (v.step, TYPE_ORDER.index(v.type)))


def audit(
    traj: Trajectory,
    task: Task,
    mode: str = "rule",
    backend: Backend | None = None,
    lexicons: Lexicons = DEFAULT_LEXICONS,
    flags: list[str] | None = None,
) -> list[ViolationInstance]:
    """Union of all detectors, one instance per (type, step).

    ``rule+llm`` adds judge-reported contradictions on top of the rule
    detectors; it never removes a rule-mode instance.
    """
    if mode not in ("rule", "rule+llm"):
        raise ValueError(f"unknown audit mode {mode!r}")
    found = (
        detect_circular(traj)
        + detect_support(traj, task, lexicons)
        + detect_contradiction(traj, mode, backend, lexicons, flags)
    )
    return dedupe(found)


def profile(instances: Iterable[ViolationInstance]) -> UnfaithfulnessProfile:
    counts = [0] * len(TYPE_ORDER)
    for inst in dedupe(instances):
        counts[TYPE_ORDER.index(inst.type)] += 1
    return UnfaithfulnessProfile(tuple(counts))


def flagged_steps(instances: Iterable[ViolationInstance]) -> set[int]:
    return {inst.step for inst in instances}


def audit_record(belief_id: str, round_no: int, instances: Sequence[ViolationInstance], **extra: Any) -> dict[str, Any]:
    rec: dict[str, Any] = {"belief": belief_id, "round": round_no}
    rec.update(extra)
    rec["instances"] = [i.to_dict() for i in instances]
    return rec
