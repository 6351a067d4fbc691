"""Synthetic trajectories with known violations.

A clean base trajectory is generated over a small context made of invented
words (so no lexicon word ever appears by accident), then zero or more
mutations inject violations at chosen steps. The ground truth for each case is
known by construction, which makes the corpus an oracle for the auditor and a
workload for the repair loop.

Base layout for length L (7 <= L <= 9)::

    1 Claim       ev d1:0
    2 Claim       ev d2:0
    3 Inference   premises 1, 2
    4 Inference   premises 3, ev d1:1
    5 Assumption  hedged, scope {6}
    6 Inference   premises 4, 5, ev d2:1
    7..L-1        Inference, premises k-1, evidence sometimes
    L Conclusion  premises L-1, ev d3:0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..audit import TYPE_ORDER, ViolationType
from ..trajectory import EvidenceDoc, ReasoningStep, StepKind, Task, Trajectory, validate_trajectory

VOCAB = (
    "zorvan quilbet mebric tansol poravel gleth drumwick fenlow ostrik varnel "
    "bexley culdra hemsor jappet kivrol lunder mossin nebbit orlan pithe "
    "quonsel rastle sivvet torlin umbrek vesket wolram yarrin zemble abrel "
    "brindle corvash delphin elmsk fraddle gorwin hapsel istrel jorvik kestrin "
    "lappin morwen nettle oskar pavlin quarrel rindle sorrel tavish ulmer "
    "vorsen wendle yoskin zarrow ambril belcot cranwel dovrin eskel fulmer"
).split()

ASSUME_PREFIX = "Assume that "
NEGATION_TOKEN = "not"
UNIVERSAL_TOKEN = "All"
FIRST_FREE_STEP = 7


@dataclass(frozen=True)
class Injection:
    type: ViolationType
    step: int | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"type": self.type.value, "step": self.step, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Injection":
        return cls(ViolationType(data["type"]), data.get("step"), dict(data.get("params", {})))


@dataclass(frozen=True)
class InjectionSpec:
    """A recipe: which violations to inject, optionally at fixed steps."""

    injected: tuple[Injection, ...] = ()
    length: int | None = None

    @property
    def name(self) -> str:
        return "+".join(i.type.value for i in self.injected) or "clean"

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InjectionSpec":
        return cls(tuple(Injection.from_dict(d) for d in data.get("inject", [])), data.get("length"))


@dataclass(frozen=True)
class InjectionCase:
    case_id: str
    slice: str
    task: Task
    base: Trajectory
    trajectory: Trajectory
    injected: tuple[Injection, ...]
    expected: tuple[tuple[ViolationType, int], ...]

    @property
    def clean(self) -> bool:
        return not self.expected

    def to_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "slice": self.slice,
            "task": self.task.to_dict(),
            "base": self.base.to_dict(),
            "trajectory": self.trajectory.to_dict(),
            "injected": [i.to_dict() for i in self.injected],
            "expected": [[t.value, s] for t, s in self.expected],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InjectionCase":
        return cls(
            case_id=str(data["case_id"]),
            slice=str(data["slice"]),
            task=Task.from_dict(data["task"]),
            base=Trajectory.from_dict(data["base"]),
            trajectory=Trajectory.from_dict(data["trajectory"]),
            injected=tuple(Injection.from_dict(d) for d in data["injected"]),
            expected=tuple((ViolationType(t), int(s)) for t, s in data["expected"]),
        )


# ---------------------------------------------------------------------------
# base trajectories


def _sentence(words: Sequence[str]) -> str:
    return " ".join(words).capitalize() + "."


def _phrase(words: Sequence[str]) -> str:
    return " ".join(words).capitalize()


def make_context(rng: np.random.Generator, case_id: str) -> tuple[Task, list[list[str]]]:
    """A task over three docs of three five-word sentences; also returns the sentence words."""
    words = [VOCAB[i] for i in rng.permutation(len(VOCAB))]
    sents = [words[5 * i : 5 * i + 5] for i in range(9)]
    docs = tuple(
        EvidenceDoc(f"d{d + 1}", _phrase(sents[3 * d][:2]), tuple(_sentence(s) for s in sents[3 * d : 3 * d + 3]))
        for d in range(3)
    )
    answer = " ".join(sents[6][:2])
    task = Task(case_id, f"Which {sents[6][2]} relates {sents[0][0]} to {sents[3][0]}?", docs, (answer,))
    return task, sents


def make_trajectory(
    sents: Sequence[Sequence[str]],
    rng: np.random.Generator,
    length: int | None = None,
    answer: Sequence[str] | None = None,
) -> Trajectory:
    """A clean trajectory over the context words; the conclusion opens with ``answer``."""
    L = int(rng.integers(7, 10)) if length is None else length
    if not 7 <= L <= 9:
        raise ValueError("base length must lie in [7, 9]")
    answer = list(sents[6][:2]) if answer is None else list(answer)

    def pick(sent: int, n: int = 3) -> list[str]:
        idx = sorted(rng.choice(5, size=n, replace=False))
        return [sents[sent][i] for i in idx]

    S = ReasoningStep
    steps = [
        S(1, StepKind.CLAIM, _sentence(sents[0]), evidence_refs={("d1", 0)}),
        S(2, StepKind.CLAIM, _sentence(sents[3]), evidence_refs={("d2", 0)}),
        S(3, StepKind.INFERENCE, _phrase(pick(0, 2) + pick(3, 2)), premise_refs={1, 2}),
        S(4, StepKind.INFERENCE, _phrase(pick(1)), premise_refs={3}, evidence_refs={("d1", 1)}),
        S(5, StepKind.ASSUMPTION, ASSUME_PREFIX + " ".join(pick(7)), assumption_scope={6}),
        S(6, StepKind.INFERENCE, _phrase(pick(4) + pick(7, 1)), premise_refs={4, 5}, evidence_refs={("d2", 1)}),
    ]
    for k in range(FIRST_FREE_STEP, L):
        src = int(rng.choice([1, 2, 4, 5, 7, 8]))
        ev = {(f"d{src // 3 + 1}", src % 3)} if rng.random() < 0.5 else set()
        steps.append(S(k, StepKind.INFERENCE, _phrase(pick(src)), premise_refs={k - 1}, evidence_refs=ev))
    steps.append(
        S(L, StepKind.CONCLUSION, _phrase(answer + pick(6, 1) + ["matters"]), premise_refs={L - 1}, evidence_refs={("d3", 0)})
    )
    return Trajectory(tuple(steps))


def make_base(rng: np.random.Generator, case_id: str, length: int | None = None) -> tuple[Task, Trajectory]:
    task, sents = make_context(rng, case_id)
    return task, make_trajectory(sents, rng, length)


# ---------------------------------------------------------------------------
# mutations
#
# ``_sites`` lists where a type can be injected into a base trajectory and
# ``_touched`` the steps an injection depends on; injections sharing a case
# must touch disjoint steps so their ground truths stay independent.


def _sites(t: ViolationType, traj: Trajectory) -> list[int]:
    L = traj.L
    if t is ViolationType.CIRCULAR_REASONING:
        return [4] + list(range(FIRST_FREE_STEP, L + 1))
    if t is ViolationType.UNJUSTIFIED_INFERENCE:
        return [3, 4, 6] + list(range(FIRST_FREE_STEP, L))
    if t is ViolationType.INVALID_PRECONDITION:
        return list(range(1, L + 1))
    if t is ViolationType.CONTRADICTION:
        return [3, 4, 6] + list(range(FIRST_FREE_STEP, L))
    if t is ViolationType.MISSING_ASSUMPTION:
        return [5]
    if t is ViolationType.OVERGENERALIZATION:
        return [L]
    raise ValueError(t)


def _touched(t: ViolationType, k: int, params: Mapping[str, Any]) -> set[int]:
    if t is ViolationType.CIRCULAR_REASONING:
        return {k - 1, k}
    if t is ViolationType.UNJUSTIFIED_INFERENCE:
        return {k, 5} if k == 6 else {k}
    if t is ViolationType.CONTRADICTION:
        return {int(params["source"]), k}
    if t is ViolationType.MISSING_ASSUMPTION:
        return {5, 6}
    return {k}


def negate(text: str) -> str:
    words = text.split()
    return " ".join(words[:1] + [NEGATION_TOKEN] + words[1:])


def _mutate(
    t: ViolationType, traj: Trajectory, task: Task, k: int, params: Mapping[str, Any]
) -> Trajectory:
    s = traj.step(k)
    assert s is not None
    if t is ViolationType.CIRCULAR_REASONING:
        prev = traj.step(k - 1)
        assert prev is not None and k - 1 in s.premise_refs
        return traj.replace_step(prev.with_(premise_refs=prev.premise_refs | {k}))
    if t is ViolationType.UNJUSTIFIED_INFERENCE:
        return traj.replace_step(s.with_(premise_refs=frozenset(), evidence_refs=frozenset()))
    if t is ViolationType.INVALID_PRECONDITION:
        kind = params.get("kind", "doc")
        if kind == "doc":
            return traj.replace_step(s.with_(evidence_refs=s.evidence_refs | {("d9", 0)}))
        if kind == "sentence":
            return traj.replace_step(s.with_(evidence_refs=s.evidence_refs | {("d1", 7)}))
        if kind == "premise":
            return traj.replace_step(s.with_(premise_refs=s.premise_refs | {traj.L + 3}))
        raise ValueError(f"unknown invalid-precondition kind {kind!r}")
    if t is ViolationType.CONTRADICTION:
        src = traj.step(int(params["source"]))
        assert src is not None and src.index < k
        return traj.replace_step(s.with_(text=negate(src.text)))
    if t is ViolationType.MISSING_ASSUMPTION:
        body = s.text[len(ASSUME_PREFIX):] if s.text.startswith(ASSUME_PREFIX) else s.text
        return traj.replace_step(s.with_(text=body.capitalize(), assumption_scope=None))
    if t is ViolationType.OVERGENERALIZATION:
        ev = sorted(s.evidence_refs)[:1]
        return traj.replace_step(
            s.with_(text=f"{UNIVERSAL_TOKEN} {s.text[0].lower()}{s.text[1:]}", premise_refs=frozenset(), evidence_refs=frozenset(ev))
        )
    raise ValueError(t)


def _resolve(
    inj: Injection, traj: Trajectory, rng: np.random.Generator, taken: set[int]
) -> Injection | None:
    sites = _sites(inj.type, traj)
    if inj.step is not None:
        sites = [inj.step] if inj.step in sites else []
    order = [sites[i] for i in rng.permutation(len(sites))]
    for k in order:
        params = dict(inj.params)
        if inj.type is ViolationType.INVALID_PRECONDITION and "kind" not in params:
            params["kind"] = ("doc", "sentence", "premise")[int(rng.integers(3))]
        if inj.type is ViolationType.CONTRADICTION and "source" not in params:
            sources = [
                s.index for s in traj.steps
                if s.index < k and s.kind in (StepKind.CLAIM, StepKind.INFERENCE) and s.index not in taken
            ]
            if not sources:
                continue
            params["source"] = sources[int(rng.integers(len(sources)))]
        if _touched(inj.type, k, params) & taken:
            continue
        return Injection(inj.type, k, params)
    return None


def apply_spec(spec: InjectionSpec, rng: np.random.Generator, case_id: str) -> InjectionCase:
    task, base = make_base(rng, case_id, spec.length)
    return inject(task, base, spec, rng, case_id)


def inject(
    task: Task, base: Trajectory, spec: InjectionSpec, rng: np.random.Generator, case_id: str
) -> InjectionCase:
    """Apply a spec's injections to a base trajectory built by ``make_trajectory``."""
    traj = base
    taken: set[int] = set()
    resolved = []
    # place the most constrained injections first
    for inj in sorted(spec.injected, key=lambda i: len(_sites(i.type, base))):
        r = _resolve(inj, base, rng, taken)
        if r is None:
            raise ValueError(f"cannot place {inj.type.value} in case {case_id} (spec {spec.name})")
        assert r.step is not None
        taken |= _touched(r.type, r.step, r.params)
        traj = _mutate(r.type, traj, task, r.step, r.params)
        resolved.append(r)
    faults = validate_trajectory(traj)
    if faults:
        raise AssertionError(f"mutation broke the schema: {faults}")
    expected = tuple(sorted(((r.type, r.step) for r in resolved), key=lambda e: (e[1], TYPE_ORDER.index(e[0]))))
    return InjectionCase(case_id, spec.name, task, base, traj, tuple(resolved), expected)  # type: ignore[arg-type]


def default_specs() -> list[InjectionSpec]:
    T = ViolationType
    singles = [InjectionSpec((Injection(t),)) for t in TYPE_ORDER]
    pairs = [
        (T.CIRCULAR_REASONING, T.CONTRADICTION),
        (T.UNJUSTIFIED_INFERENCE, T.OVERGENERALIZATION),
        (T.INVALID_PRECONDITION, T.MISSING_ASSUMPTION),
        (T.CONTRADICTION, T.INVALID_PRECONDITION),
        (T.MISSING_ASSUMPTION, T.OVERGENERALIZATION),
        (T.CIRCULAR_REASONING, T.UNJUSTIFIED_INFERENCE),
    ]
    return singles + [InjectionSpec((Injection(a), Injection(b))) for a, b in pairs]


def build_injection_corpus(
    specs: Sequence[InjectionSpec], n: int, rng: np.random.Generator
) -> list[InjectionCase]:
    """``n`` cases alternating injected and clean, injected ones cycling through ``specs``."""
    covered = {i.type for s in specs for i in s.injected}
    missing = [t.value for t in TYPE_ORDER if t not in covered]
    if missing:
        raise ValueError(f"specs do not cover: {', '.join(missing)}")
    if n < 0:
        raise ValueError("n must be >= 0")
    out = []
    clean = InjectionSpec()
    for i in range(n):
        spec = specs[(i // 2) % len(specs)] if i % 2 == 0 else clean
        out.append(apply_spec(spec, rng, f"inj-{i:05d}"))
    return out


def load_specs(data: Any) -> list[InjectionSpec]:
    """Specs from a parsed YAML/JSON document: a list, or ``{specs: [...]}``."""
    items = data.get("specs", []) if isinstance(data, Mapping) else data
    return [InjectionSpec.from_dict(d) for d in items]


def dump_corpus(cases: Iterable[InjectionCase], fh: Any) -> None:
    for c in cases:
        fh.write(json.dumps(c.to_dict(), sort_keys=True) + "\n")
