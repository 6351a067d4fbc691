"""Structured belief and trajectory schema.

A trajectory is an ordered list of typed reasoning steps. Each step may cite
earlier steps (premises) and context sentences (evidence). Constructors store
references verbatim, including forward and self references: spotting those is
the auditor's job, so nothing here rejects them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Any, Iterable, Iterator, Mapping

import networkx as nx

EvidenceRef = tuple[str, int]


class StepKind(str, enum.Enum):
    CLAIM = "Claim"
    ASSUMPTION = "Assumption"
    INFERENCE = "Inference"
    VERIFICATION = "Verification"
    CONCLUSION = "Conclusion"

    @classmethod
    def parse(cls, name: str) -> "StepKind":
        key = name.strip().lower()
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise ValueError(f"unknown step kind {name!r}")


@dataclass(frozen=True)
class EvidenceDoc:
    doc_id: str
    title: str
    sentences: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sentences", tuple(self.sentences))


@dataclass(frozen=True)
class Task:
    id: str
    question: str
    contexts: tuple[EvidenceDoc, ...] = ()
    gold_answers: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("task id must be nonempty")
        object.__setattr__(self, "contexts", tuple(self.contexts))
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        ids = [d.doc_id for d in self.contexts]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate doc_id in task {self.id}")

    def doc(self, doc_id: str) -> EvidenceDoc | None:
        for d in self.contexts:
            if d.doc_id == doc_id:
                return d
        return None

    def sentence(self, ref: EvidenceRef) -> str | None:
        """Text of a (doc_id, sentence id) reference, or None if it does not resolve."""
        d = self.doc(ref[0])
        if d is None or not 0 <= ref[1] < len(d.sentences):
            return None
        return d.sentences[ref[1]]

    def resolves(self, ref: EvidenceRef) -> bool:
        return self.sentence(ref) is not None

    def all_sentences(self) -> Iterator[tuple[EvidenceRef, str]]:
        for d in self.contexts:
            for i, s in enumerate(d.sentences):
                yield (d.doc_id, i), s

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "question": self.question,
            "contexts": [
                {"doc_id": d.doc_id, "title": d.title, "sentences": list(d.sentences)}
                for d in self.contexts
            ],
            "gold_answers": list(self.gold_answers),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Task":
        docs = tuple(
            EvidenceDoc(str(c["doc_id"]), str(c.get("title", "")), tuple(str(s) for s in c["sentences"]))
            for c in data.get("contexts", [])
        )
        return cls(
            id=str(data["id"]),
            question=str(data["question"]),
            contexts=docs,
            gold_answers=tuple(str(g) for g in data.get("gold_answers", [])),
        )


DatasetRecord = Task


@dataclass(frozen=True)
class ReasoningStep:
    index: int
    kind: StepKind
    text: str
    premise_refs: frozenset[int] = frozenset()
    evidence_refs: frozenset[EvidenceRef] = frozenset()
    assumption_scope: frozenset[int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", StepKind(self.kind))
        object.__setattr__(self, "premise_refs", frozenset(int(p) for p in self.premise_refs))
        object.__setattr__(
            self, "evidence_refs", frozenset((str(d), int(s)) for d, s in self.evidence_refs)
        )
        if self.assumption_scope is not None:
            object.__setattr__(self, "assumption_scope", frozenset(int(i) for i in self.assumption_scope))

    @property
    def scope(self) -> frozenset[int]:
        return self.assumption_scope or frozenset()

    def with_(self, **changes: Any) -> "ReasoningStep":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "kind": self.kind.value,
            "text": self.text,
            "premises": sorted(self.premise_refs),
            "evidence": [[d, s] for d, s in sorted(self.evidence_refs)],
            "scope": None if self.assumption_scope is None else sorted(self.assumption_scope),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReasoningStep":
        scope = data.get("scope")
        return cls(
            index=int(data["index"]),
            kind=StepKind.parse(str(data["kind"])),
            text=str(data["text"]),
            premise_refs=frozenset(data.get("premises", ())),
            evidence_refs=frozenset((str(d), int(s)) for d, s in data.get("evidence", ())),
            assumption_scope=None if scope is None else frozenset(scope),
        )


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[ReasoningStep, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("empty trajectory")

    @property
    def L(self) -> int:
        return len(self.steps)

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self) -> Iterator[ReasoningStep]:
        return iter(self.steps)

    def step(self, index: int) -> ReasoningStep | None:
        """Step by its 1-based index label (not list position)."""
        for s in self.steps:
            if s.index == index:
                return s
        return None

    def indices(self) -> list[int]:
        return [s.index for s in self.steps]

    def conclusion(self) -> ReasoningStep | None:
        for s in reversed(self.steps):
            if s.kind is StepKind.CONCLUSION:
                return s
        return None

    def replace_step(self, new: ReasoningStep) -> "Trajectory":
        return Trajectory(tuple(new if s.index == new.index else s for s in self.steps))

    def to_dict(self) -> dict[str, Any]:
        return {"steps": [s.to_dict() for s in self.steps]}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Trajectory":
        return cls(tuple(ReasoningStep.from_dict(s) for s in data["steps"]))


@dataclass(frozen=True)
class Belief:
    persona_id: str
    claim: str
    trajectory: Trajectory
    degraded: bool = False

    def __post_init__(self) -> None:
        if not self.claim:
            raise ValueError("belief claim must be nonempty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "persona_id": self.persona_id,
            "claim": self.claim,
            "degraded": self.degraded,
            "trajectory": self.trajectory.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Belief":
        return cls(
            persona_id=str(data["persona_id"]),
            claim=str(data["claim"]),
            trajectory=Trajectory.from_dict(data["trajectory"]),
            degraded=bool(data.get("degraded", False)),
        )


@dataclass(frozen=True)
class SupportAssessment:
    """Per-step support scores in [0, 1] and the faithfulness threshold."""

    scores: tuple[float, ...]
    threshold: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if any(not 0.0 <= s <= 1.0 for s in self.scores):
            raise ValueError("support scores must lie in [0, 1]")


def unfaithfulness_rate(assessment: SupportAssessment) -> float:
    """Fraction of steps whose support falls strictly below the threshold."""
    n = len(assessment.scores)
    if n == 0:
        raise ValueError("empty trajectory")
    below = sum(1 for s in assessment.scores if s < assessment.threshold)
    return below / n


def assessment_from_flags(
    trajectory: Trajectory, flagged_steps: Iterable[int], threshold: float = 0.5
) -> SupportAssessment:
    """Discrete support: a flagged step scores 0, every other step 1."""
    flagged = set(flagged_steps)
    return SupportAssessment(
        tuple(0.0 if s.index in flagged else 1.0 for s in trajectory.steps), threshold
    )


def premise_graph(trajectory: Trajectory) -> nx.DiGraph:
    """Directed graph with an edge u -> v whenever step u cites step v as a premise.

    Forward, self and dangling references are kept as edges; dangling targets
    appear as extra nodes flagged ``dangling=True``.
    """
    g = nx.DiGraph()
    for s in trajectory.steps:
        g.add_node(s.index, dangling=False)
    for s in trajectory.steps:
        for p in sorted(s.premise_refs):
            if p not in g:
                g.add_node(p, dangling=True)
            g.add_edge(s.index, p)
    return g


def refs_from_graph(g: nx.DiGraph) -> dict[int, frozenset[int]]:
    return {
        n: frozenset(g.successors(n))
        for n, data in g.nodes(data=True)
        if not data.get("dangling", False)
    }


@dataclass(frozen=True)
class SchemaFault:
    code: str
    step: int | None
    message: str


def validate_trajectory(trajectory: Trajectory) -> list[SchemaFault]:
    """Schema checks only. An empty result says nothing about faithfulness."""
    faults: list[SchemaFault] = []
    for pos, s in enumerate(trajectory.steps, start=1):
        if s.index != pos:
            faults.append(SchemaFault("gap", s.index, f"expected index {pos}, found {s.index}"))
            break
    for s in trajectory.steps:
        if not s.text.strip():
            faults.append(SchemaFault("empty-text", s.index, "step text is empty"))
    conclusions = [s for s in trajectory.steps if s.kind is StepKind.CONCLUSION]
    if len(conclusions) > 1:
        faults.append(
            SchemaFault("duplicate-conclusion", conclusions[1].index, "more than one Conclusion step")
        )
    if conclusions and trajectory.steps[-1].kind is not StepKind.CONCLUSION:
        faults.append(
            SchemaFault("conclusion-not-final", conclusions[0].index, "Conclusion must be the final step")
        )
    return faults


def premise_closure(trajectory: Trajectory, index: int) -> set[int]:
    """Step indices reachable from ``index`` through premise references, including itself."""
    seen = {index}
    stack = [index]
    while stack:
        s = trajectory.step(stack.pop())
        if s is None:
            continue
        for p in s.premise_refs:
            if p not in seen and trajectory.step(p) is not None:
                seen.add(p)
                stack.append(p)
    return seen
