"""Persona coalition, belief elicitation and the line-oriented step format."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backend import Backend, BackendError, GenRequest, GenResponse, generate_batch
from .config import ConfigError, SaverConfig
from .trajectory import Belief, EvidenceRef, ReasoningStep, StepKind, Task, Trajectory


def read_prompt(name: str) -> str:
    return resources.files("saver").joinpath("prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")


@dataclass(frozen=True)
class Persona:
    id: str
    bias_label: str
    instruction_template: str
    step_format_contract: str


@dataclass(frozen=True)
class ParseFault:
    line: int
    message: str

    def __str__(self) -> str:
        return f"line {self.line}: {self.message}"


class ParseError(ValueError):
    def __init__(self, fault: ParseFault) -> None:
        super().__init__(str(fault))
        self.fault = fault


@dataclass
class CandidateSet:
    task_id: str
    beliefs: list[Belief]
    parse_faults: list[list[ParseFault]] = field(default_factory=list)


def _read_persona_file(pid: str, text: str, contract: str) -> Persona:
    header, sep, body = text.partition("\n---\n")
    if not sep:
        raise ConfigError(f"persona {pid!r} lacks a 'bias:' header block")
    meta = dict(
        line.split(":", 1) for line in header.strip().splitlines() if ":" in line
    )
    bias = meta.get("bias", "").strip()
    if not bias:
        raise ConfigError(f"persona {pid!r} has no bias label")
    return Persona(pid, bias, body.strip() + "\n", contract)


def build_coalition(config: SaverConfig) -> list[Persona]:
    if not config.personas:
        raise ConfigError("at least one persona is required")
    if len(set(config.personas)) != len(config.personas):
        raise ConfigError(f"duplicate persona ids in {list(config.personas)}")
    contract = read_prompt("step_format")
    out: list[Persona] = []
    for pid in config.personas:
        if config.persona_dir is not None:
            path = Path(config.persona_dir) / f"{pid}.txt"
            if not path.exists():
                raise ConfigError(f"persona file not found: {path}")
            text = path.read_text(encoding="utf-8")
        else:
            res = resources.files("saver").joinpath("personas").joinpath(f"{pid}.txt")
            if not res.is_file():
                raise ConfigError(f"unknown built-in persona {pid!r}")
            text = res.read_text(encoding="utf-8")
        out.append(_read_persona_file(pid, text, contract))
    labels = [p.bias_label for p in out]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"personas must have distinct bias labels, got {labels}")
    return out


def format_contexts(task: Task) -> str:
    if not task.contexts:
        return "(no context provided)"
    lines = []
    for d in task.contexts:
        lines.append(f"[{d.doc_id}] {d.title}".rstrip())
        for i, s in enumerate(d.sentences):
            lines.append(f"  {d.doc_id}:{i} {s}")
    return "\n".join(lines)


def persona_seed(seed: int | None, persona_index: int) -> int | None:
    return None if seed is None else seed * 1000 + persona_index


def belief_request(
    task: Task, persona: Persona, config: SaverConfig, seed: int | None = None
) -> GenRequest:
    user = persona.instruction_template.format(
        question=task.question,
        contexts=format_contexts(task),
        step_format=persona.step_format_contract.strip(),
    )
    return GenRequest(
        system_prompt=read_prompt("system").strip(),
        user_prompt=user,
        temperature=config.temperature,
        max_tokens=config.max_tokens,
        seed=seed,
    )


def baseline_request(task: Task, kind: str, config: SaverConfig, seed: int | None = None) -> GenRequest:
    """Prompt for the single-answer comparison modes, ``vanilla`` or ``cot``."""
    if kind not in ("vanilla", "cot"):
        raise ValueError(f"unknown baseline {kind!r}")
    user = read_prompt(kind).format(
        question=task.question,
        contexts=format_contexts(task),
        step_format=read_prompt("step_format").strip(),
    )
    return GenRequest(read_prompt("system").strip(), user, config.temperature, config.max_tokens, seed)


def parse_answer(text: str) -> str:
    """The ANSWER line of a reply, else its last nonempty line."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    for ln in reversed(lines):
        m = _ANSWER_RE.match(ln)
        if m and m.group(1).strip():
            return m.group(1).strip()
    return lines[-1].strip() if lines else ""


def reparse_request(req: GenRequest, fault: ParseFault) -> GenRequest:
    user = read_prompt("reparse").format(original=req.user_prompt, fault=str(fault))
    return GenRequest(req.system_prompt, user, req.temperature, req.max_tokens, req.seed)


# ---------------------------------------------------------------------------
# step format

_STEP_RE = re.compile(r"^\s*\[(-?\d+)\]\s+([A-Za-z_]+)\b(.*)$")
_GROUP_RE = re.compile(r"^\s*\((premises|evidence|scope)\s*:\s*([^)]*)\)", re.IGNORECASE)
_ANSWER_RE = re.compile(r"^\s*ANSWER\s*:\s*(.*)$", re.IGNORECASE)


def _int_list(raw: str, line_no: int) -> list[int]:
    out = []
    for item in raw.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        try:
            out.append(int(item))
        except ValueError:
            raise ParseError(ParseFault(line_no, f"bad step number {item!r}")) from None
    return out


def _evidence_list(raw: str, line_no: int) -> list[EvidenceRef]:
    out = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        doc, sep, sent = item.rpartition(":")
        if not sep or not doc:
            raise ParseError(ParseFault(line_no, f"bad evidence reference {item!r}"))
        try:
            out.append((doc.strip(), int(sent)))
        except ValueError:
            raise ParseError(ParseFault(line_no, f"bad evidence reference {item!r}")) from None
    return out


def parse_step_line(line: str, line_no: int = 1) -> ReasoningStep | None:
    """Parse one ``[k] KIND (...) text`` line; None if the line is not a step line."""
    m = _STEP_RE.match(line)
    if not m:
        return None
    index = int(m.group(1))
    try:
        kind = StepKind.parse(m.group(2))
    except ValueError:
        raise ParseError(ParseFault(line_no, f"unknown step kind {m.group(2)!r}")) from None
    rest = m.group(3)
    premises: list[int] = []
    evidence: list[EvidenceRef] = []
    scope: list[int] | None = None
    while True:
        g = _GROUP_RE.match(rest)
        if not g:
            break
        name, raw = g.group(1).lower(), g.group(2)
        if name == "premises":
            premises += _int_list(raw, line_no)
        elif name == "evidence":
            evidence += _evidence_list(raw, line_no)
        else:
            scope = (scope or []) + _int_list(raw, line_no)
        rest = rest[g.end():]
    return ReasoningStep(
        index=index,
        kind=kind,
        text=rest.strip(),
        premise_refs=frozenset(premises),
        evidence_refs=frozenset(evidence),
        assumption_scope=None if scope is None else frozenset(scope),
    )


def parse_structured(text: str) -> tuple[Trajectory, str]:
    """Parse model output in the step format into (trajectory, claim).

    Lines before the first step are ignored; any other non-step line is folded
    into the preceding step's text. Raises ParseError with the offending line.
    """
    steps: list[ReasoningStep] = []
    claim: str | None = None
    lines = text.splitlines()
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        a = _ANSWER_RE.match(line)
        if a:
            claim = a.group(1).strip()
            if not claim:
                raise ParseError(ParseFault(no, "empty ANSWER"))
            continue
        step = parse_step_line(line, no)
        if step is not None:
            steps.append(step)
        elif steps and claim is None:
            last = steps[-1]
            steps[-1] = last.with_(text=(last.text + " " + line.strip()).strip())
    if not steps:
        raise ParseError(ParseFault(max(len(lines), 1), "no reasoning steps found"))
    if claim is None:
        raise ParseError(ParseFault(max(len(lines), 1), "missing ANSWER line"))
    return Trajectory(tuple(steps)), claim


def render_step(step: ReasoningStep) -> str:
    parts = [f"[{step.index}] {step.kind.value.upper()}"]
    if step.premise_refs:
        parts.append("(premises: " + ", ".join(str(p) for p in sorted(step.premise_refs)) + ")")
    if step.evidence_refs:
        parts.append("(evidence: " + ", ".join(f"{d}:{s}" for d, s in sorted(step.evidence_refs)) + ")")
    if step.assumption_scope is not None:
        parts.append("(scope: " + ", ".join(str(i) for i in sorted(step.assumption_scope)) + ")")
    parts.append(" ".join(step.text.split()))
    return " ".join(parts)


def render(trajectory: Trajectory, claim: str | None = None) -> str:
    lines = [render_step(s) for s in trajectory.steps]
    if claim is not None:
        lines.append(f"ANSWER: {claim}")
    return "\n".join(lines) + "\n"


def degraded_belief(persona_id: str, raw: str) -> Belief:
    raw = " ".join(raw.split()) or "(empty response)"
    step = ReasoningStep(1, StepKind.CLAIM, raw)
    return Belief(persona_id, raw, Trajectory((step,)), degraded=True)


def _belief_from_response(
    persona: Persona, resp: GenResponse
) -> tuple[Belief | None, ParseFault | None]:
    try:
        traj, claim = parse_structured(resp.text)
    except ParseError as exc:
        return None, exc.fault
    return Belief(persona.id, claim, traj), None


def generate_belief(
    task: Task,
    persona: Persona,
    backend: Backend,
    config: SaverConfig | None = None,
    seed: int | None = None,
) -> tuple[Belief, list[ParseFault]]:
    """Elicit one belief; one reprompt on a parse failure, then a degraded stand-in."""
    config = config or SaverConfig()
    req = belief_request(task, persona, config, seed)
    resp = backend.generate(req)
    belief, fault = _belief_from_response(persona, resp)
    if belief is not None:
        return belief, []
    assert fault is not None
    retry = backend.generate(reparse_request(req, fault))
    belief, fault2 = _belief_from_response(persona, retry)
    if belief is not None:
        return belief, [fault]
    assert fault2 is not None
    return degraded_belief(persona.id, retry.text or resp.text), [fault, fault2]


def generate_candidates(
    task: Task,
    personas: Sequence[Persona],
    backend: Backend,
    config: SaverConfig | None = None,
    seed: int | None = None,
    parallelism: int = 1,
) -> CandidateSet:
    """One belief per persona, fanned out through ``generate_batch``.

    Backend errors propagate; parse failures are retried once per persona.
    """
    config = config or SaverConfig()
    reqs = [belief_request(task, p, config, persona_seed(seed, i)) for i, p in enumerate(personas)]
    first = generate_batch(backend, reqs, parallelism)
    beliefs: list[Belief | None] = [None] * len(personas)
    faults: list[list[ParseFault]] = [[] for _ in personas]
    retry_slots: list[int] = []
    retry_reqs: list[GenRequest] = []
    for i, (persona, resp) in enumerate(zip(personas, first)):
        if isinstance(resp, BackendError):
            raise resp
        belief, fault = _belief_from_response(persona, resp)
        if belief is not None:
            beliefs[i] = belief
        else:
            assert fault is not None
            faults[i].append(fault)
            retry_slots.append(i)
            retry_reqs.append(reparse_request(reqs[i], fault))
    for i, resp in zip(retry_slots, generate_batch(backend, retry_reqs, parallelism)):
        if isinstance(resp, BackendError):
            raise resp
        belief, fault = _belief_from_response(personas[i], resp)
        if belief is None:
            assert fault is not None
            faults[i].append(fault)
            first_resp = first[i]
            assert isinstance(first_resp, GenResponse)
            belief = degraded_belief(personas[i].id, resp.text or first_resp.text)
        beliefs[i] = belief
    return CandidateSet(task.id, [b for b in beliefs if b is not None], faults)
