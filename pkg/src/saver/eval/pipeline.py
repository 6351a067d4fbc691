"""End-to-end runs: per task, generate, select, audit, repair, commit, score.

Modes:

* ``saver``: persona coalition, usability filter, k-DPP selection, audit-repair
  loop for each selected belief, commitment.
* ``cot``: one reasoned answer, audited but not repaired.
* ``vanilla``: one direct answer; its trajectory is a single unreferenced
  inference, so the audit always flags it.

Tasks run on a bounded worker pool; every log line and report is written by
the calling thread in task order, so mock runs are byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from ..audit import audit, flagged_steps, profile
from ..backend import Backend, BackendError
from ..config import SaverConfig
from ..features import extract_features, normalize_features, quality_score, usability_filter
from ..generation import (
    ParseError,
    Persona,
    baseline_request,
    build_coalition,
    degraded_belief,
    generate_candidates,
    parse_answer,
    parse_structured,
    reparse_request,
)
from ..repair import RepairOutcome, audit_repair_loop, commit, commit_score
from ..selection import build_kernel, kdpp_sample, selection_dump
from ..trajectory import (
    Belief,
    ReasoningStep,
    StepKind,
    Task,
    Trajectory,
    assessment_from_flags,
    unfaithfulness_rate,
)
from .metrics import FaithfulnessReport, TrajectorySummary, em_f1, faithfulness_metrics
from .synthetic import task_rng, task_seed

log = logging.getLogger(__name__)

MODES = ("saver", "vanilla", "cot")
MAX_FAILED = 0.05


def _dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


class JsonlWriter:
    """Append-only JSONL file guarded by a lock."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("", encoding="utf-8")

    def append(self, record: Mapping[str, Any]) -> None:
        line = _dumps(record) + "\n"
        with self._lock, self.path.open("a", encoding="utf-8") as fh:
            fh.write(line)


@dataclass
class TaskResult:
    task_id: str
    record: dict[str, Any]
    audit_records: list[dict[str, Any]] = field(default_factory=list)
    memory: dict[str, Any] | None = None
    selection: dict[str, Any] | None = None
    summary: TrajectorySummary | None = None
    em: int = 0
    f1: float = 0.0
    error: str | None = None


@dataclass
class RunResult:
    mode: str
    seed: int
    results: list[TaskResult]
    report: dict[str, Any]

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.results if r.error is not None)

    @property
    def ok(self) -> bool:
        return self.n_failed <= MAX_FAILED * len(self.results)


def _summary(traj: Trajectory, instances: Sequence[Any], repair_rounds: int) -> TrajectorySummary:
    return TrajectorySummary(traj.L, len(instances), len(flagged_steps(instances)), repair_rounds)


def _score(task: Task, claim: str) -> tuple[int, float]:
    if not task.gold_answers:
        return 0, 0.0
    return em_f1(claim, task.gold_answers)


def _u_rate(traj: Trajectory, instances: Sequence[Any], epsilon: float) -> float:
    return unfaithfulness_rate(assessment_from_flags(traj, flagged_steps(instances), epsilon))


# ---------------------------------------------------------------------------
# per-task runners


def run_saver_task(
    task: Task,
    personas: Sequence[Persona],
    backend: Backend,
    config: SaverConfig,
    seed: int,
    dump_selection: bool = False,
) -> TaskResult:
    ts = task_seed(seed, task.id)
    cands = generate_candidates(task, personas, backend, config, seed=ts)
    beliefs = cands.beliefs
    q = [quality_score(b, task).normalized for b in beliefs]
    keep = usability_filter(q, config.q_min, config.k)
    k = min(config.k, len(keep))
    X = normalize_features([extract_features(beliefs[i]) for i in keep])
    kernel = build_kernel(X, [q[i] for i in keep], config.beta)
    sample = kdpp_sample(kernel, k, task_rng(seed, task.id), [q[i] for i in keep])
    selected = [keep[j] for j in sample.indices]

    audit_records: list[list[dict[str, Any]]] = [[] for _ in selected]

    def loop(slot: int) -> RepairOutcome:
        i = selected[slot]
        bid = f"{task.id}/{beliefs[i].persona_id}"

        def log_round(rec: dict[str, Any]) -> None:
            audit_records[slot].append({"task_id": task.id, "belief": bid, **rec})

        return audit_repair_loop(
            beliefs[i],
            task,
            backend,
            r_max=config.r_max,
            lam=config.lam,
            audit_mode=config.audit_mode,
            repair_mode=config.repair_mode,
            n=config.repair_candidates,
            lexicons=config.lexicons,
            log_round=log_round,
        )

    if len(selected) > 1:
        with ThreadPoolExecutor(max_workers=len(selected)) as pool:
            outcomes = list(pool.map(loop, range(len(selected))))
    else:
        outcomes = [loop(0)]

    repaired = []
    for i, out in zip(selected, outcomes):
        b = beliefs[i]
        rb = Belief(b.persona_id, b.claim, out.trajectory, b.degraded)
        repaired.append((rb, out.profile, quality_score(rb, task).normalized))
    chosen = commit(repaired, config.alpha, config.weights)
    rb, prof, q_rep = repaired[chosen]
    out = outcomes[chosen]
    score = commit_score(q_rep, prof, config.alpha, config.weights)
    bid = f"{task.id}/{rb.persona_id}"
    em, f1 = _score(task, rb.claim)
    summary = _summary(out.trajectory, out.residual, out.repair_rounds)

    flat_audit = []
    for slot, recs in enumerate(audit_records):
        b = beliefs[selected[slot]]
        o = outcomes[slot]
        flat_audit.extend(recs)
        flat_audit.append(
            {
                "task_id": task.id,
                "belief": f"{task.id}/{b.persona_id}",
                "round": "final",
                "rounds_used": o.rounds_used,
                "converged": o.converged,
                "stalled": o.stalled,
                "instances": [v.to_dict() for v in o.residual],
                "usr_trace": o.usr_trace,
            }
        )

    record = {
        "task_id": task.id,
        "mode": "saver",
        "candidates": [
            {
                "persona": b.persona_id,
                "claim": b.claim,
                "q": q[i],
                "degraded": b.degraded,
                "L": b.trajectory.L,
                "parse_faults": [str(f) for f in cands.parse_faults[i]] if i < len(cands.parse_faults) else [],
            }
            for i, b in enumerate(beliefs)
        ],
        "kept": keep,
        "selected": selected,
        "selection": {
            "method": sample.method,
            "log_det": sample.log_det,
            "degenerate_kernel": sample.degenerate_kernel,
            "sigma2": kernel.sigma2,
        },
        "loops": [
            {
                "persona": beliefs[i].persona_id,
                "initial_violations": len(o.initial),
                "residual": len(o.residual),
                "rounds_used": o.rounds_used,
                "repair_rounds": o.repair_rounds,
                "converged": o.converged,
                "stalled": o.stalled,
                "q_repaired": qr,
                "profile": o.profile.to_dict(),
            }
            for i, o, (_, _, qr) in zip(selected, outcomes, repaired)
        ],
        "committed": {"index": selected[chosen], "belief": bid, "claim": rb.claim, "score": score},
        "final": {
            "L": summary.L,
            "violations": summary.violations,
            "flagged": summary.flagged,
            "repair_rounds": summary.repair_rounds,
            "u_rate": _u_rate(out.trajectory, out.residual, config.epsilon),
        },
        "em": em,
        "f1": f1,
    }
    memory = {
        "task_id": task.id,
        "belief_id": bid,
        "claim": rb.claim,
        "trajectory": rb.trajectory.to_dict(),
        "rounds_used": out.rounds_used,
        "profile": prof.to_dict(),
        "score": score,
    }
    sel = None
    if dump_selection:
        sel = {"task_id": task.id, "kept": keep, "selected": selected, **selection_dump(kernel, k)}
    return TaskResult(task.id, record, flat_audit, memory, sel, summary, em, f1)


def vanilla_belief(claim: str) -> Belief:
    """A direct answer as a belief: one inference with nothing behind it."""
    claim = claim or "(no answer)"
    return Belief("vanilla", claim, Trajectory((ReasoningStep(1, StepKind.INFERENCE, claim),)))


def run_baseline_task(task: Task, kind: str, backend: Backend, config: SaverConfig, seed: int) -> TaskResult:
    ts = task_seed(seed, task.id)
    req = baseline_request(task, kind, config, ts)
    text = backend.generate(req).text
    faults: list[str] = []
    if kind == "vanilla":
        belief = vanilla_belief(parse_answer(text))
    else:
        try:
            traj, claim = parse_structured(text)
            belief = Belief("cot", claim, traj)
        except ParseError as exc:
            faults.append(str(exc.fault))
            retry = backend.generate(reparse_request(req, exc.fault)).text
            try:
                traj, claim = parse_structured(retry)
                belief = Belief("cot", claim, traj)
            except ParseError as exc2:
                faults.append(str(exc2.fault))
                belief = degraded_belief("cot", retry or text)
    found = audit(belief.trajectory, task, config.audit_mode, backend, config.lexicons)
    em, f1 = _score(task, belief.claim)
    summary = _summary(belief.trajectory, found, 0)
    bid = f"{task.id}/{belief.persona_id}"
    record = {
        "task_id": task.id,
        "mode": kind,
        "claim": belief.claim,
        "degraded": belief.degraded,
        "parse_faults": faults,
        "final": {
            "L": summary.L,
            "violations": summary.violations,
            "flagged": summary.flagged,
            "repair_rounds": 0,
            "u_rate": _u_rate(belief.trajectory, found, config.epsilon),
        },
        "em": em,
        "f1": f1,
    }
    audits = [
        {"task_id": task.id, "belief": bid, "round": 1, "instances": [v.to_dict() for v in found]},
    ]
    return TaskResult(task.id, record, audits, None, None, summary, em, f1)


# ---------------------------------------------------------------------------
# runs


def aggregate(results: Sequence[TaskResult], mode: str, seed: int, config: SaverConfig) -> dict[str, Any]:
    done = [r for r in results if r.error is None]
    n = len(done)
    faith: FaithfulnessReport | None = (
        faithfulness_metrics([r.summary for r in done if r.summary is not None]) if n else None
    )
    return {
        "mode": mode,
        "seed": seed,
        "n_tasks": len(results),
        "n_failed": len(results) - n,
        "failed": [{"task_id": r.task_id, "error": r.error} for r in results if r.error is not None],
        "em": math.fsum(r.em for r in done) / n if n else 0.0,
        "f1": math.fsum(r.f1 for r in done) / n if n else 0.0,
        "faithfulness": faith.to_dict() if faith else None,
        "post_res_unit": "mean residual violations per repaired trajectory",
        "config": config.to_dict(),
    }


def run_pipeline(
    tasks: Iterable[Task],
    config: SaverConfig,
    backend: Backend,
    mode: str = "saver",
    seed: int = 0,
    parallel: int = 1,
    out_dir: str | Path | None = None,
    dump_selection: bool = False,
) -> RunResult:
    """Run every task and, when ``out_dir`` is given, write logs and reports there.

    A task that raises is recorded as failed; the run is not ``ok`` when more
    than 5% of tasks fail.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if parallel < 1:
        raise ValueError("parallel must be >= 1")
    tasks = list(tasks)
    personas = build_coalition(config) if mode == "saver" else []

    def one(task: Task) -> TaskResult:
        try:
            if mode == "saver":
                return run_saver_task(task, personas, backend, config, seed, dump_selection)
            return run_baseline_task(task, mode, backend, config, seed)
        except (BackendError, ValueError, RuntimeError) as exc:
            log.error("task %s failed: %s", task.id, exc)
            return TaskResult(task.id, {"task_id": task.id, "mode": mode, "error": str(exc)}, error=str(exc))

    if parallel == 1:
        results = [one(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(one, tasks))

    report = aggregate(results, mode, seed, config)
    if out_dir is not None:
        write_run(Path(out_dir), results, report, dump_selection)
    return RunResult(mode, seed, results, report)


def write_run(out: Path, results: Sequence[TaskResult], report: Mapping[str, Any], dump_selection: bool = False) -> None:
    from .reports import write_report

    out.mkdir(parents=True, exist_ok=True)
    records = JsonlWriter(out / "run_records.jsonl")
    audits = JsonlWriter(out / "audit_log.jsonl")
    memory = JsonlWriter(out / "memory.jsonl")
    selection = JsonlWriter(out / "selection.jsonl") if dump_selection else None
    for r in results:
        records.append(r.record)
        for a in r.audit_records:
            audits.append(a)
        if r.memory is not None:
            memory.append(r.memory)
        if selection is not None and r.selection is not None:
            selection.append(r.selection)
    write_report(out, report)


# ---------------------------------------------------------------------------
# injection corpus runs


@dataclass
class CorpusTrace:
    case_id: str
    slice: str
    usr_trace: list[float]
    violation_trace: list[int]
    loss_traces: list[list[int]]
    converged: bool
    identical: bool
    summary: TrajectorySummary


def evaluate_corpus(
    cases: Iterable[Any],
    repair: bool = True,
    config: SaverConfig | None = None,
) -> tuple[dict[str, FaithfulnessReport], list[CorpusTrace]]:
    """Per-slice faithfulness on the injection corpus, with or without repair.

    Without repair each trajectory is audited once, which is what the ``cot``
    mode does with its single answer.
    """
    config = config or SaverConfig()
    traces: list[CorpusTrace] = []
    for case in cases:
        belief = Belief("corpus", "n/a", case.trajectory)
        if repair:
            out = audit_repair_loop(
                belief, case.task, None, config.r_max, config.lam, "rule", "rule", config.repair_candidates, config.lexicons
            )
            final, residual, rounds = out.trajectory, out.residual, out.repair_rounds
            usr = out.usr_trace
            vt = out.violation_trace
            losses = [r["loss_trace"] for r in out.rounds]
            converged = out.converged
        else:
            residual = audit(case.trajectory, case.task, "rule", None, config.lexicons)
            final, rounds = case.trajectory, 0
            usr = [len(flagged_steps(residual)) / final.L]
            vt, losses, converged = [len(residual)], [], not residual
        traces.append(
            CorpusTrace(
                case.case_id,
                case.slice,
                usr,
                vt,
                losses,
                converged,
                final == case.trajectory,
                _summary(final, residual, rounds),
            )
        )
    slices: dict[str, list[TrajectorySummary]] = {}
    for t in traces:
        slices.setdefault(t.slice, []).append(t.summary)
    return {s: faithfulness_metrics(rows) for s, rows in sorted(slices.items())}, traces


def corpus_profile_counts(cases: Iterable[Any]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for c in cases:
        for k, v in profile(audit(c.trajectory, c.task)).to_dict().items():
            counts[k] = counts.get(k, 0) + v
    return counts
