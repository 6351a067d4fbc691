"""Offline tasks plus scripted backend replies for end-to-end mock runs.

Each task gets one reply per persona (a trajectory over the task's context,
sometimes with injected violations, sometimes with a wrong answer, sometimes
malformed on the first try), plus replies for the vanilla and cot prompts.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

from ..audit import TYPE_ORDER
from ..backend import FallbackPolicy, ScriptedFixture
from ..config import SaverConfig
from ..generation import (
    ParseError,
    baseline_request,
    belief_request,
    build_coalition,
    parse_structured,
    persona_seed,
    render,
    reparse_request,
)
from ..trajectory import Task, Trajectory
from .injection import Injection, InjectionSpec, inject, make_context, make_trajectory

INJECT_RATE = 0.5
WRONG_RATE = 0.25
MALFORMED_RATE = 0.1


def task_seed(seed: int, task_id: str) -> int:
    """Per-task seed, stable across processes and task order."""
    return zlib.crc32(f"{seed}:{task_id}".encode("utf-8"))


def task_rng(seed: int, task_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(task_id.encode("utf-8"))])


def _variant(
    task: Task, sents: Sequence[Sequence[str]], rng: np.random.Generator, wrong: bool
) -> tuple[Trajectory, str]:
    answer = list(sents[7][:2]) if wrong else list(sents[6][:2])
    base = make_trajectory(sents, rng, answer=answer)
    if rng.random() < INJECT_RATE:
        t = TYPE_ORDER[int(rng.integers(len(TYPE_ORDER)))]
        base = inject(task, base, InjectionSpec((Injection(t),)), rng, task.id).trajectory
    return base, " ".join(answer)


def synthetic_tasks(n: int, seed: int = 0) -> tuple[list[Task], dict[str, list[list[str]]]]:
    rng = np.random.default_rng(seed)
    tasks, words = [], {}
    for i in range(n):
        task, sents = make_context(rng, f"syn-{i:04d}")
        tasks.append(task)
        words[task.id] = sents
    return tasks, words


def build_fixture(
    n_tasks: int, seed: int = 0, config: SaverConfig | None = None
) -> tuple[list[Task], ScriptedFixture]:
    """Tasks and a fixture answering every request a run with ``seed`` makes."""
    config = config or SaverConfig()
    personas = build_coalition(config)
    tasks, words = synthetic_tasks(n_tasks, seed)
    fx = ScriptedFixture(fallback=FallbackPolicy.ERROR)
    for task in tasks:
        sents = words[task.id]
        rng = task_rng(seed + 1, task.id)
        ts = task_seed(seed, task.id)
        for i, persona in enumerate(personas):
            traj, claim = _variant(task, sents, rng, rng.random() < WRONG_RATE)
            req = belief_request(task, persona, config, persona_seed(ts, i))
            good = render(traj, claim)
            if rng.random() < MALFORMED_RATE:
                bad = render(traj)  # no ANSWER line
                try:
                    parse_structured(bad)
                except ParseError as exc:
                    fx.add(req, bad)
                    fx.add(reparse_request(req, exc.fault), good)
                    continue
            fx.add(req, good)
        wrong = rng.random() < WRONG_RATE
        answer = " ".join(sents[7][:2] if wrong else sents[6][:2])
        fx.add(baseline_request(task, "vanilla", config, ts), f"ANSWER: {answer}\n")
        traj, claim = _variant(task, sents, rng, rng.random() < WRONG_RATE)
        fx.add(baseline_request(task, "cot", config, ts), render(traj, claim))
    return tasks, fx
