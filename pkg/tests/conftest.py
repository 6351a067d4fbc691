from __future__ import annotations

import time

import pytest

from saver.trajectory import EvidenceDoc, ReasoningStep, StepKind, Task, Trajectory

S = ReasoningStep


@pytest.fixture
def book_task() -> Task:
    return Task(
        "hb-1",
        "Which book series does The Hork-Bajir Chronicles belong to?",
        (
            EvidenceDoc(
                "d1",
                "The Hork-Bajir Chronicles",
                (
                    "The Hork-Bajir Chronicles is a companion book written by K. A. Applegate.",
                    "It tells the story of the Hork-Bajir before the invasion.",
                ),
            ),
            EvidenceDoc(
                "d2",
                "Animorphs",
                (
                    "Animorphs is a science fiction series of books by K. A. Applegate.",
                    "The series ran from 1996 to 2001.",
                ),
            ),
        ),
        ("Animorphs",),
    )


@pytest.fixture
def presupposing_trajectory() -> Trajectory:
    """The conclusion rests only on an unhedged assumption that already states it."""
    return Trajectory(
        (
            S(1, StepKind.CLAIM, "The Hork-Bajir Chronicles was written by K. A. Applegate.", evidence_refs={("d1", 0)}),
            S(2, StepKind.ASSUMPTION, "The Hork-Bajir Chronicles belongs to the Animorphs series."),
            S(3, StepKind.CONCLUSION, "The Hork-Bajir Chronicles belongs to the Animorphs series.", premise_refs={2}),
        )
    )


@pytest.fixture
def grounded_trajectory() -> Trajectory:
    return Trajectory(
        (
            S(1, StepKind.CLAIM, "The Hork-Bajir Chronicles is a companion book by K. A. Applegate.", evidence_refs={("d1", 0)}),
            S(2, StepKind.CLAIM, "Animorphs is a series of books by K. A. Applegate.", evidence_refs={("d2", 0)}),
            S(3, StepKind.INFERENCE, "The companion book belongs to the Applegate series.", premise_refs={1, 2}, evidence_refs={("d2", 0)}),
            S(4, StepKind.CONCLUSION, "The book belongs to Animorphs.", premise_refs={3}, evidence_refs={("d1", 0)}),
        )
    )


# acceptance lines collected during the run and echoed in the terminal summary
_ACCEPTANCE: list[str] = []


def pytest_sessionstart(session):
    session.config._saver_t0 = time.perf_counter()


@pytest.fixture
def acceptance_line():
    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        _ACCEPTANCE.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
        terminalreporter.write_line(line)
    elapsed = time.perf_counter() - config._saver_t0
    terminalreporter.write_line(f"whole test session took {elapsed:.1f} s")
