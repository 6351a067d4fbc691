"""Answer accuracy and faithfulness metrics."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Mapping, Sequence

from ..text import normalize_answer


def _f1(pred: str, gold: str) -> float:
    p, g = pred.split(), gold.split()
    if not p or not g:
        return float(p == g)
    common = sum((Counter(p) & Counter(g)).values())
    if common == 0:
        return 0.0
    precision, recall = common / len(p), common / len(g)
    return 2 * precision * recall / (precision + recall)


def em_f1(prediction: str, golds: Sequence[str]) -> tuple[int, float]:
    """Exact match and best token F1 against any gold answer, after normalization."""
    if not golds:
        raise ValueError("at least one gold answer is required")
    pred = normalize_answer(prediction)
    normed = [normalize_answer(g) for g in golds]
    em = int(any(pred == g for g in normed))
    return em, max(_f1(pred, g) for g in normed)


@dataclass(frozen=True)
class TrajectorySummary:
    """What the faithfulness metrics need from one committed trajectory.

    ``violations`` and ``flagged`` describe the final trajectory;
    ``repair_rounds`` counts loop rounds that applied an edit.
    """

    L: int
    violations: int
    flagged: int
    repair_rounds: int = 0

    def __post_init__(self) -> None:
        if self.L < 1:
            raise ValueError("trajectory length must be >= 1")
        if not 0 <= self.flagged <= self.L:
            raise ValueError("flagged steps must lie in [0, L]")
        if self.violations < self.flagged:
            raise ValueError("each flagged step carries at least one violation")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrajectorySummary":
        flagged = data["flagged"]
        return cls(
            L=int(data["L"]),
            violations=int(data["violations"]),
            flagged=len(flagged) if isinstance(flagged, (list, tuple, set)) else int(flagged),
            repair_rounds=int(data.get("repair_rounds", 0)),
        )


@dataclass(frozen=True)
class FaithfulnessReport:
    """Run-level faithfulness.

    avg_viol: mean final violation count; vfr: share of violation-free
    trajectories; usr: mean share of distinct flagged steps; post_res: mean
    final violation count (a count per trajectory, not a ratio) over
    trajectories that went through at least one repair round, 0.0 if none did.
    """

    avg_viol: float
    vfr: float
    usr: float
    post_res: float
    n_trajectories: int
    n_repaired: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def faithfulness_metrics(logs: Iterable[TrajectorySummary | Mapping[str, Any]]) -> FaithfulnessReport:
    # fsum keeps the means independent of trajectory order
    rows = [r if isinstance(r, TrajectorySummary) else TrajectorySummary.from_dict(r) for r in logs]
    if not rows:
        raise ValueError("faithfulness metrics need at least one trajectory")
    n = len(rows)
    repaired = [r for r in rows if r.repair_rounds > 0]
    return FaithfulnessReport(
        avg_viol=math.fsum(r.violations for r in rows) / n,
        vfr=sum(1 for r in rows if r.violations == 0) / n,
        usr=math.fsum(r.flagged / r.L for r in rows) / n,
        post_res=(math.fsum(r.violations for r in repaired) / len(repaired)) if repaired else 0.0,
        n_trajectories=n,
        n_repaired=len(repaired),
    )
