"""Structural embedding of a trajectory and the rubric quality score.

The embedding has four blocks:

* granularity: step count, mean tokens per step, largest premise gap
* assumptive: assumption share, share of scoped assumptions, share of ungrounded steps
* verification: verification share, share of inferences carrying evidence
* structural type: premise-DAG depth over L, mean fan-in of premise lists,
  one-hot of the premise-graph shape (chain, tree, mixed)

Counts stay unnormalized here; ``normalize_features`` z-scores them across a
candidate set before they reach the kernel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .text import coverage, tokens
from .trajectory import Belief, StepKind, Task, Trajectory, validate_trajectory

SHAPES = ("chain", "tree", "mixed")

FEATURE_NAMES = (
    "g_length",
    "g_mean_tokens",
    "g_max_premise_gap",
    "p_assumption_share",
    "p_scoped_assumption_share",
    "p_ungrounded_share",
    "v_verification_share",
    "v_evidenced_inference_share",
    "s_depth_ratio",
    "s_mean_fanin",
    "s_chain",
    "s_tree",
    "s_mixed",
)

# columns z-scored across candidates (unbounded counts)
COUNT_COLUMNS = (0, 1, 2, 9)


@dataclass(frozen=True)
class FeatureVector:
    g: tuple[float, float, float]
    p: tuple[float, float, float]
    v: tuple[float, float]
    s: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.array(self.g + self.p + self.v + self.s, dtype=float)

    @property
    def shape(self) -> str:
        return SHAPES[int(np.argmax(self.s[2:]))]


@dataclass(frozen=True)
class QualityScore:
    raw: float
    normalized: float
    checks: tuple[tuple[str, bool], ...] = ()


def _backward_edges(traj: Trajectory) -> dict[int, list[int]]:
    present = set(traj.indices())
    return {
        s.index: sorted(p for p in s.premise_refs if p in present and p < s.index)
        for s in traj.steps
    }


def _dag_depth(edges: dict[int, list[int]]) -> int:
    depth: dict[int, int] = {}
    for node in sorted(edges):
        depth[node] = max((depth[p] + 1 for p in edges[node] if p in depth), default=0)
    return max(depth.values(), default=0)


def _shape(edges: dict[int, list[int]]) -> str:
    indeg: dict[int, int] = {n: 0 for n in edges}
    for node, prem in edges.items():
        for p in prem:
            indeg[p] += 1
    max_out = max((len(p) for p in edges.values()), default=0)
    max_in = max(indeg.values(), default=0)
    if max_out <= 1 and max_in <= 1:
        return "chain"
    if max_in <= 1:
        return "tree"
    return "mixed"


def extract_features(belief: Belief | Trajectory) -> FeatureVector:
    traj = belief.trajectory if isinstance(belief, Belief) else belief
    steps = traj.steps
    L = len(steps)
    edges = _backward_edges(traj)

    gaps = [s.index - max(s.premise_refs) for s in steps if s.premise_refs]
    g = (
        float(L),
        sum(len(tokens(s.text)) for s in steps) / L,
        float(max(gaps, default=0)),
    )

    assumptions = [s for s in steps if s.kind is StepKind.ASSUMPTION]
    ungrounded = sum(1 for s in steps if not s.premise_refs and not s.evidence_refs)
    p = (
        len(assumptions) / L,
        (sum(1 for a in assumptions if a.scope) / len(assumptions)) if assumptions else 0.0,
        ungrounded / L,
    )

    inferences = [s for s in steps if s.kind is StepKind.INFERENCE]
    v = (
        sum(1 for s in steps if s.kind is StepKind.VERIFICATION) / L,
        (sum(1 for s in inferences if s.evidence_refs) / len(inferences)) if inferences else 0.0,
    )

    fanins = [len(prem) for prem in edges.values() if prem]
    shape = _shape(edges)
    s = (
        _dag_depth(edges) / L,
        (sum(fanins) / len(fanins)) if fanins else 0.0,
        *(1.0 if shape == name else 0.0 for name in SHAPES),
    )
    return FeatureVector(g, p, v, s)


def normalize_features(features: Sequence[FeatureVector]) -> np.ndarray:
    """Stack feature vectors, z-scoring the count columns across the set.

    A column with zero spread maps to zeros.
    """
    X = np.vstack([f.as_array() for f in features]) if features else np.zeros((0, len(FEATURE_NAMES)))
    if len(X) == 0:
        return X
    for c in COUNT_COLUMNS:
        col = X[:, c]
        sd = col.std()
        X[:, c] = (col - col.mean()) / sd if sd > 0 else 0.0
    return X


RUBRIC = ("has_conclusion", "claim_matches_conclusion", "schema_valid", "has_evidence", "not_degraded")


def quality_score(belief: Belief, task: Task | None = None) -> QualityScore:
    """Five pass/fail usability checks, each worth one point; normalized by 5.

    A degraded belief is capped at 0.4 whatever the checks say.
    """
    traj = belief.trajectory
    concl = traj.conclusion()
    checks = (
        ("has_conclusion", concl is not None),
        (
            "claim_matches_conclusion",
            concl is not None and coverage(belief.claim, concl.text) >= 0.5,
        ),
        ("schema_valid", not validate_trajectory(traj)),
        ("has_evidence", any(s.evidence_refs for s in traj.steps)),
        ("not_degraded", not belief.degraded),
    )
    raw = float(sum(ok for _, ok in checks))
    q = raw / len(checks)
    if belief.degraded:
        q = min(q, 0.4)
    return QualityScore(raw, q, checks)


def usability_filter(q_tilde: Sequence[float], q_min: float, k: int) -> list[int]:
    """Indices (0-based, ascending) of candidates with q >= q_min.

    When fewer than ``k`` survive, dropped candidates are restored best-first
    (ties to the lower index) until ``k`` remain or none are left.
    """
    if not 0.0 <= q_min <= 1.0:
        raise ValueError("q_min must lie in [0, 1]")
    keep = [i for i, q in enumerate(q_tilde) if q >= q_min]
    if len(keep) < k:
        dropped = sorted((i for i, q in enumerate(q_tilde) if q < q_min), key=lambda i: (-q_tilde[i], i))
        keep += dropped[: k - len(keep)]
    return sorted(keep)


def dump_features_csv(rows: Sequence[tuple[str, FeatureVector]], fh: IO[str]) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("belief",) + FEATURE_NAMES)
    for name, fv in rows:
        w.writerow((name, *(repr(float(x)) for x in fv.as_array())))
