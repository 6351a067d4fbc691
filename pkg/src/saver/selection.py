"""Quality-weighted diversity kernel and exact k-DPP sampling.

Candidate indices are 0-based throughout this module.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import FeatureVector

DET_FLOOR = 1e-12
EIG_FLOOR = 1e-12
ENUMERATION_LIMIT = 10_000


@dataclass(frozen=True)
class KernelMatrix:
    entries: np.ndarray
    beta: float
    features: np.ndarray
    q_tilde: tuple[float, ...]
    sigma2: float = 1.0

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    def to_dict(self) -> dict:
        return {
            "entries": self.entries.tolist(),
            "beta": self.beta,
            "sigma2": self.sigma2,
            "q_tilde": list(self.q_tilde),
        }


@dataclass(frozen=True)
class SubsetSample:
    indices: tuple[int, ...]
    log_det: float
    rng_seed: int | None = None
    degenerate_kernel: bool = False
    method: str = "enumeration"


def _as_matrix(features: Sequence[FeatureVector] | np.ndarray) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = np.atleast_2d(np.asarray(features, dtype=float))
    else:
        X = np.vstack([f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, float) for f in features])
    return X


def build_kernel(
    features: Sequence[FeatureVector] | np.ndarray,
    q_tilde: Sequence[float],
    beta: float = 1.0,
) -> KernelMatrix:
    """I_ij = exp(beta q_i) exp(beta q_j) exp(-|phi_i - phi_j|^2 / (2 sigma^2)).

    sigma^2 is the median of the full M x M squared-distance matrix (diagonal
    zeros included), or 1 when that median is 0.
    """
    X = _as_matrix(features)
    q = np.asarray(q_tilde, dtype=float)
    M = X.shape[0]
    if M < 1 or q.shape != (M,):
        raise ValueError(f"need M >= 1 feature rows and matching q_tilde, got {X.shape} / {q.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(q)) and math.isfinite(beta)):
        raise ValueError("non-finite feature, quality or beta value")
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    sigma2 = float(np.median(d2))
    if sigma2 <= 0.0:
        sigma2 = 1.0
    rbf = np.exp(-d2 / (2.0 * sigma2))
    w = np.exp(beta * q)
    I = w[:, None] * rbf * w[None, :]
    I = 0.5 * (I + I.T)
    return KernelMatrix(I, float(beta), X, tuple(float(v) for v in q), sigma2)


def _entries(kernel: KernelMatrix | np.ndarray) -> np.ndarray:
    return kernel.entries if isinstance(kernel, KernelMatrix) else np.asarray(kernel, dtype=float)


def subset_determinants(kernel: KernelMatrix | np.ndarray, k: int) -> tuple[list[tuple[int, ...]], np.ndarray]:
    """All k-subsets in lexicographic order with their principal-minor determinants."""
    L = _entries(kernel)
    M = L.shape[0]
    if not 1 <= k <= M:
        raise ValueError(f"need 1 <= K <= M, got K={k}, M={M}")
    subsets = list(itertools.combinations(range(M), k))
    dets = np.array([np.linalg.det(L[np.ix_(S, S)]) for S in subsets], dtype=float)
    return subsets, dets


def subset_probabilities(kernel: KernelMatrix | np.ndarray, k: int) -> dict[tuple[int, ...], float]:
    """Exact k-DPP distribution by enumeration."""
    subsets, dets = subset_determinants(kernel, k)
    dets = np.clip(dets, 0.0, None)
    total = dets.sum()
    if total <= 0:
        raise ValueError("degenerate kernel: every subset determinant vanishes")
    return {S: float(d / total) for S, d in zip(subsets, dets)}


def _fallback(kernel: KernelMatrix | np.ndarray, k: int, q_tilde: Sequence[float] | None) -> tuple[int, ...]:
    M = _entries(kernel).shape[0]
    if q_tilde is None:
        q_tilde = kernel.q_tilde if isinstance(kernel, KernelMatrix) else [0.0] * M
    order = sorted(range(M), key=lambda i: (-q_tilde[i], i))
    return tuple(sorted(order[:k]))


def _log_det(L: np.ndarray, S: Sequence[int]) -> float:
    if not S:
        return 0.0
    sign, ld = np.linalg.slogdet(L[np.ix_(S, S)])
    return float(ld) if sign > 0 else float("-inf")


def _seed_of(rng: np.random.Generator | int | None) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def kdpp_sample(
    kernel: KernelMatrix | np.ndarray,
    k: int,
    rng: np.random.Generator | int | None = None,
    q_tilde: Sequence[float] | None = None,
) -> SubsetSample:
    """Draw one size-k subset with probability proportional to det(I_S).

    Exact enumeration when C(M, k) <= 10,000, otherwise the eigendecomposition
    sampler. If every subset determinant is <= 1e-12 the top-k candidates by
    quality are returned instead (flagged ``degenerate_kernel``).
    """
    L = _entries(kernel)
    M = L.shape[0]
    if not 1 <= k <= M:
        raise ValueError(f"need 1 <= K <= M, got K={k}, M={M}")
    gen, seed = _seed_of(rng)
    if k == M:
        S = tuple(range(M))
        return SubsetSample(S, _log_det(L, S), seed)
    if math.comb(M, k) > ENUMERATION_LIMIT:
        return eig_kdpp(kernel, k, gen if seed is None else seed, q_tilde)
    subsets, dets = subset_determinants(L, k)
    if np.all(dets <= DET_FLOOR):
        S = _fallback(kernel, k, q_tilde)
        return SubsetSample(S, _log_det(L, S), seed, degenerate_kernel=True)
    p = np.clip(dets, 0.0, None)
    p /= p.sum()
    j = int(gen.choice(len(subsets), p=p))
    S = subsets[j]
    return SubsetSample(S, float(math.log(dets[j])), seed)


def enumeration_draws(
    kernel: KernelMatrix | np.ndarray, k: int, rng: np.random.Generator | int | None, n: int
) -> list[tuple[int, ...]]:
    """n independent exact draws by enumeration (vectorized categorical sampling)."""
    gen, _ = _seed_of(rng)
    probs = subset_probabilities(kernel, k)
    subsets = list(probs)
    idx = gen.choice(len(subsets), size=n, p=np.array([probs[S] for S in subsets]))
    return [subsets[i] for i in idx]


def elementary_symmetric(lam: np.ndarray, k: int) -> np.ndarray:
    """E[l, n] = e_l(lam_1..lam_n) for l <= k, n <= N."""
    N = len(lam)
    E = np.zeros((k + 1, N + 1))
    E[0, :] = 1.0
    for l in range(1, k + 1):
        for n in range(1, N + 1):
            E[l, n] = E[l, n - 1] + lam[n - 1] * E[l - 1, n - 1]
    return E


def _select_eigvecs(lam: np.ndarray, E: np.ndarray, k: int, gen: np.random.Generator) -> list[int]:
    chosen = []
    remaining = k
    for n in range(len(lam), 0, -1):
        if remaining == 0:
            break
        if n == remaining:
            marg = 1.0
        else:
            marg = lam[n - 1] * E[remaining - 1, n - 1] / E[remaining, n]
        if gen.random() < marg:
            chosen.append(n - 1)
            remaining -= 1
    return chosen


def _project_sample(V: np.ndarray, gen: np.random.Generator) -> list[int]:
    """Sequential item sampling from the projection DPP spanned by V's columns."""
    V = V.copy()
    items: list[int] = []
    while V.shape[1] > 0:
        P = np.sum(V * V, axis=1)
        P = np.clip(P, 0.0, None)
        P /= P.sum()
        i = int(gen.choice(len(P), p=P))
        items.append(i)
        j = int(np.argmax(np.abs(V[i])))
        Vj = V[:, j].copy()
        V = V - np.outer(Vj, V[i] / Vj[i])
        V = np.delete(V, j, axis=1)
        if V.shape[1] > 0:
            V, _ = np.linalg.qr(V)
    return sorted(items)


def _project_sample_batch(V0: np.ndarray, n: int, gen: np.random.Generator) -> np.ndarray:
    """``_project_sample`` run on n independent copies of V0 at once."""
    M, r = V0.shape
    V = np.broadcast_to(V0, (n, M, r)).copy()
    picks = np.empty((n, r), dtype=int)
    ar = np.arange(n)
    for t in range(r):
        P = np.clip(np.einsum("bmr,bmr->bm", V, V), 0.0, None)
        P /= P.sum(axis=1, keepdims=True)
        u = gen.random(n)[:, None]
        i = np.minimum((np.cumsum(P, axis=1) < u).sum(axis=1), M - 1)
        picks[:, t] = i
        row = V[ar, i, :]
        j = np.argmax(np.abs(row), axis=1)
        Vj = V[ar, :, j]
        V = V - Vj[:, :, None] * (row / row[ar, j][:, None])[:, None, :]
        width = V.shape[2]
        if width == 1:
            break
        keep = np.ones((n, width), dtype=bool)
        keep[ar, j] = False
        V = V[keep.reshape(n, 1, width).repeat(M, axis=1)].reshape(n, M, width - 1)
        V, _ = np.linalg.qr(V)
    return np.sort(picks, axis=1)


@dataclass
class EigKDPP:
    """Two-phase exact k-DPP sampler prepared once for a kernel."""

    kernel: np.ndarray
    k: int
    lam: np.ndarray = field(init=False)
    vecs: np.ndarray = field(init=False)
    E: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        lam, vecs = np.linalg.eigh(0.5 * (self.kernel + self.kernel.T))
        lam = np.where(lam < EIG_FLOOR, 0.0, lam)
        self.lam, self.vecs = lam, vecs
        self.E = elementary_symmetric(lam, self.k)

    @property
    def degenerate(self) -> bool:
        return int(np.count_nonzero(self.lam)) < self.k or self.E[self.k, -1] <= DET_FLOOR

    def draw(self, gen: np.random.Generator) -> tuple[int, ...]:
        cols = _select_eigvecs(self.lam, self.E, self.k, gen)
        return tuple(_project_sample(self.vecs[:, cols], gen))

    def draw_many(self, gen: np.random.Generator, n: int) -> np.ndarray:
        """n draws as an (n, k) array of sorted item indices, vectorized across draws."""
        N, k = len(self.lam), self.k
        remaining = np.full(n, k)
        chosen = np.zeros((n, N), dtype=bool)
        for m in range(N, 0, -1):
            r = remaining
            active = r > 0
            safe_r = np.maximum(r, 1)
            denom = self.E[safe_r, m]
            with np.errstate(divide="ignore", invalid="ignore"):
                marg = np.where(m == r, 1.0, self.lam[m - 1] * self.E[safe_r - 1, m - 1] / denom)
            take = active & (gen.random(n) < marg)
            chosen[take, m - 1] = True
            remaining = remaining - take
        out = np.empty((n, k), dtype=int)
        keys = [tuple(np.flatnonzero(row)) for row in chosen]
        groups: dict[tuple[int, ...], list[int]] = {}
        for b, key in enumerate(keys):
            groups.setdefault(key, []).append(b)
        for key in sorted(groups):
            rows = np.array(groups[key])
            out[rows] = _project_sample_batch(self.vecs[:, list(key)], len(rows), gen)
        return out


def eig_kdpp(
    kernel: KernelMatrix | np.ndarray,
    k: int,
    rng: np.random.Generator | int | None = None,
    q_tilde: Sequence[float] | None = None,
) -> SubsetSample:
    """Exact k-DPP draw via eigendecomposition and elementary symmetric polynomials."""
    L = _entries(kernel)
    M = L.shape[0]
    if not 1 <= k <= M:
        raise ValueError(f"need 1 <= K <= M, got K={k}, M={M}")
    gen, seed = _seed_of(rng)
    sampler = EigKDPP(L, k)
    if sampler.degenerate:
        S = _fallback(kernel, k, q_tilde)
        return SubsetSample(S, _log_det(L, S), seed, degenerate_kernel=True, method="eig")
    S = sampler.draw(gen)
    return SubsetSample(S, _log_det(L, S), seed, method="eig")


def eig_draws(
    kernel: KernelMatrix | np.ndarray, k: int, rng: np.random.Generator | int | None, n: int
) -> list[tuple[int, ...]]:
    gen, _ = _seed_of(rng)
    sampler = EigKDPP(_entries(kernel), k)
    if sampler.degenerate:
        raise ValueError("degenerate kernel")
    return [tuple(int(i) for i in row) for row in sampler.draw_many(gen, n)]


def selection_dump(kernel: KernelMatrix, k: int) -> dict:
    """Kernel plus exact subset probabilities, for --dump-selection."""
    out = kernel.to_dict()
    try:
        probs = subset_probabilities(kernel, k)
        out["subset_probabilities"] = [[list(S), p] for S, p in probs.items()]
    except ValueError:
        out["subset_probabilities"] = None
    return out
