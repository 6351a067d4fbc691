"""Run configuration: one flat key-value file (YAML or JSON)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

VIOLATION_TYPE_NAMES = (
    "Missing_Assumption",
    "Invalid_Precondition",
    "Unjustified_Inference",
    "Circular_Reasoning",
    "Contradiction",
    "Overgeneralization",
)

DEFAULT_WEIGHTS = {
    "Missing_Assumption": 0.5,
    "Invalid_Precondition": 0.5,
    "Unjustified_Inference": 0.5,
    "Circular_Reasoning": 1.0,
    "Contradiction": 1.0,
    "Overgeneralization": 0.5,
}

DEFAULT_PERSONAS = (
    "assumption_first",
    "evidence_first",
    "stepwise_decomposition",
    "skeptic_verifier",
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicons:
    universal: frozenset[str] = frozenset({"all", "always", "every", "never"})
    negation: frozenset[str] = frozenset({"not", "no", "never"})
    hedge: frozenset[str] = frozenset(
        {"assume", "assuming", "suppose", "supposing", "if", "presumably", "hypothetically", "perhaps", "likely", "probably"}
    )


@dataclass(frozen=True)
class SaverConfig:
    k: int = 2
    beta: float = 1.0
    epsilon: float = 0.5
    lam: float = 0.1
    alpha: float = 1.0
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    q_min: float = 0.4
    r_max: int = 10
    personas: tuple[str, ...] = DEFAULT_PERSONAS
    persona_dir: str | None = None
    lexicons: Lexicons = Lexicons()
    temperature: float = 0.7
    max_tokens: int = 1024
    audit_mode: str = "rule"
    repair_mode: str = "rule"
    repair_candidates: int = 3
    model: str = "gpt-4o-mini"
    retries: int = 3
    timeout: float = 60.0

    @property
    def m(self) -> int:
        return len(self.personas)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.r_max < 1:
            raise ConfigError("r_max must be >= 1")
        if self.lam < 0 or self.alpha < 0:
            raise ConfigError("lambda and alpha must be >= 0")
        if not 0.0 <= self.q_min <= 1.0:
            raise ConfigError("q_min must lie in [0, 1]")
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")
        if self.audit_mode not in ("rule", "rule+llm"):
            raise ConfigError(f"unknown audit_mode {self.audit_mode!r}")
        if self.repair_mode not in ("rule", "llm"):
            raise ConfigError(f"unknown repair_mode {self.repair_mode!r}")
        unknown = set(self.weights) - set(VIOLATION_TYPE_NAMES)
        if unknown:
            raise ConfigError(f"unknown violation types in weights: {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("severity weights must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Lexicons):
                v = {k: sorted(getattr(v, k)) for k in ("universal", "negation", "hedge")}
            elif isinstance(v, tuple):
                v = list(v)
            out["lambda" if f.name == "lam" else f.name] = v
        return out


_ALIASES = {"lambda": "lam", "K": "k", "R_max": "r_max", "w": "weights", "w_t": "weights", "β": "beta", "ε": "epsilon", "λ": "lam", "α": "alpha"}


def config_from_mapping(data: dict[str, Any], base: SaverConfig | None = None) -> SaverConfig:
    base = base or SaverConfig()
    known = {f.name for f in fields(SaverConfig)}
    changes: dict[str, Any] = {}
    for key, value in data.items():
        name = _ALIASES.get(key, key)
        if name in ("m", "M"):
            # M is implied by the persona list; accept it only as a consistency check
            continue
        if name == "lexicons":
            lex = base.lexicons
            value = Lexicons(**{k: frozenset(value.get(k, getattr(lex, k))) for k in ("universal", "negation", "hedge")})
        elif name == "weights":
            merged = dict(base.weights)
            merged.update({str(k): float(v) for k, v in value.items()})
            value = merged
        elif name == "personas":
            value = tuple(value)
        elif name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[name] = value
    cfg = replace(base, **changes)
    m = data.get("M", data.get("m"))
    if m is not None and int(m) != cfg.m:
        raise ConfigError(f"M={m} disagrees with {cfg.m} configured personas")
    return cfg


def load_config(path: str | Path | None) -> SaverConfig:
    if path is None:
        return SaverConfig()
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return config_from_mapping(data or {})
