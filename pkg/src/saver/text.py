"""Small text helpers shared by the parser, detectors and repair templates."""

from __future__ import annotations

import re
import string

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)?")
_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def tokens(text: str) -> list[str]:
    """Lowercased word tokens with punctuation stripped."""
    return _TOKEN_RE.findall(text.lower())


def token_set(text: str) -> set[str]:
    return set(tokens(text))


def overlap(a: str, b: str) -> int:
    """Number of distinct tokens shared by two strings."""
    return len(token_set(a) & token_set(b))


def coverage(part: str, whole: str) -> float:
    """Fraction of the distinct tokens of ``part`` that appear in ``whole``."""
    p = token_set(part)
    if not p:
        return 0.0
    return len(p & token_set(whole)) / len(p)


def normalize_answer(text: str) -> str:
    """SQuAD-style answer normalization: lowercase, drop punctuation and articles, squeeze spaces."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


def contains_any(text: str, lexicon: frozenset[str] | set[str]) -> bool:
    return any(tok in lexicon for tok in tokens(text))
