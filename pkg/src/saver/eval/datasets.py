"""Dataset JSONL loading and benchmark adapters.

Every benchmark is normalized to one record shape:
``{id, question, contexts: [{doc_id, title, sentences}], gold_answers}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from ..trajectory import EvidenceDoc, Task

MAX_MALFORMED = 0.01

FEVER_LABELS = ("SUPPORTS", "REFUTES", "NOT ENOUGH INFO")

_SENT_RE = re.compile(r"(?<=[.!?])\s+(?=[A-Z0-9\"'(])")


class DatasetError(ValueError):
    def __init__(self, message: str, errors: list[tuple[int, str]] | None = None) -> None:
        super().__init__(message)
        self.errors = errors or []


@dataclass
class LoadResult:
    records: list[Task]
    errors: list[tuple[int, str]] = field(default_factory=list)


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_RE.split(text.strip()) if s.strip()]


def parse_record(data: Any) -> Task:
    if not isinstance(data, Mapping):
        raise ValueError("record is not a JSON object")
    for key in ("id", "question"):
        if key not in data:
            raise ValueError(f"missing {key!r}")
    if not isinstance(data["question"], str) or not data["question"].strip():
        raise ValueError("question must be a nonempty string")
    contexts = data.get("contexts", [])
    if not isinstance(contexts, list):
        raise ValueError("contexts must be a list")
    for c in contexts:
        if not isinstance(c, Mapping) or "doc_id" not in c or not isinstance(c.get("sentences"), list):
            raise ValueError("each context needs doc_id and a sentences list")
    if not isinstance(data.get("gold_answers", []), list):
        raise ValueError("gold_answers must be a list")
    return Task.from_dict(data)


def read_dataset(path: str | Path, max_malformed: float = MAX_MALFORMED) -> LoadResult:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    records: list[Task] = []
    errors: list[tuple[int, str]] = []
    total = 0
    with p.open(encoding="utf-8") as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            total += 1
            try:
                records.append(parse_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                errors.append((no, str(exc)))
    if total and len(errors) / total > max_malformed:
        raise DatasetError(
            f"{len(errors)} of {total} lines malformed in {p} (limit {max_malformed:.0%})", errors
        )
    return LoadResult(records, errors)


def load_dataset(path: str | Path, format: str = "jsonl", max_malformed: float = MAX_MALFORMED) -> list[Task]:
    """Records from a normalized JSONL file.

    Malformed lines are skipped; more than ``max_malformed`` of them aborts.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    return read_dataset(path, max_malformed).records


def write_dataset(tasks: Iterable[Task], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# adapters from the public benchmark layouts


def _docs_from_pairs(pairs: Iterable[tuple[str, list[str]]]) -> tuple[EvidenceDoc, ...]:
    return tuple(EvidenceDoc(f"d{i}", title, tuple(sents)) for i, (title, sents) in enumerate(pairs, start=1))


def from_hotpot(raw: Mapping[str, Any]) -> Task:
    """HotpotQA and 2WikiMultihopQA: ``context`` is a list of [title, sentences]."""
    pairs = [(str(title), [str(s).strip() for s in sents]) for title, sents in raw.get("context", [])]
    return Task(str(raw.get("_id", raw.get("id"))), str(raw["question"]), _docs_from_pairs(pairs), (str(raw["answer"]),))


def from_musique(raw: Mapping[str, Any]) -> Task:
    pairs = [(str(p.get("title", "")), split_sentences(str(p["paragraph_text"]))) for p in raw.get("paragraphs", [])]
    golds = [str(raw["answer"])] + [str(a) for a in raw.get("answer_aliases", [])]
    return Task(str(raw["id"]), str(raw["question"]), _docs_from_pairs(pairs), tuple(golds))


def from_fever(raw: Mapping[str, Any]) -> Task:
    """The claim becomes the question and the verdict label the gold answer."""
    label = str(raw["label"]).upper()
    if label not in FEVER_LABELS:
        raise ValueError(f"unknown FEVER label {raw['label']!r}")
    pairs = [(str(t), [str(s) for s in sents]) for t, sents in raw.get("context", [])]
    return Task(str(raw["id"]), str(raw["claim"]), _docs_from_pairs(pairs), (label,))


def from_nq(raw: Mapping[str, Any]) -> Task:
    question = raw.get("question_text", raw.get("question"))
    answers = raw.get("answers", raw.get("short_answers", []))
    context = raw.get("context", raw.get("document_text", ""))
    docs = _docs_from_pairs([(str(raw.get("title", "")), split_sentences(str(context)))]) if context else ()
    return Task(str(raw.get("example_id", raw.get("id"))), str(question), docs, tuple(str(a) for a in answers))


def from_quoref(raw: Mapping[str, Any]) -> Task:
    """SQuAD-style record: ``context`` passage and ``answers.text``."""
    answers = raw.get("answers", {})
    golds = answers.get("text", []) if isinstance(answers, Mapping) else [a["text"] for a in answers]
    docs = _docs_from_pairs([(str(raw.get("title", "")), split_sentences(str(raw["context"])))])
    return Task(str(raw["id"]), str(raw["question"]), docs, tuple(str(g) for g in golds))


ADAPTERS: dict[str, Callable[[Mapping[str, Any]], Task]] = {
    "hotpotqa": from_hotpot,
    "2wiki": from_hotpot,
    "musique": from_musique,
    "fever": from_fever,
    "nq": from_nq,
    "quoref": from_quoref,
}


def convert(raw_records: Iterable[Mapping[str, Any]], benchmark: str) -> list[Task]:
    try:
        adapter = ADAPTERS[benchmark]
    except KeyError:
        raise ValueError(f"no adapter for {benchmark!r}; known: {sorted(ADAPTERS)}") from None
    return [adapter(r) for r in raw_records]


def read_raw(path: str | Path) -> list[dict[str, Any]]:
    """A JSON array or JSONL file of raw benchmark records."""
    text = Path(path).read_text(encoding="utf-8").strip()
    if text.startswith("["):
        return json.loads(text)
    return [json.loads(line) for line in text.splitlines() if line.strip()]
