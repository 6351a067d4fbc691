"""Report files and the USR-per-round plot."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Mapping

from .metrics import TrajectorySummary, faithfulness_metrics

CSV_FIELDS = ("mode", "seed", "n_tasks", "n_failed", "em", "f1", "avg_viol", "vfr", "usr", "post_res", "n_repaired")


def _row(report: Mapping[str, Any]) -> dict[str, Any]:
    faith = report.get("faithfulness") or {}
    row = {k: report.get(k) for k in CSV_FIELDS[:6]}
    row.update({k: faith.get(k) for k in CSV_FIELDS[6:]})
    return row


def write_report(out: Path, report: Mapping[str, Any]) -> None:
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    with (out / "report.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in _row(report).items()})


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    with path.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def recompute(run_dir: str | Path) -> dict[str, Any]:
    """Rebuild the aggregate numbers from ``run_records.jsonl`` alone."""
    rows = read_jsonl(Path(run_dir) / "run_records.jsonl")
    done = [r for r in rows if "error" not in r]
    n = len(done)
    faith = faithfulness_metrics([TrajectorySummary.from_dict(r["final"]) for r in done]) if n else None
    return {
        "n_tasks": len(rows),
        "n_failed": len(rows) - n,
        "em": math.fsum(r["em"] for r in done) / n if n else 0.0,
        "f1": math.fsum(r["f1"] for r in done) / n if n else 0.0,
        "faithfulness": faith.to_dict() if faith else None,
    }


def format_table(report: Mapping[str, Any]) -> str:
    row = _row(report)
    width = max(len(k) for k in row)
    lines = []
    for k, v in row.items():
        if v is None:
            continue
        shown = f"{v:.4f}" if isinstance(v, float) else str(v)
        lines.append(f"{k.ljust(width)}  {shown}")
    return "\n".join(lines)


def usr_curves(audit_log: str | Path) -> dict[str, list[float]]:
    """Per-belief USR before round 1 and after each round, from an audit log."""
    curves: dict[str, list[float]] = {}
    for rec in read_jsonl(Path(audit_log)):
        if rec.get("round") == "final" and rec.get("usr_trace"):
            curves[rec["belief"]] = rec["usr_trace"]
    return curves


def plot_usr(audit_log: str | Path, svg_path: str | Path) -> int:
    """Draw mean USR against round to an SVG. Returns the number of curves."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - optional extra
        raise RuntimeError("plotting needs matplotlib: pip install 'artifact[plot]'") from exc

    curves = usr_curves(audit_log)
    if not curves:
        raise ValueError(f"no repair traces in {audit_log}")
    depth = max(len(c) for c in curves.values())
    # a converged curve stays at its last value
    padded = [c + [c[-1]] * (depth - len(c)) for c in curves.values()]
    mean = [sum(col) / len(col) for col in zip(*padded)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for c in padded:
        ax.plot(range(depth), c, color="0.8", linewidth=0.8)
    ax.plot(range(depth), mean, color="C0", linewidth=2, label="mean")
    ax.set_xlabel("round")
    ax.set_ylabel("unfaithful step rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return len(curves)
