"""Command line entry point: ``saver {run,audit,inject,report,plot,synth,convert}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .audit import audit, profile
from .backend import BackendError, FallbackPolicy, HttpBackend, MockBackend, ScriptedFixture
from .config import ConfigError, load_config
from .trajectory import Task, Trajectory

log = logging.getLogger("saver")


def _load_json(path: str) -> object:
    text = Path(path).read_text(encoding="utf-8")
    return yaml.safe_load(text) if path.endswith((".yaml", ".yml")) else json.loads(text)


def cmd_run(args: argparse.Namespace) -> int:
    from .eval.datasets import DatasetError, load_dataset
    from .eval.pipeline import run_pipeline
    from .eval.reports import format_table

    config = load_config(args.config)
    try:
        tasks = load_dataset(args.dataset)
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.limit is not None:
        tasks = tasks[: args.limit]
    if args.backend == "mock":
        if not args.fixture:
            print("error: --backend mock needs --fixture", file=sys.stderr)
            return 2
        backend = MockBackend(ScriptedFixture.load(args.fixture, FallbackPolicy(args.fallback)))
    else:
        try:
            backend = HttpBackend(config.model, retries=config.retries, timeout=config.timeout)
        except BackendError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
    result = run_pipeline(tasks, config, backend, args.mode, args.seed, args.parallel, args.out, args.dump_selection)
    print(format_table(result.report))
    if not result.ok:
        print(f"error: {result.n_failed} of {len(tasks)} tasks failed", file=sys.stderr)
        return 1
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    data = _load_json(args.trajectory)
    assert isinstance(data, dict)
    traj = Trajectory.from_dict(data["trajectory"] if "trajectory" in data else data)
    if args.task:
        task = Task.from_dict(_load_json(args.task))  # type: ignore[arg-type]
    elif "task" in data:
        task = Task.from_dict(data["task"])
    else:
        task = Task("adhoc", "(none)")
    config = load_config(args.config)
    found = audit(traj, task, "rule", None, config.lexicons)
    out = {"violations": [v.to_dict() for v in found], "profile": profile(found).to_dict()}
    if args.repair:
        from .repair import audit_repair_loop
        from .trajectory import Belief

        res = audit_repair_loop(Belief("cli", "n/a", traj), task, None, config.r_max, config.lam, lexicons=config.lexicons)
        out["repair"] = {
            "converged": res.converged,
            "rounds_used": res.rounds_used,
            "trajectory": res.trajectory.to_dict(),
            "residual": [v.to_dict() for v in res.residual],
        }
    print(json.dumps(out, indent=2, sort_keys=True))
    return 0 if not found else 3


def cmd_inject(args: argparse.Namespace) -> int:
    from .eval.injection import build_injection_corpus, default_specs, dump_corpus, load_specs
    from .eval.pipeline import evaluate_corpus

    specs = load_specs(_load_json(args.spec)) if args.spec else default_specs()
    cases = build_injection_corpus(specs, args.n, np.random.default_rng(args.seed))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            dump_corpus(cases, fh)
    slices: dict[str, int] = {}
    for c in cases:
        slices[c.slice] = slices.get(c.slice, 0) + 1
    for name, count in sorted(slices.items()):
        print(f"{name}\t{count}")
    if args.evaluate:
        with_repair, _ = evaluate_corpus(cases, repair=True)
        without, _ = evaluate_corpus(cases, repair=False)
        print("slice\tusr_no_repair\tusr_repair\tavg_viol_no_repair\tavg_viol_repair")
        for name in sorted(with_repair):
            a, b = without[name], with_repair[name]
            print(f"{name}\t{a.usr:.4f}\t{b.usr:.4f}\t{a.avg_viol:.3f}\t{b.avg_viol:.3f}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .eval.reports import format_table, recompute

    run = Path(args.run)
    report = json.loads((run / "report.json").read_text(encoding="utf-8"))
    print(format_table(report))
    again = recompute(run)
    if again["faithfulness"] != report.get("faithfulness") or again["n_failed"] != report.get("n_failed"):
        print("warning: report.json disagrees with run_records.jsonl", file=sys.stderr)
        return 1
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    from .eval.reports import plot_usr

    n = plot_usr(Path(args.run) / "audit_log.jsonl", args.out)
    print(f"wrote {args.out} ({n} traces)")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    from .eval.datasets import write_dataset
    from .eval.synthetic import build_fixture

    config = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks, fx = build_fixture(args.n, args.seed, config)
    write_dataset(tasks, out / "dataset.jsonl")
    fx.dump(out / "fixture.jsonl")
    print(f"wrote {len(tasks)} tasks and {len(fx.responses)} fixture replies to {out}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    from .eval.datasets import convert, read_raw, write_dataset

    tasks = convert(read_raw(args.input), args.benchmark)
    write_dataset(tasks, args.output)
    print(f"wrote {len(tasks)} records to {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saver", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a dataset end to end")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config")
    r.add_argument("--mode", choices=("saver", "vanilla", "cot"), default="saver")
    r.add_argument("--backend", choices=("mock", "http"), default="mock")
    r.add_argument("--fixture", help="JSONL fixture for the mock backend")
    r.add_argument("--fallback", choices=[f.value for f in FallbackPolicy], default="error")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--parallel", type=int, default=1)
    r.add_argument("--limit", type=int)
    r.add_argument("--out", required=True)
    r.add_argument("--dump-selection", action="store_true")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("audit", help="audit one trajectory JSON (exit 3 when violations are found)")
    a.add_argument("--trajectory", required=True)
    a.add_argument("--task")
    a.add_argument("--config")
    a.add_argument("--repair", action="store_true", help="also run the rule-mode repair loop")
    a.set_defaults(func=cmd_audit)

    i = sub.add_parser("inject", help="build the violation-injection corpus")
    i.add_argument("--spec")
    i.add_argument("--n", type=int, default=600)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out")
    i.add_argument("--evaluate", action="store_true", help="compare USR with and without repair per slice")
    i.set_defaults(func=cmd_inject)

    rp = sub.add_parser("report", help="print and cross-check a run's report")
    rp.add_argument("--run", required=True)
    rp.set_defaults(func=cmd_report)

    pl = sub.add_parser("plot", help="USR-per-round SVG from a run's audit log")
    pl.add_argument("--run", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    sy = sub.add_parser("synth", help="write a synthetic dataset and matching mock fixture")
    sy.add_argument("--n", type=int, default=20)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--config")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)

    cv = sub.add_parser("convert", help="normalize a benchmark file to dataset JSONL")
    cv.add_argument("--benchmark", required=True, choices=("hotpotqa", "2wiki", "musique", "fever", "nq", "quoref"))
    cv.add_argument("input")
    cv.add_argument("output")
    cv.set_defaults(func=cmd_convert)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
