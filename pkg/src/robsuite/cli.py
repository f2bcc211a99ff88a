"""``robsuite`` command line.

Exit codes: 0 success, 2 config error, 3 integrity error, 4 stage failure.
Human-readable summaries go to stdout; everything machine-readable is
written to files.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import suite as suite_mod
from .errors import ConfigError, IntegrityError, RobSuiteError, StageError
from .pipeline import Pipeline, load_config

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_STAGE = 0, 2, 3, 4


def _overrides(args) -> dict:
    over: dict = {}
    if getattr(args, "seed", None) is not None:
        over.setdefault("suite", {})["seed"] = args.seed
    if getattr(args, "literal_eq4", False):
        over.setdefault("reference", {})["literal_eq4"] = True
    if getattr(args, "objective", None):
        over.setdefault("ga", {})["objective"] = args.objective
    return over


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config, _overrides(args))
    return Pipeline(cfg, Path(args.out), jobs=args.jobs, log=sys.stdout)


def cmd_pipeline(args) -> int:
    p = _pipeline(args)
    status = p.run()
    ran = sum(v == "ran" for v in status.values())
    print(f"pipeline complete in {p.out}: {ran} stage(s) run, {len(status) - ran} up to date")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .siamese import load_system

    st = suite_mod.load(args.suite)
    problems = suite_mod.checksum_problems(st)
    if problems:
        raise IntegrityError("; ".join(problems))
    system = load_system(args.system)
    report = suite_mod.evaluate_suite(system, st)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "csv":
        out.write_text(report.to_csv(), encoding="utf-8")
    else:
        out.write_text(json.dumps(report.to_json(), sort_keys=True, indent=1), encoding="utf-8")
    for name, row in report.per_scheme.items():
        print(f"{report.system_id:>6} {name:<14} {row['robustness']:.4f}  ({row['size']} items)")
    return EXIT_OK


def cmd_experiments(args) -> int:
    from .experiments import WHICH, Experiments

    p = _pipeline(args)
    exp = Experiments(p)
    which = WHICH if args.which == "all" else (args.which,)
    for w in which:
        result = exp.run(w)
        print(f"{w}: {json.dumps(result, sort_keys=True)}")
    print(f"reports written to {exp.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    st = suite_mod.load(args.suite)
    problems = suite_mod.verify(st)
    if args.format == "json":
        print(json.dumps({"suite": str(args.suite), "violations": problems}, indent=1))
    else:
        for msg in problems:
            print(msg)
        print(f"{len(problems)} violation(s) in {len(st)} set(s), {st.size} item(s)")
    return EXIT_INTEGRITY if problems else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="robsuite", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def run_flags(p):
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON config (defaults if omitted)")
        p.add_argument("--out", type=Path, required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="suite seed override")
        p.add_argument("--jobs", type=int, default=1, help="worker cap for per-scheme stages")
        p.add_argument("--literal-eq4", action="store_true", help="renormalise PGD steps onto the Lp sphere")
        p.add_argument("--objective", choices=("prose", "literal"), default=None, help="selection objective")

    p = sub.add_parser("pipeline", help="build a suite end to end")
    run_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("evaluate", help="score one system on a suite")
    p.add_argument("system", type=Path, help="system directory (system.json + weights.rbt)")
    p.add_argument("suite", type=Path, help="suite directory")
    p.add_argument("--out", type=Path, required=True, help="report file")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiments", help="run experiment drivers on a completed run")
    p.add_argument("which", choices=("rq1", "rq2", "ablation", "speedup", "adaptive", "all"))
    run_flags(p)
    p.set_defaults(func=cmd_experiments)

    p = sub.add_parser("verify", help="check a suite's checksums, membership and labels")
    p.add_argument("suite", type=Path)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except StageError as exc:
        print(f"stage failure [{exc.stage}]: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except RobSuiteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
