"""Command-line entry point: ``tumorpipe <stage> [options]``.

Exit codes: 0 success, 1 some cases or artifacts failed, 2 configuration or usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from .config import ConfigError, load_config
from .report import cmd_report
from .stages import (
    EXIT_CONFIG,
    EXIT_OK,
    Run,
    StageError,
    StageResult,
    cmd_apply,
    cmd_evaluate,
    cmd_fuse,
    cmd_optimize_pp,
    cmd_rank,
    cmd_split,
)
from .synth import CANDIDATES, generate_corpus

log = logging.getLogger("tumorpipe")

STAGES = ("split", "evaluate", "rank", "fuse", "optimize-pp", "apply", "report")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="JSON config file")
    p.add_argument("--manifest", type=Path, default=argparse.SUPPRESS, help="case manifest JSON")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="worker processes (default: all cores)")
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tumorpipe", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and its manifest")
    s.add_argument("--cases", type=int, default=30)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--folds", type=int, default=2, help="folds per candidate stack")
    s.add_argument("--candidates", nargs="+", choices=sorted(CANDIDATES), default=sorted(CANDIDATES))

    sub.add_parser("split", parents=[common], help="radiomic features, clustering and folds")
    e = sub.add_parser("evaluate", parents=[common], help="metric tables per candidate")
    e.add_argument("--candidates", nargs="+", default=None)
    sub.add_parser("rank", parents=[common], help="rank candidates into F scores")
    f = sub.add_parser("fuse", parents=[common], help="ensemble the candidates")
    f.add_argument("--mode", choices=("weighted", "staple"), default=None)
    sub.add_parser("optimize-pp", parents=[common], help="learn the per-cluster post-processing policy")
    sub.add_parser("apply", parents=[common], help="fuse and post-process every case")
    sub.add_parser("report", parents=[common], help="summarize all artifacts")
    r = sub.add_parser("run", parents=[common], help="every stage from split to report")
    r.add_argument("--mode", choices=("weighted", "staple"), default=None)
    return parser


def _run_stage(name: str, run: Run, args) -> StageResult:
    if name == "split":
        return cmd_split(run)
    if name == "evaluate":
        return cmd_evaluate(run, getattr(args, "candidates", None))
    if name == "rank":
        return cmd_rank(run)
    if name == "fuse":
        return cmd_fuse(run, getattr(args, "mode", None))
    if name == "optimize-pp":
        return cmd_optimize_pp(run)
    if name == "apply":
        return cmd_apply(run)
    return cmd_report(run)


def _summarize(result: StageResult) -> None:
    for key, msg in sorted(result.failures.items()):
        print(f"{result.stage}: FAILED {key}: {msg}", file=sys.stderr)
    print(f"{result.stage}: {'ok' if not result.failures else f'{len(result.failures)} failure(s)'}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors as 2 already
        return int(exc.code or 0)
    verbosity = getattr(args, "verbose", 0)
    logging.basicConfig(
        level=logging.DEBUG if verbosity > 1 else logging.INFO if verbosity else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(
            getattr(args, "config", None),
            seed=getattr(args, "seed", None),
            jobs=getattr(args, "jobs", None),
            out=str(args.out) if hasattr(args, "out") else None,
        )
        out = Path(cfg.out)
        if args.command == "synth":
            manifest = generate_corpus(
                out, args.cases, args.size, args.folds, cfg.seed,
                {k: CANDIDATES[k] for k in args.candidates}, cfg.task_spec(),
            )
            print(manifest)
            return EXIT_OK
        run = Run(cfg, out, getattr(args, "manifest", None))
        names = STAGES if args.command == "run" else (args.command,)
        code = EXIT_OK
        for name in names:
            result = _run_stage(name, run, args)
            _summarize(result)
            code = max(code, result.exit_code)
            if name == "split" and args.command == "run":
                # later stages read the fold/cluster-annotated copy
                run.manifest_path = run.out / "manifest.json"
        return code
    except (ConfigError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
