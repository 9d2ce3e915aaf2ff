"""Command line entry point: ``mmleak <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from .extraction import ExtractionError
from .pipeline import STAGES, Pipeline, PipelineConfig, PipelineError, run_pipeline
from .summaries import HintsFormatError, read_hints

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_FATAL = 2


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--root", help="source tree to analyze")
    common.add_argument("--out", dest="out_dir", help="output directory for artifacts")
    common.add_argument("--offline", action="store_true", default=None, help="heuristic classifier and replay-only model cache")
    common.add_argument("--jobs", type=int, help="worker threads (default: logical cores)")
    common.add_argument("--sink", action="append", dest="sinks", help="function that takes ownership of a pointer argument (repeatable)")
    common.add_argument("--codeql-results", help="CodeQL SARIF file to ingest")
    common.add_argument("--infer-results", help="Infer report.json to ingest")
    common.add_argument("--hints", dest="extra_hints", help="extra hints.json merged into the candidate summaries")
    common.add_argument("--max-depth", type=int, help="call-chain depth bound for validation")
    common.add_argument("--path-cap", type=int, help="paths enumerated before falling back to one solver query")
    common.add_argument("--fail-on-findings", action="store_true", help="exit 1 when leaks remain after the last stage")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="mmleak", description="Summary-guided memory-leak detection for C/C++ code.")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    emit = sub.choices["emit"]
    emit.add_argument("--from-hints", help="emit directly from this hints file instead of validated_hints.json")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        k: getattr(args, k)
        for k in ("root", "out_dir", "offline", "jobs", "codeql_results", "infer_results", "extra_hints", "max_depth", "path_cap")
    }
    if args.sinks:
        overrides["sinks"] = tuple(args.sinks)
    if args.config:
        return PipelineConfig.from_file(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = load_config(args)
        if args.command == "emit" and args.from_hints:
            p = Pipeline(config)
            p.out.mkdir(parents=True, exist_ok=True)
            p.stage_emit(read_hints(args.from_hints))
            print(f"wrote {p.path('codeql')} and {p.path('infer_flags.txt')}")
            return EXIT_OK
        stages = STAGES if args.command == "run" else (args.command,)
        pipeline, counters = run_pipeline(config, stages)
    except (PipelineError, ExtractionError, HintsFormatError, ValueError, OSError) as exc:
        print(f"mmleak: error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    for d in pipeline.diagnostics:
        print(f"mmleak: {d}", file=sys.stderr)
    for name, value in counters.items():
        if value is not None:
            print(f"{name}: {value}")
    if pipeline.skipped:
        print("up to date: " + ", ".join(pipeline.skipped))
    if args.fail_on_findings and pipeline.findings():
        return EXIT_FINDINGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
