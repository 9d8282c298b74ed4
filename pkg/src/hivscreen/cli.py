"""Command-line entry point: ``hivscreen <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure,
4 inference server unreachable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from typing import Any, Sequence

from .pipeline import (
    STAGE_FUNCS, ConfigError, Context, PipelineConfig, ServerUnreachable, StageError,
    flag_overrides, run_pipeline,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_UNREACHABLE = 0, 2, 3, 4

logger = logging.getLogger("hivscreen")

_STAGE_COMMANDS = {
    "synth": "records",
    "ingest": "records",
    "split": "split",
    "run": "run",
    "aggregate": "aggregate",
    "evaluate": "evaluate",
    "analyze": "analyze",
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", help="JSON configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a setting, e.g. --set mock.p_flip=0.2 (repeatable)")
    parser.add_argument("--results-dir", help="directory for stage artifacts")
    parser.add_argument("--seed", type=int, help="global seed used where no section seed is given")
    parser.add_argument("--force", action="store_true",
                        help="accept upstream artifacts built with a different configuration")
    parser.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hivscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate a synthetic tagged corpus (records.jsonl, facts.jsonl)",
        "ingest": "build records.jsonl from raw CSV exports",
        "split": "stratified held-out split (split.json)",
        "run": "execute the sampled inference runs (runs.jsonl)",
        "aggregate": "apply the aggregation strategies (decisions.jsonl)",
        "evaluate": "compute metrics (metrics.csv, confusion.csv)",
        "analyze": "output-length statistics (analysis.json, scatter CSV)",
        "pipeline": "run every stage, resuming from up-to-date artifacts",
        "report": "print metrics and analysis summaries",
        "mock-serve": "serve the deterministic mock inference server",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "synth":
            p.add_argument("-n", type=int, help="number of records")
            p.add_argument("--inclusion-fraction", type=float)
        if name == "ingest":
            for key in ("notes", "metadata", "medication", "virology"):
                p.add_argument(f"--{key}", help=f"{key} CSV export")
        if name == "mock-serve":
            p.add_argument("--host", default="127.0.0.1")
            p.add_argument("--port", type=int, default=8080)
            p.add_argument("--p-flip", type=float)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    flags = flag_overrides(args.set)
    if args.results_dir:
        flags.setdefault("paths", {})["results_dir"] = args.results_dir
    if args.seed is not None:
        flags["seed"] = args.seed
    if args.command == "synth":
        flags["source"] = "synth"
        if args.n is not None:
            flags.setdefault("synth", {})["n"] = args.n
        if args.inclusion_fraction is not None:
            flags.setdefault("synth", {})["inclusion_fraction"] = args.inclusion_fraction
    if args.command == "ingest":
        flags["source"] = "ingest"
        for key in ("notes", "metadata", "medication", "virology"):
            if getattr(args, key):
                flags.setdefault("paths", {})[f"{key}_csv"] = getattr(args, key)
    if args.command == "mock-serve" and args.p_flip is not None:
        flags.setdefault("mock", {})["p_flip"] = args.p_flip
    return flags


def _report(ctx: Context) -> None:
    path = ctx.path("evaluate")
    if not path.exists():
        raise StageError("report", f"{path} not found; run evaluate first")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = ["prompt", "strategy", "accuracy", "macro_f1", "sensitivity", "specificity", "abstained", "retained_fraction"]
    widths = [max(len(c), *(len(r[c]) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(r[c].ljust(w) for c, w in zip(cols, widths)))
    analysis = ctx.path("analyze")
    if analysis.exists():
        doc = json.loads(analysis.read_text(encoding="utf-8"))
        for prompt, result in doc["prompts"].items():
            if "error" in result:
                print(f"\n[{prompt}] analysis unavailable: {result['error']}")
                continue
            print(f"\n[{prompt}] {result['n_retained']}/{result['n_records']} records after 3-sigma filter")
            for name, test in result["tests"].items():
                if "error" in test:
                    print(f"  {name}: {test['error']}")
                else:
                    print(f"  {name}: statistic={test['statistic']:.4f} p={test['p_value']:.3g} ({test['method']})")


def _serve(ctx: Context, host: str, port: int) -> None:
    from .mockserver import MockServer, make_http_server

    server = make_http_server(MockServer(ctx.cfg.mock_policy()), host, port)
    print(f"mock inference server listening on http://{host}:{server.server_address[1]}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = PipelineConfig.load(args.config, flags=_overrides(args))
        ctx = Context(cfg, force=args.force)
        if args.command == "pipeline":
            executed = run_pipeline(ctx)
            print(f"stages run: {', '.join(executed) if executed else 'none (all up to date)'}")
            print(f"artifacts in {ctx.results}")
        elif args.command == "report":
            _report(ctx)
        elif args.command == "mock-serve":
            _serve(ctx, args.host, args.port)
        else:
            stage = _STAGE_COMMANDS[args.command]
            if stage != "records":
                ctx.results.mkdir(parents=True, exist_ok=True)
            STAGE_FUNCS[stage](ctx)
            print(f"{args.command}: wrote {ctx.path(stage)}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ServerUnreachable as exc:
        print(f"server unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
