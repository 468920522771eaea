"""Command-line entry point: run, resume, lint, score, export, serve.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from .config import ConfigError, load_pipeline_config, parse_config_text, serialize_config
from .config import build_pipeline_config
from .export import EXPORT_FORMATS, export_run
from .model import (
    ItemValidationError,
    Verdict,
    table_from_dict,
)
from .pipeline import (
    CheckpointCorrupt,
    PipelineError,
    PipelineFailed,
    item_from_file,
    run_pipeline,
)
from .quality import LintRuleSet, aggregate_all, check_consistency, lint_goal
from .review import serve

log = logging.getLogger(__name__)

CONFIG_COPY_NAME = "config.cfg"


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harakit",
        description=(
            "Automated hazard analysis and risk assessment: generate scenarios, "
            "malfunctions, hazardous events, severities, and safety goals from an "
            "item definition, then review the result."
        ),
    )
    parser.add_argument("--verbose", action="store_true", help="log step progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the full pipeline on an item definition")
    run.add_argument("item", type=Path, help="item definition JSON file")
    run.add_argument("--config", type=Path, help="key=value configuration file")
    run.add_argument("--backend", choices=("real", "mock"), help="override backend")
    run.add_argument("--fixtures", type=Path, help="fixture directory (mock backend)")
    run.add_argument("--out", type=Path, help="run directory (default run/<timestamp>)")

    resume = sub.add_parser("resume", help="continue an interrupted run")
    resume.add_argument("run_dir", type=Path)

    lint = sub.add_parser("lint", help="lint the safety goals of a table or goal file")
    lint.add_argument("table", type=Path, help="table.json or a JSON goal list")

    scores = sub.add_parser("scores", help="aggregate reviewer verdicts")
    scores.add_argument("verdicts", type=Path, help="JSON-lines verdict file")

    export = sub.add_parser("export", help="render a completed run")
    export.add_argument("run_dir", type=Path)
    export.add_argument("--format", choices=EXPORT_FORMATS, default="csv")

    serve_cmd = sub.add_parser("serve", help="serve the review API (and UI) for a run")
    serve_cmd.add_argument("run_dir", type=Path)
    serve_cmd.add_argument("--port", type=int, default=8765)
    serve_cmd.add_argument("--ui", type=Path, help="static UI asset directory")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        item = item_from_file(args.item)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read item definition: {exc}", file=sys.stderr)
        return 2
    except ItemValidationError as exc:
        print("invalid item definition:", file=sys.stderr)
        for violation in exc.violations:
            print(f"  - {violation}", file=sys.stderr)
        return 2
    try:
        cfg = load_pipeline_config(args.config)
        overrides = {}
        if args.backend:
            overrides["backend"] = args.backend
        if args.fixtures:
            overrides["fixtures"] = args.fixtures
        if overrides:
            cfg = dataclasses.replace(cfg, **overrides)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return 2
    run_dir = args.out or (
        Path("run") / datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_COPY_NAME).write_text(serialize_config(cfg), encoding="utf-8")
    try:
        run_pipeline(item, cfg, run_dir)
    except PipelineFailed as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        print(f"run directory: {run_dir}")
        return 1
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return _print_summary(run_dir)


def _print_summary(run_dir: Path) -> int:
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    counts = report.get("counts", {})
    print(
        f"rows={counts.get('rows', 0)} goals={counts.get('goals', 0)} "
        f"failed_rows={len(report.get('failed_rows', []))} run_dir={run_dir}"
    )
    for failure in report.get("failed_rows", []):
        print(f"  failed {failure['id']} at {failure['step']}: {failure['reason']}")
    return 0


def _cmd_resume(args: argparse.Namespace) -> int:
    run_dir = args.run_dir
    item_path = run_dir / "item.json"
    config_path = run_dir / CONFIG_COPY_NAME
    if not item_path.is_file() or not config_path.is_file():
        print(f"{run_dir} is not a run directory (missing item.json/config.cfg)", file=sys.stderr)
        return 2
    try:
        item = item_from_file(item_path)
        cfg = build_pipeline_config(
            parse_config_text(config_path.read_text(encoding="utf-8"))
        )
    except (ItemValidationError, ConfigError, json.JSONDecodeError) as exc:
        print(f"cannot load run state: {exc}", file=sys.stderr)
        return 2
    try:
        run_pipeline(item, cfg, run_dir)
    except CheckpointCorrupt as exc:
        print(f"corrupt checkpoint at step {exc.step_id}: {exc}", file=sys.stderr)
        return 1
    except PipelineFailed as exc:
        print(f"pipeline failed: {exc}", file=sys.stderr)
        return 1
    return _print_summary(run_dir)


def _goal_texts(document: object) -> list[tuple[str, str]]:
    """(label, text) pairs from a table document or a bare goal list."""
    if isinstance(document, dict) and "rows" in document and "goals" in document:
        table = table_from_dict(document)
        return [(g.id, g.text) for g in table.goals]
    if isinstance(document, dict) and "goals" in document:
        document = document["goals"]
    if isinstance(document, list):
        pairs = []
        for i, entry in enumerate(document):
            if isinstance(entry, str):
                pairs.append((f"goal-{i + 1}", entry))
            elif isinstance(entry, dict) and "text" in entry:
                pairs.append((entry.get("id", f"goal-{i + 1}"), entry["text"]))
            else:
                raise ValueError(f"goal entry {i} has no text")
        return pairs
    raise ValueError("expected a table document or a list of goals")


def _cmd_lint(args: argparse.Namespace) -> int:
    try:
        document = json.loads(args.table.read_text(encoding="utf-8"))
        pairs = _goal_texts(document)
    except (OSError, ValueError) as exc:
        print(f"cannot lint {args.table}: {exc}", file=sys.stderr)
        return 2
    rules = LintRuleSet()
    errors = 0
    for label, text in pairs:
        for finding in lint_goal(text, rules):
            if finding.level.value == "error":
                errors += 1
            print(f"{label} [{finding.level.value}] {finding.rule_id}: {finding.message}")
    if isinstance(document, dict) and "rows" in document and "goals" in document:
        for finding in check_consistency(table_from_dict(document)):
            errors += 1
            print(f"table [{finding.level.value}] {finding.rule_id}: {finding.message}")
    if errors:
        return 1
    print("lint: ok")
    return 0


def _cmd_scores(args: argparse.Namespace) -> int:
    try:
        verdicts = []
        for line in args.verdicts.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            data = json.loads(line)
            verdicts.append(
                Verdict(
                    criterion=data["criterion"],
                    reviewer=data["reviewer"],
                    raw_score=int(data["raw_score"]),
                )
            )
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot read verdicts: {exc}", file=sys.stderr)
        return 2
    for criterion, aggregated in aggregate_all(verdicts).items():
        if aggregated is None:
            print(f"{criterion}: no_data")
        else:
            print(
                f"{criterion}: mean={aggregated.mean:g} stddev={aggregated.stddev:g} "
                f"n_used={aggregated.n_used} n_excluded={aggregated.n_excluded}"
            )
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    try:
        print(export_run(args.run_dir, args.format), end="")
    except (OSError, ValueError) as exc:
        print(f"export failed: {exc}", file=sys.stderr)
        return 1
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    ui_dir = args.ui
    if ui_dir is None:
        bundled = Path.cwd() / "frontend" / "dist"
        ui_dir = bundled if bundled.is_dir() else None
    try:
        server = serve(args.run_dir, args.port, ui_dir)
    except OSError as exc:
        print(f"cannot bind port {args.port}: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"not a completed run directory: {exc}", file=sys.stderr)
        return 1
    print(f"review service on http://127.0.0.1:{args.port} (Ctrl-C to stop)")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        server.server_close()
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "resume": _cmd_resume,
    "lint": _cmd_lint,
    "scores": _cmd_scores,
    "export": _cmd_export,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
