"""Rendering of the analysis table into CSV, Markdown, and JSON exports."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Sequence

from .model import (
    HaraTable,
    Malfunction,
    OperationalScenario,
    dump_json,
    malfunction_from_dict,
    scenario_from_dict,
    table_from_dict,
    table_to_dict,
)

CSV_COLUMNS: tuple[str, ...] = (
    "ID",
    "Core Scenario",
    "Detailed Scenario",
    "Guide Word",
    "Malfunction",
    "Hazardous Event",
    "Severity",
    "Severity Rationale",
    "Safety Goal IDs",
)

EXPORT_FORMATS = ("csv", "md", "json")


def _rows(
    table: HaraTable,
    scenarios: Sequence[OperationalScenario],
    malfunctions: Sequence[Malfunction],
) -> list[list[str]]:
    scenario_by_id = {s.id: s for s in scenarios}
    malfunction_by_id = {m.id: m for m in malfunctions}
    rows = []
    for event in table.rows:
        scenario = scenario_by_id.get(event.scenario_ref)
        malfunction = malfunction_by_id.get(event.malfunction_ref)
        goal_ids = [g.id for g in table.goals_for(event.id)]
        rows.append(
            [
                event.id,
                scenario.core_summary if scenario else event.scenario_ref,
                scenario.detailed_description if scenario else "",
                malfunction.guide_word if malfunction else "",
                malfunction.description if malfunction else event.malfunction_ref,
                event.consequence,
                event.severity.label if event.severity else "",
                event.severity_rationale,
                "; ".join(goal_ids),
            ]
        )
    return rows


def export_csv(
    table: HaraTable,
    scenarios: Sequence[OperationalScenario],
    malfunctions: Sequence[Malfunction],
) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    writer.writerows(_rows(table, scenarios, malfunctions))
    return buffer.getvalue()


def _md_escape(text: str) -> str:
    return text.replace("|", "\\|").replace("\n", " ")


def export_markdown(
    table: HaraTable,
    scenarios: Sequence[OperationalScenario],
    malfunctions: Sequence[Malfunction],
) -> str:
    lines = [
        "| " + " | ".join(CSV_COLUMNS) + " |",
        "| " + " | ".join("---" for _ in CSV_COLUMNS) + " |",
    ]
    for row in _rows(table, scenarios, malfunctions):
        lines.append("| " + " | ".join(_md_escape(cell) for cell in row) + " |")
    goal_lines = ["", "## Safety goals", ""]
    for goal in table.goals:
        goal_lines.append(
            f"- **{goal.id}** ({goal.strategy.value}, {goal.status.value}, "
            f"covers {', '.join(goal.covered_events)}): {_md_escape(goal.text)}"
        )
    return "\n".join(lines + goal_lines) + "\n"


def export_json(table: HaraTable) -> str:
    return dump_json(table_to_dict(table))


def load_run_artifacts(
    run_dir: Path,
) -> tuple[HaraTable, list[OperationalScenario], list[Malfunction]]:
    import json

    run_dir = Path(run_dir)
    table = table_from_dict(
        json.loads((run_dir / "table.json").read_text(encoding="utf-8"))
    )
    scenarios = [
        scenario_from_dict(s)
        for s in json.loads((run_dir / "scenarios.json").read_text(encoding="utf-8"))[
            "scenarios"
        ]
    ]
    malfunctions = [
        malfunction_from_dict(m)
        for m in json.loads(
            (run_dir / "malfunctions.json").read_text(encoding="utf-8")
        )["malfunctions"]
    ]
    return table, scenarios, malfunctions


def export_run(run_dir: Path, fmt: str) -> str:
    """Render a completed run directory in the requested format."""
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"unknown export format: {fmt!r}")
    table, scenarios, malfunctions = load_run_artifacts(run_dir)
    if fmt == "csv":
        return export_csv(table, scenarios, malfunctions)
    if fmt == "md":
        return export_markdown(table, scenarios, malfunctions)
    return export_json(table)
