"""Localhost review service over a completed run.

Human decisions (checklist verdicts, goal accept/reject, redundancy
resolutions, comments) are appended to a crash-safe JSON-lines log in the run
directory; derived state is a pure fold over that log, so replaying it from
empty reproduces the service state exactly. Pipeline artifacts are never
mutated.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Mapping, Sequence

from .export import load_run_artifacts
from .model import (
    GoalStatus,
    GoalStrategy,
    HaraTable,
    Malfunction,
    OperationalScenario,
    RedundancyFinding,
    Verdict,
    event_to_dict,
    goal_to_dict,
    redundancy_finding_from_dict,
    table_to_dict,
)
from .quality import AggregatedScore, aggregate_all, checklist_scaffold

log = logging.getLogger(__name__)

CRITERION_LETTERS = "abcdefghij"


class DecisionKind(str, Enum):
    ACCEPT_GOAL = "accept_goal"
    REJECT_GOAL = "reject_goal"
    ADOPT_REUSED = "adopt_reused"
    PREFER_STRATEGY = "prefer_strategy"
    RESOLVE_REDUNDANCY = "resolve_redundancy"
    COMMENT = "comment"
    VERDICT = "verdict"


RESOLUTIONS = ("keep_a", "keep_b", "merge_note")


@dataclass(frozen=True)
class ReviewDecision:
    id: str
    target: str
    kind: DecisionKind
    payload: Mapping[str, Any]
    reviewer: str
    at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "target": self.target,
            "kind": self.kind.value,
            "payload": dict(self.payload),
            "reviewer": self.reviewer,
            "at": self.at,
        }


def decision_from_dict(data: Mapping[str, Any]) -> ReviewDecision:
    return ReviewDecision(
        id=data["id"],
        target=data["target"],
        kind=DecisionKind(data["kind"]),
        payload=dict(data.get("payload", {})),
        reviewer=data["reviewer"],
        at=data["at"],
    )


class InvalidDecision(ValueError):
    pass


@dataclass(frozen=True)
class ReviewState:
    """Derived state after folding the decision log."""

    goal_status: Mapping[str, GoalStatus]
    adopted: frozenset[str]
    preferred_strategy: Mapping[str, str]
    resolutions: Mapping[tuple[str, str], Mapping[str, Any]]
    comments: tuple[ReviewDecision, ...]
    verdicts: tuple[Verdict, ...]


def fold_decisions(decisions: Sequence[ReviewDecision]) -> ReviewState:
    """Pure fold: latest decision per (target, kind, reviewer) wins; goal
    accept/reject additionally resolves cross-kind by log order."""
    latest: dict[tuple[str, str, str], ReviewDecision] = {}
    for decision in decisions:
        latest[(decision.target, decision.kind.value, decision.reviewer)] = decision

    goal_status: dict[str, GoalStatus] = {}
    for decision in decisions:
        key = (decision.target, decision.kind.value, decision.reviewer)
        if latest[key] is not decision:
            continue
        if decision.kind is DecisionKind.ACCEPT_GOAL:
            goal_status[decision.target] = GoalStatus.ACCEPTED
        elif decision.kind is DecisionKind.REJECT_GOAL:
            goal_status[decision.target] = GoalStatus.REJECTED

    adopted = frozenset(
        d.target for d in latest.values() if d.kind is DecisionKind.ADOPT_REUSED
    )
    preferred: dict[str, str] = {}
    resolutions: dict[tuple[str, str], Mapping[str, Any]] = {}
    comments: list[ReviewDecision] = []
    verdicts: list[Verdict] = []
    for decision in decisions:
        key = (decision.target, decision.kind.value, decision.reviewer)
        if latest[key] is not decision:
            continue
        if decision.kind is DecisionKind.PREFER_STRATEGY:
            preferred[decision.target] = decision.payload["strategy"]
        elif decision.kind is DecisionKind.RESOLVE_REDUNDANCY:
            pair = (decision.target, decision.payload["other"])
            resolutions[pair] = {
                "resolution": decision.payload["resolution"],
                "note": decision.payload.get("note", ""),
                "reviewer": decision.reviewer,
            }
        elif decision.kind is DecisionKind.COMMENT:
            comments.append(decision)
        elif decision.kind is DecisionKind.VERDICT:
            verdicts.append(
                Verdict(
                    criterion=decision.target,
                    reviewer=decision.reviewer,
                    raw_score=int(decision.payload["raw_score"]),
                )
            )
    return ReviewState(
        goal_status=goal_status,
        adopted=adopted,
        preferred_strategy=preferred,
        resolutions=resolutions,
        comments=tuple(comments),
        verdicts=tuple(verdicts),
    )


def _score_payload(scores: Mapping[str, AggregatedScore | None]) -> dict[str, Any]:
    payload: dict[str, Any] = {}
    for criterion, aggregated in scores.items():
        if aggregated is None:
            payload[criterion] = {"criterion": criterion, "no_data": True}
        else:
            payload[criterion] = {
                "criterion": criterion,
                "mean": aggregated.mean,
                "stddev": aggregated.stddev,
                "n_used": aggregated.n_used,
                "n_excluded": aggregated.n_excluded,
            }
    return payload


class ReviewApp:
    """Review state and endpoint logic, independent of the HTTP plumbing."""

    def __init__(self, run_dir: Path) -> None:
        self.run_dir = Path(run_dir)
        table, scenarios, malfunctions = load_run_artifacts(self.run_dir)
        self.table: HaraTable = table
        self.scenarios: list[OperationalScenario] = scenarios
        self.malfunctions: list[Malfunction] = malfunctions
        goals_doc = json.loads(
            (self.run_dir / "goals.json").read_text(encoding="utf-8")
        )
        self.redundancy_findings: list[RedundancyFinding] = [
            redundancy_finding_from_dict(f) for f in goals_doc["redundancy_findings"]
        ]
        self.checklist = checklist_scaffold(table, scenarios)
        self.log_path = self.run_dir / "decisions.jsonl"
        self._write_lock = threading.Lock()
        self.decisions: list[ReviewDecision] = self._load_log()

    # decision log ------------------------------------------------------------

    def _load_log(self) -> list[ReviewDecision]:
        if not self.log_path.is_file():
            return []
        decisions = []
        for line in self.log_path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                decisions.append(decision_from_dict(json.loads(line)))
        return decisions

    def _append(self, decision: ReviewDecision) -> None:
        with self._write_lock:
            with open(self.log_path, "a", encoding="utf-8") as handle:
                handle.write(json.dumps(decision.to_dict(), ensure_ascii=False) + "\n")
                handle.flush()
                os.fsync(handle.fileno())
            self.decisions.append(decision)

    # validation ----------------------------------------------------------------

    def _goal_ids(self) -> set[str]:
        return {g.id for g in self.table.goals}

    def _row_ids(self) -> set[str]:
        return {r.id for r in self.table.rows}

    def validate_decision(self, data: Mapping[str, Any]) -> tuple[str, DecisionKind, dict, str]:
        try:
            kind = DecisionKind(data["kind"])
        except (KeyError, ValueError) as exc:
            raise InvalidDecision(f"unknown decision kind: {data.get('kind')!r}") from exc
        target = str(data.get("target", ""))
        reviewer = str(data.get("reviewer", "")).strip()
        payload = dict(data.get("payload", {}))
        if not reviewer:
            raise InvalidDecision("reviewer must be non-empty")
        goal_ids, row_ids = self._goal_ids(), self._row_ids()
        if kind in (
            DecisionKind.ACCEPT_GOAL,
            DecisionKind.REJECT_GOAL,
            DecisionKind.ADOPT_REUSED,
        ):
            if target not in goal_ids:
                raise InvalidDecision(f"target must be a goal id, got {target!r}")
        elif kind is DecisionKind.PREFER_STRATEGY:
            if target not in row_ids:
                raise InvalidDecision(f"target must be an event id, got {target!r}")
            strategy = payload.get("strategy")
            if strategy not in {s.value for s in GoalStrategy}:
                raise InvalidDecision(f"unknown strategy: {strategy!r}")
        elif kind is DecisionKind.RESOLVE_REDUNDANCY:
            if target not in goal_ids:
                raise InvalidDecision(f"target must be a goal id, got {target!r}")
            other = payload.get("other")
            if other not in goal_ids:
                raise InvalidDecision(f"payload.other must be a goal id, got {other!r}")
            if payload.get("resolution") not in RESOLUTIONS:
                raise InvalidDecision(
                    f"resolution must be one of {RESOLUTIONS}, got {payload.get('resolution')!r}"
                )
        elif kind is DecisionKind.COMMENT:
            is_criterion = target in CRITERION_LETTERS and len(target) == 1
            if target not in goal_ids and target not in row_ids and not is_criterion:
                raise InvalidDecision(f"target must resolve in the run, got {target!r}")
            if not str(payload.get("text", "")).strip():
                raise InvalidDecision("comment payload.text must be non-empty")
        elif kind is DecisionKind.VERDICT:
            if target not in CRITERION_LETTERS or len(target) != 1:
                raise InvalidDecision(f"target must be a criterion letter a..j, got {target!r}")
            raw_score = payload.get("raw_score")
            if not isinstance(raw_score, int) or raw_score not in (1, 2, 3, 4, 5):
                raise InvalidDecision(f"raw_score must be an integer in 1..5, got {raw_score!r}")
        return target, kind, payload, reviewer

    # endpoints -----------------------------------------------------------------

    def state(self) -> ReviewState:
        return fold_decisions(self.decisions)

    def derived_table(self) -> HaraTable:
        """Table with goal statuses updated from the decision log (in-memory
        only; table.json on disk is never touched)."""
        state = self.state()
        goals = tuple(
            replace(goal, status=state.goal_status.get(goal.id, goal.status))
            for goal in self.table.goals
        )
        return replace(self.table, goals=goals)

    def get_table(self) -> dict[str, Any]:
        return table_to_dict(self.derived_table())

    def get_row(self, row_id: str) -> dict[str, Any] | None:
        derived = self.derived_table()
        try:
            row = derived.row(row_id)
        except KeyError:
            return None
        goals = derived.goals_for(row_id)
        goal_ids = {g.id for g in goals}
        findings = [
            f for f in self.redundancy_findings
            if f.goal_a in goal_ids or f.goal_b in goal_ids
        ]
        state = self.state()
        return {
            "row": event_to_dict(row),
            "goals": [goal_to_dict(g) for g in goals],
            "lint_findings": {
                g.id: [f.rule_id for f in g.lint_findings] for g in goals
            },
            "redundancy_findings": [
                {
                    "goal_a": f.goal_a,
                    "goal_b": f.goal_b,
                    "relation": f.relation.value,
                    "rationale": f.rationale,
                    "method": f.method.value,
                    "resolved": (f.goal_a, f.goal_b) in state.resolutions
                    or (f.goal_b, f.goal_a) in state.resolutions,
                }
                for f in findings
            ],
            "preferred_strategy": state.preferred_strategy.get(row_id),
            "comments": [
                d.to_dict() for d in state.comments if d.target == row_id
                or d.target in goal_ids
            ],
        }

    def post_decision(self, data: Mapping[str, Any]) -> ReviewDecision:
        target, kind, payload, reviewer = self.validate_decision(data)
        decision = ReviewDecision(
            id=f"D-{len(self.decisions) + 1:04d}",
            target=target,
            kind=kind,
            payload=payload,
            reviewer=reviewer,
            at=datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
        )
        self._append(decision)
        return decision

    def get_scores(self) -> dict[str, Any]:
        return _score_payload(aggregate_all(self.state().verdicts))

    def get_context(self) -> dict[str, Any]:
        """Read-only scenario/malfunction catalogs so clients can resolve the
        refs carried by table rows (guide words, core summaries)."""
        from .model import malfunction_to_dict, scenario_to_dict

        return {
            "scenarios": [scenario_to_dict(s) for s in self.scenarios],
            "malfunctions": [malfunction_to_dict(m) for m in self.malfunctions],
        }

    def export_review_package(self) -> dict[str, Any]:
        return {
            "table": self.get_table(),
            "decisions": [d.to_dict() for d in self.decisions],
            "checklist": self.checklist,
            "scores": self.get_scores(),
        }


# --- HTTP layer -----------------------------------------------------------------

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".svg": "image/svg+xml",
    ".json": "application/json",
}


class _ReviewHandler(BaseHTTPRequestHandler):
    server: "ReviewServer"

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("review-service %s", fmt % args)

    def _send_json(self, status: int, payload: Any) -> None:
        body = json.dumps(payload, ensure_ascii=False, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        app = self.server.app
        path = self.path.split("?", 1)[0]
        if path == "/hara":
            self._send_json(200, app.get_table())
        elif path.startswith("/hara/rows/"):
            row = app.get_row(path.removeprefix("/hara/rows/"))
            if row is None:
                self._send_json(404, {"error": "unknown row id"})
            else:
                self._send_json(200, row)
        elif path == "/scores":
            self._send_json(200, app.get_scores())
        elif path == "/export/review-package":
            self._send_json(200, app.export_review_package())
        elif path == "/checklist":
            self._send_json(200, app.checklist)
        elif path == "/context":
            self._send_json(200, app.get_context())
        else:
            self._serve_static(path)

    def _serve_static(self, path: str) -> None:
        ui_dir = self.server.ui_dir
        if ui_dir is None:
            self._send_json(404, {"error": "unknown endpoint"})
            return
        relative = path.lstrip("/") or "index.html"
        target = (ui_dir / relative).resolve()
        if not str(target).startswith(str(ui_dir.resolve())) or not target.is_file():
            self._send_json(404, {"error": "not found"})
            return
        body = target.read_bytes()
        self.send_response(200)
        self.send_header(
            "Content-Type", _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        )
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self) -> None:  # noqa: N802 (http.server API)
        app = self.server.app
        if self.path.split("?", 1)[0] != "/decisions":
            self._send_json(404, {"error": "unknown endpoint"})
            return
        length = int(self.headers.get("Content-Length", "0"))
        try:
            data = json.loads(self.rfile.read(length).decode("utf-8"))
        except (ValueError, UnicodeDecodeError):
            self._send_json(422, {"error": "body must be a JSON object"})
            return
        try:
            decision = app.post_decision(data)
        except InvalidDecision as exc:
            self._send_json(422, {"error": str(exc)})
            return
        self._send_json(201, {"id": decision.id})


class ReviewServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, app: ReviewApp, port: int, ui_dir: Path | None = None) -> None:
        self.app = app
        self.ui_dir = Path(ui_dir) if ui_dir else None
        super().__init__(("127.0.0.1", port), _ReviewHandler)


def serve(run_dir: Path, port: int, ui_dir: Path | None = None) -> ReviewServer:
    """Bind the review service on localhost:port (raises OSError if busy)."""
    return ReviewServer(ReviewApp(run_dir), port, ui_dir)
