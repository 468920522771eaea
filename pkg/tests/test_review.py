"""Review service: endpoints, decision log fold, event-sourcing replay."""

from __future__ import annotations

import json
import threading
from pathlib import Path

import pytest
import requests

from harakit.pipeline import run_pipeline
from harakit.review import (
    DecisionKind,
    InvalidDecision,
    ReviewApp,
    ReviewServer,
    decision_from_dict,
    fold_decisions,
)

from conftest import build_standard_fixtures, std_config


@pytest.fixture
def run_dir(tmp_path, caem_item):
    fixtures = build_standard_fixtures(tmp_path / "fixtures")
    directory = tmp_path / "run"
    run_pipeline(caem_item, std_config(fixtures), directory)
    return directory


@pytest.fixture
def app(run_dir) -> ReviewApp:
    return ReviewApp(run_dir)


@pytest.fixture
def server(app):
    srv = ReviewServer(app, port=0)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv
    srv.shutdown()
    srv.server_close()


def _url(server: ReviewServer, path: str) -> str:
    return f"http://127.0.0.1:{server.server_address[1]}{path}"


# --- reads -------------------------------------------------------------------------


def test_get_hara_row_count_matches_table_json(server, run_dir):
    table_doc = json.loads((run_dir / "table.json").read_text())
    response = requests.get(_url(server, "/hara"), timeout=5)
    assert response.status_code == 200
    assert len(response.json()["rows"]) == len(table_doc["rows"])


def test_get_row_includes_goals_and_explanation(server):
    response = requests.get(_url(server, "/hara/rows/HE-0001"), timeout=5)
    assert response.status_code == 200
    payload = response.json()
    assert payload["row"]["id"] == "HE-0001"
    assert set(payload["row"]["explanation"]) == {"background", "assumptions", "reasoning"}
    assert len(payload["goals"]) == 4


def test_get_unknown_row_404(server):
    assert requests.get(_url(server, "/hara/rows/HE-9999"), timeout=5).status_code == 404


def test_unknown_endpoint_404_without_ui(server):
    assert requests.get(_url(server, "/nope"), timeout=5).status_code == 404


def test_get_context_resolves_row_refs(server):
    context = requests.get(_url(server, "/context"), timeout=5).json()
    table = requests.get(_url(server, "/hara"), timeout=5).json()
    malfunction_ids = {m["id"] for m in context["malfunctions"]}
    scenario_ids = {s["id"] for s in context["scenarios"]}
    for row in table["rows"]:
        assert row["malfunction_ref"] in malfunction_ids
        assert row["scenario_ref"] in scenario_ids
    assert {m["guide_word"] for m in context["malfunctions"]} == {"omission", "commission"}


# --- decisions ------------------------------------------------------------------------


def _post(server, body) -> requests.Response:
    return requests.post(_url(server, "/decisions"), json=body, timeout=5)


def test_accept_goal_roundtrip(server):
    response = _post(
        server,
        {"target": "SG-0003", "kind": "accept_goal", "reviewer": "expert-1", "payload": {}},
    )
    assert response.status_code == 201
    assert response.json()["id"] == "D-0001"
    table = requests.get(_url(server, "/hara"), timeout=5).json()
    statuses = {g["id"]: g["status"] for g in table["goals"]}
    assert statuses["SG-0003"] == "accepted"


def test_reject_then_accept_latest_wins(server):
    _post(server, {"target": "SG-0001", "kind": "reject_goal", "reviewer": "expert-1"})
    _post(server, {"target": "SG-0001", "kind": "accept_goal", "reviewer": "expert-1"})
    table = requests.get(_url(server, "/hara"), timeout=5).json()
    statuses = {g["id"]: g["status"] for g in table["goals"]}
    assert statuses["SG-0001"] == "accepted"


def test_invalid_decisions_rejected_422(server):
    cases = [
        {"target": "SG-0001", "kind": "verdict", "reviewer": "r", "payload": {"raw_score": 3}},
        {"target": "g", "kind": "verdict", "reviewer": "r", "payload": {"raw_score": 6}},
        {"target": "HE-9999", "kind": "comment", "reviewer": "r", "payload": {"text": "x"}},
        {"target": "SG-0001", "kind": "launch_missiles", "reviewer": "r"},
        {"target": "SG-0001", "kind": "accept_goal", "reviewer": ""},
        {
            "target": "SG-0001",
            "kind": "resolve_redundancy",
            "reviewer": "r",
            "payload": {"other": "SG-0002", "resolution": "discard_both"},
        },
    ]
    for body in cases:
        assert _post(server, body).status_code == 422, body


def test_comment_may_target_goal_event_or_criterion(server):
    for target in ("SG-0001", "HE-0001", "g"):
        response = _post(
            server,
            {"target": target, "kind": "comment", "reviewer": "r1", "payload": {"text": "note"}},
        )
        assert response.status_code == 201, target
    assert _post(
        server,
        {"target": "zz", "kind": "comment", "reviewer": "r1", "payload": {"text": "note"}},
    ).status_code == 422


def test_decision_log_is_append_only_jsonl(server, run_dir):
    _post(server, {"target": "SG-0001", "kind": "accept_goal", "reviewer": "r1"})
    _post(
        server,
        {"target": "HE-0001", "kind": "comment", "reviewer": "r1", "payload": {"text": "check"}},
    )
    lines = (run_dir / "decisions.jsonl").read_text().strip().split("\n")
    assert len(lines) == 2
    assert all(json.loads(line)["id"].startswith("D-") for line in lines)


def test_table_json_bit_identical_after_review_session(server, run_dir):
    before = (run_dir / "table.json").read_bytes()
    _post(server, {"target": "SG-0001", "kind": "accept_goal", "reviewer": "r1"})
    _post(server, {"target": "SG-0002", "kind": "reject_goal", "reviewer": "r1"})
    after = (run_dir / "table.json").read_bytes()
    assert before == after


# --- scores ----------------------------------------------------------------------------


def test_scores_mean_for_five_reviewers(server):
    for i, score in enumerate([5, 5, 4, 3, 4]):
        response = _post(
            server,
            {
                "target": "g",
                "kind": "verdict",
                "reviewer": f"expert-{i}",
                "payload": {"raw_score": score},
            },
        )
        assert response.status_code == 201
    scores = requests.get(_url(server, "/scores"), timeout=5).json()
    assert scores["g"]["mean"] == 3.5
    assert scores["g"]["n_excluded"] == 1


def test_scores_empty_and_all_no_opinion(server):
    assert requests.get(_url(server, "/scores"), timeout=5).json() == {}
    for i in range(3):
        _post(
            server,
            {
                "target": "b",
                "kind": "verdict",
                "reviewer": f"expert-{i}",
                "payload": {"raw_score": 3},
            },
        )
    scores = requests.get(_url(server, "/scores"), timeout=5).json()
    assert scores["b"] == {"criterion": "b", "no_data": True}


def test_repeated_verdict_by_same_reviewer_latest_wins(server):
    _post(server, {"target": "g", "kind": "verdict", "reviewer": "r1", "payload": {"raw_score": 1}})
    _post(server, {"target": "g", "kind": "verdict", "reviewer": "r1", "payload": {"raw_score": 5}})
    scores = requests.get(_url(server, "/scores"), timeout=5).json()
    assert scores["g"]["mean"] == 4.0
    assert scores["g"]["n_used"] == 1


# --- export and replay ---------------------------------------------------------------------


def test_export_contains_all_decisions_and_ten_criteria(server):
    for i in range(3):
        _post(
            server,
            {
                "target": "HE-0001",
                "kind": "comment",
                "reviewer": "r1",
                "payload": {"text": f"note {i}"},
            },
        )
    package = requests.get(_url(server, "/export/review-package"), timeout=5).json()
    assert len(package["decisions"]) == 3
    assert [c["letter"] for c in package["checklist"]["criteria"]] == list("abcdefghij")


def test_export_byte_stable_without_new_decisions(server):
    _post(server, {"target": "SG-0001", "kind": "accept_goal", "reviewer": "r1"})
    first = requests.get(_url(server, "/export/review-package"), timeout=5).content
    second = requests.get(_url(server, "/export/review-package"), timeout=5).content
    assert first == second


def test_replaying_log_reproduces_state(server, run_dir, app):
    _post(server, {"target": "SG-0001", "kind": "accept_goal", "reviewer": "r1"})
    _post(server, {"target": "SG-0002", "kind": "reject_goal", "reviewer": "r2"})
    _post(server, {"target": "g", "kind": "verdict", "reviewer": "r1", "payload": {"raw_score": 4}})
    replayed = [
        decision_from_dict(json.loads(line))
        for line in (run_dir / "decisions.jsonl").read_text().splitlines()
        if line.strip()
    ]
    assert fold_decisions(replayed) == app.state()
    fresh = ReviewApp(run_dir)
    assert fresh.state() == app.state()
    assert fresh.export_review_package() == app.export_review_package()


def test_prefer_strategy_and_resolution_state(app):
    app.post_decision(
        {
            "target": "HE-0001",
            "kind": "prefer_strategy",
            "reviewer": "r1",
            "payload": {"strategy": "reduce_severity"},
        }
    )
    app.post_decision(
        {
            "target": "SG-0001",
            "kind": "resolve_redundancy",
            "reviewer": "r1",
            "payload": {"other": "SG-0005", "resolution": "keep_a", "note": "more general"},
        }
    )
    state = app.state()
    assert state.preferred_strategy["HE-0001"] == "reduce_severity"
    assert state.resolutions[("SG-0001", "SG-0005")]["resolution"] == "keep_a"


def test_accepted_goal_set_subset_of_generated(app):
    app.post_decision({"target": "SG-0001", "kind": "accept_goal", "reviewer": "r1"})
    state = app.state()
    generated = {g.id for g in app.table.goals}
    accepted = {
        gid for gid, status in state.goal_status.items() if status.value == "accepted"
    }
    assert accepted <= generated


def test_validate_decision_direct_errors(app):
    with pytest.raises(InvalidDecision):
        app.validate_decision({"target": "SG-0001", "kind": "verdict", "reviewer": "r"})
    with pytest.raises(InvalidDecision):
        app.validate_decision(
            {"target": "HE-0001", "kind": "prefer_strategy", "reviewer": "r", "payload": {"strategy": "x"}}
        )
