"""Pipeline steps and orchestration: rule steps against brute-force oracles,
LLM steps against authored fixtures, checkpoint/resume semantics."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import pytest

from harakit.llm import LlmClient, MockBackend
from harakit.model import (
    GoalStatus,
    GoalStrategy,
    HazardousEvent,
    IdAllocator,
    Malfunction,
    MalfunctionSource,
    OperationalScenario,
    Severity,
    default_guideword_catalogue,
    table_from_dict,
)
from harakit.pipeline import (
    CombineError,
    PipelineConfig,
    PipelineFailed,
    PipelineRun,
    assess_severity,
    cluster_and_select,
    combine,
    enumerate_malfunctions,
    formulate_hazardous_event,
    gate_for_goals,
    generate_scenarios,
    greedy_select,
    run_pipeline,
    specify_safety_goals,
)
from harakit.prompts import RepairFailed, load_templates
from harakit.prompts import DEFAULT_KEY_TERMS as DEFS
from harakit.quality import check_consistency

from conftest import (
    CONSEQUENCE_TEXTS,
    GOAL_TEXTS,
    MALFUNCTION_TEXTS,
    STANDARD_SEVERITIES,
    build_standard_fixtures,
    std_config,
    structured,
    write_fixture,
)

TEMPLATES = load_templates()


def _scenario(sc_id: str, core: str = "core", **factors) -> OperationalScenario:
    return OperationalScenario(
        id=sc_id,
        core_summary=core,
        detailed_description=f"details for {core}",
        factors={k: tuple(v) for k, v in factors.items()},
    )


def _malfunction(mf_id: str, ref: int = 0, gw: str = "omission") -> Malfunction:
    return Malfunction(
        id=mf_id,
        output_ref=ref,
        guide_word=gw,
        description=f"{gw} of output {ref}",
        source=MalfunctionSource.LLM_EXPANDED,
    )


# --- combine against a brute-force oracle ------------------------------------------


def brute_force_pairs(scenarios, malfunctions):
    """Independent cartesian-product oracle: ordered scenario-major pairs."""
    pairs = []
    for s in scenarios:
        for m in malfunctions:
            pairs.append((s.id, m.id))
    return pairs


@pytest.mark.parametrize("m,n", [(1, 1), (2, 3), (3, 4), (6, 6)])
def test_combine_matches_oracle(m, n):
    scenarios = [_scenario(f"SC-{i:04d}") for i in range(1, m + 1)]
    malfunctions = [_malfunction(f"MF-{i:04d}") for i in range(1, n + 1)]
    drafts = combine(scenarios, malfunctions)
    assert len(drafts) == m * n
    assert [(d.scenario_ref, d.malfunction_ref) for d in drafts] == brute_force_pairs(
        scenarios, malfunctions
    )
    assert [d.id for d in drafts] == [f"HE-{i:04d}" for i in range(1, m * n + 1)]


def test_combine_rejects_empty_and_duplicate_inputs():
    with pytest.raises(CombineError):
        combine([], [_malfunction("MF-0001")])
    with pytest.raises(CombineError):
        combine([_scenario("SC-0001")], [])
    with pytest.raises(CombineError):
        combine([_scenario("SC-0001"), _scenario("SC-0001")], [_malfunction("MF-0001")])


def test_combine_output_order_stable_across_runs():
    scenarios = [_scenario(f"SC-{i:04d}") for i in range(1, 4)]
    malfunctions = [_malfunction(f"MF-{i:04d}") for i in range(1, 3)]
    first = combine(scenarios, malfunctions)
    second = combine(scenarios, malfunctions)
    assert first == second


# --- scenario generation --------------------------------------------------------------


def test_generate_scenarios_from_fixture(caem_item, mock_client):
    scenarios, warnings = generate_scenarios(
        caem_item, 3, client=mock_client, template=TEMPLATES["scenarios"], definitions=DEFS
    )
    assert len(scenarios) == 3
    assert all(s.core_summary for s in scenarios)
    assert scenarios[0].id == "SC-0001"
    assert scenarios[0].factors["objects"] == ("pedestrian on crossing", "oncoming car")
    assert warnings == []


def test_generate_scenarios_missing_factor_block_keeps_scenario(tmp_path, caem_item):
    write_fixture(
        tmp_path,
        "scenarios.default",
        structured("1. Core: A scenario without factors.\nDetails: Something happens."),
    )
    client = LlmClient(MockBackend(tmp_path), backoff=(0.0,))
    scenarios, warnings = generate_scenarios(
        caem_item, 1, client=client, template=TEMPLATES["scenarios"], definitions=DEFS
    )
    assert len(scenarios) == 1
    assert scenarios[0].factors == {}
    assert any("missing factor block" in w for w in warnings)


def test_generate_scenarios_all_malformed_fails_pipeline(tmp_path, caem_item):
    write_fixture(tmp_path, "scenarios.default", structured("no numbered entries here"))
    client = LlmClient(MockBackend(tmp_path), backoff=(0.0,))
    with pytest.raises(PipelineFailed):
        generate_scenarios(
            caem_item, 3, client=client, template=TEMPLATES["scenarios"], definitions=DEFS
        )


# --- selection --------------------------------------------------------------------------


def test_select_identity_when_k_equals_count():
    scenarios = [_scenario(f"SC-{i:04d}") for i in range(1, 4)]
    selected = cluster_and_select(scenarios, 3)
    assert [s.id for s in selected] == ["SC-0001", "SC-0002", "SC-0003"]
    assert all(s.cluster_id == s.id for s in selected)


def test_greedy_select_avoids_identical_duplicates():
    # SC-0001 and SC-0002 share identical factors; k=2 must not pick both.
    scenarios = [
        _scenario("SC-0001", road=("urban",), objects=("pedestrian",)),
        _scenario("SC-0002", road=("urban",), objects=("pedestrian",)),
        _scenario("SC-0003", road=("highway",), objects=("truck",)),
        _scenario("SC-0004", road=("rural",), objects=("cyclist",)),
    ]
    selected = greedy_select(scenarios, 2)
    ids = {s.id for s in selected}
    assert len(ids & {"SC-0001", "SC-0002"}) <= 1
    # hand-run: all tie at 2 new pairs -> SC-0001 first; duplicates add zero,
    # SC-0003 precedes SC-0004 lexicographically at equal gain
    assert [s.id for s in selected] == ["SC-0001", "SC-0003"]


def test_llm_select_uses_listed_ids(tmp_path):
    scenarios = [
        _scenario(f"SC-{i:04d}", road=(f"road{i}",)) for i in range(1, 5)
    ]
    write_fixture(tmp_path, "select.default", structured("Selected: SC-0002, SC-0004"))
    client = LlmClient(MockBackend(tmp_path), backoff=(0.0,))
    selected = cluster_and_select(
        scenarios, 2, client=client, template=TEMPLATES["select"], definitions=DEFS
    )
    assert [s.id for s in selected] == ["SC-0002", "SC-0004"]


def test_llm_select_unknown_ids_falls_back_deterministically(tmp_path):
    scenarios = [
        _scenario("SC-0001", road=("urban",)),
        _scenario("SC-0002", road=("highway",)),
        _scenario("SC-0003", road=("rural",)),
    ]
    write_fixture(tmp_path, "select.default", structured("Selected: SC-0001, SC-9999"))
    client = LlmClient(MockBackend(tmp_path), backoff=(0.0,))
    warnings: list[str] = []
    selected = cluster_and_select(
        scenarios,
        2,
        client=client,
        template=TEMPLATES["select"],
        definitions=DEFS,
        warnings=warnings,
    )
    assert [s.id for s in selected] == [s.id for s in greedy_select(scenarios, 2)]
    assert any("unknown or wrong-count" in w for w in warnings)


def test_select_rejects_k_above_count():
    with pytest.raises(ValueError):
        cluster_and_select([_scenario("SC-0001")], 2)


# --- malfunction enumeration ------------------------------------------------------------


def test_cross_product_cardinality_one_output(caem_item, mock_client):
    malfunctions, warnings = enumerate_malfunctions(
        caem_item,
        default_guideword_catalogue(),
        client=mock_client,
        template=TEMPLATES["malfunction"],
        definitions=DEFS,
    )
    assert len(malfunctions) == 2
    assert [(m.output_ref, m.guide_word) for m in malfunctions] == [
        (0, "omission"),
        (0, "commission"),
    ]
    assert all(m.source is MalfunctionSource.LLM_EXPANDED for m in malfunctions)
    assert warnings == []


def test_cross_product_two_outputs_three_guide_words():
    from harakit.model import validate_item_definition

    item = validate_item_definition(
        {
            "id": "X",
            "function_name": "F",
            "description": "does things",
            "function_outputs": ["steer request", "brake request"],
        }
    )
    catalogue = default_guideword_catalogue(extensions=True)[:3]
    malfunctions, _ = enumerate_malfunctions(item, catalogue)
    assert len(malfunctions) == 6
    pairs = [(m.output_ref, m.guide_word) for m in malfunctions]
    assert len(set(pairs)) == 6


def test_expansion_fixture_mentions_unintended_lateral_motion(caem_item, mock_client):
    malfunctions, _ = enumerate_malfunctions(
        caem_item,
        default_guideword_catalogue(),
        client=mock_client,
        template=TEMPLATES["malfunction"],
        definitions=DEFS,
    )
    commission = next(m for m in malfunctions if m.guide_word == "commission")
    assert "unintended lateral motion" in commission.description


def test_expansion_miss_keeps_templated_stub(tmp_path, caem_item):
    # no malfunction fixtures at all
    write_fixture(tmp_path, "unused.default", structured("x"))
    client = LlmClient(MockBackend(tmp_path), backoff=(0.0,))
    malfunctions, warnings = enumerate_malfunctions(
        caem_item,
        default_guideword_catalogue(),
        client=client,
        template=TEMPLATES["malfunction"],
        definitions=DEFS,
    )
    assert malfunctions[0].description == "omission of lateral motion request"
    assert malfunctions[0].source is MalfunctionSource.RULE_ENUMERATED
    assert len(warnings) == 2


# --- event formulation and severity --------------------------------------------------------


def _draft_context(fixture_dir, caem_item):
    client = LlmClient(MockBackend(fixture_dir), backoff=(0.0,))
    scenarios, _ = generate_scenarios(
        caem_item, 3, client=client, template=TEMPLATES["scenarios"], definitions=DEFS
    )
    malfunctions, _ = enumerate_malfunctions(
        caem_item,
        default_guideword_catalogue(),
        client=client,
        template=TEMPLATES["malfunction"],
        definitions=DEFS,
    )
    drafts = combine(scenarios, malfunctions)
    return client, scenarios, malfunctions, drafts


def test_formulate_names_scenario_agents_and_bundles_explanation(fixture_dir, caem_item):
    client, scenarios, malfunctions, drafts = _draft_context(fixture_dir, caem_item)
    event = formulate_hazardous_event(
        drafts[0],
        scenarios[0],
        malfunctions[0],
        caem_item,
        client=client,
        template=TEMPLATES["hazardous_event"],
        definitions=DEFS,
    )
    assert "pedestrian" in event.consequence
    assert event.explanation.background
    assert event.explanation.reasoning


def test_assess_severity_parses_labeled_field(fixture_dir, caem_item):
    client, scenarios, malfunctions, drafts = _draft_context(fixture_dir, caem_item)
    event = formulate_hazardous_event(
        drafts[0], scenarios[0], malfunctions[0], caem_item,
        client=client, template=TEMPLATES["hazardous_event"], definitions=DEFS,
    )
    assessed = assess_severity(
        event, scenarios[0], malfunctions[0],
        client=client, template=TEMPLATES["severity"], definitions=DEFS,
    )
    assert assessed.severity is Severity.S2
    assert assessed.severity_rationale
    assert assessed.kinematic_rationale  # assumptions carry the kinematic estimate


def test_assess_severity_out_of_range_is_row_failure(tmp_path, fixture_dir, caem_item):
    client, scenarios, malfunctions, drafts = _draft_context(fixture_dir, caem_item)
    event = formulate_hazardous_event(
        drafts[0], scenarios[0], malfunctions[0], caem_item,
        client=client, template=TEMPLATES["hazardous_event"], definitions=DEFS,
    )
    write_fixture(
        fixture_dir, "severity.HE-0001", structured("Severity: S5\nRationale: wrong")
    )
    fresh_client = LlmClient(MockBackend(fixture_dir), backoff=(0.0,))
    with pytest.raises(RepairFailed) as excinfo:
        assess_severity(
            event, scenarios[0], malfunctions[0],
            client=fresh_client, template=TEMPLATES["severity"], definitions=DEFS,
        )
    assert "S5" in str(excinfo.value)


def test_identical_consequences_with_different_severities_both_stored(tmp_path, caem_item):
    fixtures = build_standard_fixtures(tmp_path / "f")
    # same consequence text for HE-0001/HE-0002; their severities already
    # differ (S2 vs S0) in the standard corpus
    same = "The host vehicle strikes the pedestrian on the crossing."
    for he in ("HE-0001", "HE-0002"):
        write_fixture(fixtures, f"hazardous_event.{he}", structured(same))
    cfg = std_config(fixtures)
    table = run_pipeline(caem_item, cfg, tmp_path / "run")
    rows = {r.id: r for r in table.rows}
    assert rows["HE-0001"].severity is Severity.S2
    assert rows["HE-0002"].severity is Severity.S0
    findings = check_consistency(table)
    assert any(
        "HE-0001" in f.message and "HE-0002" in f.message
        for f in findings
        if f.rule_id == "inconsistent_severity"
    )


# --- gate ---------------------------------------------------------------------------------


def _assessed(he_id: str, severity: Severity) -> HazardousEvent:
    return HazardousEvent(
        id=he_id,
        scenario_ref="SC-0001",
        malfunction_ref="MF-0001",
        consequence="something happens",
        severity=severity,
        severity_rationale="estimate",
    )


def test_gate_filters_in_table_order():
    events = [
        _assessed("HE-0001", Severity.S0),
        _assessed("HE-0002", Severity.S2),
        _assessed("HE-0003", Severity.S1),
        _assessed("HE-0004", Severity.S0),
    ]
    assert gate_for_goals(events) == ["HE-0002", "HE-0003"]


def test_gate_all_s0_empty_and_all_s3_full():
    all_s0 = [_assessed(f"HE-{i:04d}", Severity.S0) for i in range(1, 4)]
    all_s3 = [_assessed(f"HE-{i:04d}", Severity.S3) for i in range(1, 4)]
    assert gate_for_goals(all_s0) == []
    assert gate_for_goals(all_s3) == [e.id for e in all_s3]


# --- goal specification -------------------------------------------------------------------


def test_four_strategies_from_empty_buffer(fixture_dir, caem_item, mock_client):
    scenario = _scenario("SC-0001", core="Pedestrian steps onto an urban crossing ahead of the host vehicle.")
    malfunction = Malfunction(
        "MF-0001", 0, "omission", MALFUNCTION_TEXTS["MF-0001"], MalfunctionSource.LLM_EXPANDED
    )
    event = _assessed("HE-0001", Severity.S2)
    buffer: list = []
    goals, findings = specify_safety_goals(
        event, scenario, malfunction, list(GoalStrategy), buffer,
        ids=IdAllocator(), client=mock_client, templates=TEMPLATES, definitions=DEFS,
    )
    assert len(goals) == 4
    assert [g.strategy for g in goals] == list(GoalStrategy)
    assert all(g.status is GoalStatus.PROPOSED for g in goals)
    assert [g.id for g in goals] == [f"SG-{i:04d}" for i in range(1, 5)]
    assert len(buffer) == 4


def test_byte_identical_buffer_goal_reused_without_generation_call(fixture_dir, caem_item):
    from harakit.model import SafetyGoal
    from harakit.pipeline import draft_goal_candidate

    scenario = _scenario("SC-0001", core="a core scenario")
    malfunction = Malfunction(
        "MF-0001", 0, "omission", "the function fails to act", MalfunctionSource.LLM_EXPANDED
    )
    event = _assessed("HE-0001", Severity.S2)
    draft = draft_goal_candidate(
        GoalStrategy.AVOID_FAILURE_MODE, malfunction.description, scenario.core_summary
    )
    buffer = [
        SafetyGoal(
            id="SG-0777",
            text=draft,
            strategy=GoalStrategy.AVOID_FAILURE_MODE,
            covered_events=("HE-0000",),
        )
    ]
    ids = IdAllocator()
    ids.reserve(["SG-0777"])
    backend = MockBackend(fixture_dir)
    client = LlmClient(backend, backoff=(0.0,))
    goals, findings = specify_safety_goals(
        event, scenario, malfunction, [GoalStrategy.AVOID_FAILURE_MODE], buffer,
        ids=ids, client=client, templates=TEMPLATES, definitions=DEFS,
    )
    assert backend.calls == 0
    assert len(goals) == 1
    assert goals[0].status is GoalStatus.REUSED_EXISTING
    assert goals[0].text == draft
    assert "SG-0777" in goals[0].explanation.background
    assert findings and findings[0].relation.value == "duplicate"
    assert findings[0].goal_a == goals[0].id and findings[0].goal_b == "SG-0777"
    # reused goals introduce no new buffer text
    assert len(buffer) == 1


def test_goal_text_retained_verbatim_and_linted_downstream(tmp_path, caem_item):
    fixtures = build_standard_fixtures(tmp_path / "f")
    capped = (
        "CAEM shall cap the maximum allowed speed when necessary to limit harm."
    )
    write_fixture(fixtures, "goal.HE-0001.reduce_severity", structured(capped))
    scenario = _scenario("SC-0001", core="Pedestrian steps onto an urban crossing ahead of the host vehicle.")
    malfunction = Malfunction(
        "MF-0001", 0, "omission", MALFUNCTION_TEXTS["MF-0001"], MalfunctionSource.LLM_EXPANDED
    )
    event = _assessed("HE-0001", Severity.S2)
    client = LlmClient(MockBackend(fixtures), backoff=(0.0,))
    goals, _ = specify_safety_goals(
        event, scenario, malfunction, [GoalStrategy.REDUCE_SEVERITY], [],
        ids=IdAllocator(), client=client, templates=TEMPLATES, definitions=DEFS,
    )
    assert goals[0].text == capped
    assert any(f.rule_id == "vague_phrase" for f in goals[0].lint_findings)


def test_goal_parse_failure_skips_strategy_with_warning(tmp_path, caem_item):
    fixtures = build_standard_fixtures(tmp_path / "f")
    write_fixture(fixtures, "goal.HE-0001.restrict_exposure", "## background\nonly")
    write_fixture(fixtures, "goal.HE-0001.restrict_exposure-repair", "## background\nonly")
    scenario = _scenario("SC-0001", core="Pedestrian steps onto an urban crossing ahead of the host vehicle.")
    malfunction = Malfunction(
        "MF-0001", 0, "omission", MALFUNCTION_TEXTS["MF-0001"], MalfunctionSource.LLM_EXPANDED
    )
    event = _assessed("HE-0001", Severity.S2)
    client = LlmClient(MockBackend(fixtures), backoff=(0.0,))
    warnings: list[str] = []
    goals, _ = specify_safety_goals(
        event, scenario, malfunction,
        [GoalStrategy.AVOID_FAILURE_MODE, GoalStrategy.RESTRICT_EXPOSURE], [],
        ids=IdAllocator(), client=client, templates=TEMPLATES, definitions=DEFS,
        warnings=warnings,
    )
    assert [g.strategy for g in goals] == [GoalStrategy.AVOID_FAILURE_MODE]
    assert any("restrict_exposure" in w and "skipped" in w for w in warnings)


# --- end to end, checkpoints, resume -----------------------------------------------------


EXPECTED_STANDARD_CALLS = 1 + 2 + 6 + 6 + 12  # scenarios + expand + formulate + severity + goals


def test_standard_run_counts_and_invariants(tmp_path, caem_item, std_cfg):
    backend = MockBackend(std_cfg.fixtures)
    client = LlmClient(backend, backoff=(0.0,))
    table = run_pipeline(caem_item, std_cfg, tmp_path / "run", client=client)
    assert len(table.rows) == 6
    severities = [r.severity.label for r in table.rows]
    assert severities == list(STANDARD_SEVERITIES)
    assert len(table.goals) == 12
    gated = {r.id for r in table.rows if r.severity.rank > 0}
    assert gated == {"HE-0001", "HE-0003", "HE-0004"}
    for row_id in gated:
        strategies = sorted(g.strategy.value for g in table.goals_for(row_id))
        assert strategies == sorted(s.value for s in GoalStrategy)
    assert table.uncovered_gated_rows() == []
    assert backend.calls == EXPECTED_STANDARD_CALLS
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["counts"]["rows"] == 6
    assert report["counts"]["goals"] == 12
    assert report["failed_rows"] == []
    assert report["referential_integrity_problems"] == []


def test_failed_row_excluded_from_severity_but_reported(tmp_path, caem_item):
    fixtures = build_standard_fixtures(tmp_path / "f")
    (fixtures / "hazardous_event.HE-0006.json").unlink()
    cfg = std_config(fixtures)
    table = run_pipeline(caem_item, cfg, tmp_path / "run")
    assert len(table.rows) == 5
    assert "HE-0006" not in {r.id for r in table.rows}
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert any(
        f["id"] == "HE-0006" and f["step"] == "hazardous_event"
        for f in report["failed_rows"]
    )


def test_rerun_unchanged_makes_zero_llm_calls(tmp_path, caem_item, std_cfg):
    run_dir = tmp_path / "run"
    run_pipeline(caem_item, std_cfg, run_dir)
    backend = MockBackend(std_cfg.fixtures)
    client = LlmClient(backend, backoff=(0.0,))
    table = run_pipeline(caem_item, std_cfg, run_dir, client=client)
    assert backend.calls == 0
    assert len(table.rows) == 6


def test_item_edit_invalidates_every_step(tmp_path, caem_item, std_cfg):
    run_dir = tmp_path / "run"
    run_pipeline(caem_item, std_cfg, run_dir)
    edited = dataclasses.replace(
        caem_item, description=caem_item.description + " Updated wording."
    )
    backend = MockBackend(std_cfg.fixtures)
    client = LlmClient(backend, backoff=(0.0,))
    run_pipeline(edited, std_cfg, run_dir, client=client)
    assert backend.calls == EXPECTED_STANDARD_CALLS


def test_tampered_artifact_reruns_its_producer(tmp_path, caem_item, std_cfg):
    run_dir = tmp_path / "run"
    run_pipeline(caem_item, std_cfg, run_dir)
    scenario_doc = json.loads((run_dir / "scenarios.json").read_text())
    scenario_doc["scenarios"][0]["core_summary"] = "tampered"
    (run_dir / "scenarios.json").write_text(json.dumps(scenario_doc))
    table = run_pipeline(caem_item, std_cfg, run_dir)
    restored = json.loads((run_dir / "scenarios.json").read_text())
    assert restored["scenarios"][0]["core_summary"] != "tampered"
    assert len(table.rows) == 6


def test_interrupt_and_resume_each_step_yields_identical_table(tmp_path, caem_item, std_cfg):
    baseline_dir = tmp_path / "baseline"
    run_pipeline(caem_item, std_cfg, baseline_dir)
    baseline = json.loads((baseline_dir / "table.json").read_text())
    baseline["provenance"]["created_at"] = None

    first_six = ("scenarios", "select", "malfunctions", "combine", "hazardous_event", "severity")
    for step in first_six:
        run_dir = tmp_path / f"run-{step}"
        backend_a = MockBackend(std_cfg.fixtures)
        run_pipeline(
            caem_item, std_cfg, run_dir,
            client=LlmClient(backend_a, backoff=(0.0,)),
            stop_after=step,
        )
        backend_b = MockBackend(std_cfg.fixtures)
        table = run_pipeline(
            caem_item, std_cfg, run_dir, client=LlmClient(backend_b, backoff=(0.0,))
        )
        assert table is not None
        resumed = json.loads((run_dir / "table.json").read_text())
        resumed["provenance"]["created_at"] = None
        assert resumed == baseline
        # no completed step repeated a call
        assert backend_a.calls + backend_b.calls == EXPECTED_STANDARD_CALLS


def _normalized_transcripts(run_dir: Path) -> dict[str, str]:
    normalized = {}
    for path in sorted((run_dir / "transcripts").glob("*.json")):
        doc = json.loads(path.read_text())
        for entry in doc["entries"]:
            entry["wall_time_ms"] = None
        normalized[path.name] = json.dumps(doc, sort_keys=True)
    return normalized


def test_two_fresh_runs_byte_identical_excluding_timestamp(tmp_path, caem_item, std_cfg):
    run_pipeline(caem_item, std_cfg, tmp_path / "a")
    run_pipeline(caem_item, std_cfg, tmp_path / "b")
    table_a = json.loads((tmp_path / "a" / "table.json").read_text())
    table_b = json.loads((tmp_path / "b" / "table.json").read_text())
    table_a["provenance"]["created_at"] = table_b["provenance"]["created_at"] = None
    assert json.dumps(table_a, sort_keys=True) == json.dumps(table_b, sort_keys=True)
    # replay determinism extends to the transcripts (wall time excluded)
    assert _normalized_transcripts(tmp_path / "a") == _normalized_transcripts(tmp_path / "b")


def test_step_prompts_reference_only_upstream_artifacts(tmp_path, caem_item, std_cfg):
    # scenario prompts must not carry text that only later steps produce
    run_dir = tmp_path / "run"
    run_pipeline(caem_item, std_cfg, run_dir)
    goal_texts = [text for (_, _), text in GOAL_TEXTS.items()]
    consequences = list(CONSEQUENCE_TEXTS.values())
    scenario_entries = json.loads(
        (run_dir / "transcripts" / "scenarios.json").read_text()
    )["entries"]
    severity_entries = json.loads(
        (run_dir / "transcripts" / "severity.json").read_text()
    )["entries"]
    for entry in scenario_entries:
        prompt = " ".join(m["content"] for m in entry["request"]["messages"])
        for text in goal_texts + consequences:
            assert text not in prompt
    for entry in severity_entries:
        prompt = " ".join(m["content"] for m in entry["request"]["messages"])
        for text in goal_texts:
            assert text not in prompt


def test_parallel_run_matches_serial_run(tmp_path, caem_item, fixture_dir):
    serial = std_config(fixture_dir, parallelism=1)
    parallel = std_config(fixture_dir, parallelism=4)
    run_pipeline(caem_item, serial, tmp_path / "serial")
    run_pipeline(caem_item, parallel, tmp_path / "parallel")
    a = json.loads((tmp_path / "serial" / "table.json").read_text())
    b = json.loads((tmp_path / "parallel" / "table.json").read_text())
    a["provenance"]["created_at"] = b["provenance"]["created_at"] = None
    assert a == b


def test_run_report_written_on_pipeline_failure(tmp_path, caem_item):
    fixtures = tmp_path / "f"
    write_fixture(fixtures, "scenarios.default", structured("nothing parseable"))
    cfg = std_config(fixtures)
    with pytest.raises(PipelineFailed):
        run_pipeline(caem_item, cfg, tmp_path / "run")
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["pipeline_failed"]["step"] == "scenarios"


def test_provenance_records_model_temperatures_and_prompt_version(tmp_path, caem_item, std_cfg):
    table = run_pipeline(caem_item, std_cfg, tmp_path / "run")
    assert table.provenance.model_name == "mock"
    assert table.provenance.temperature_by_step["severity"] == 0.0
    assert table.provenance.temperature_by_step["goal"] == 0.7
    assert len(table.provenance.prompt_version) == 16


def test_transcript_call_count_bound_per_row_per_step(tmp_path, caem_item, std_cfg):
    run_dir = tmp_path / "run"
    run_pipeline(caem_item, std_cfg, run_dir)
    for transcript in (run_dir / "transcripts").glob("*.json"):
        entries = json.loads(transcript.read_text())["entries"]
        per_row: dict[tuple, int] = {}
        for entry in entries:
            key = (entry["request"]["step_id"], (entry["request"]["row_key"] or "").removesuffix("-repair"))
            per_row[key] = per_row.get(key, 0) + 1
        assert all(count <= 2 for count in per_row.values())
