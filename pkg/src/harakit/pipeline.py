"""Staged execution from item definition to the final analysis table.

LLM steps (scenario generation, malfunction expansion, event formulation,
severity classification, goal specification, redundancy classification) are
interleaved with deterministic rule-based steps (combination, gating,
selection fallback) that need completeness, not creativity. Every step
persists its artifact and a checkpoint; an unchanged step is never re-run,
and steps exchange data only through the persisted artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .llm import (
    BackendError,
    LlmClient,
    MockBackend,
    RealBackend,
    sort_transcript,
    transcript_entry_to_dict,
)
from .model import (
    ExplanationBundle,
    GoalStatus,
    GoalStrategy,
    GuideWord,
    HaraTable,
    HazardousEvent,
    IdAllocator,
    ItemDefinition,
    Malfunction,
    MalfunctionSource,
    ModelError,
    OperationalScenario,
    Provenance,
    RedundancyFinding,
    SafetyGoal,
    ScenarioSource,
    Severity,
    SCENARIO_LAYERS,
    check_referential_integrity,
    default_guideword_catalogue,
    dump_json,
    event_from_dict,
    event_to_dict,
    goal_from_dict,
    goal_to_dict,
    item_from_dict,
    item_to_dict,
    malfunction_from_dict,
    malfunction_to_dict,
    redundancy_finding_from_dict,
    redundancy_finding_to_dict,
    scenario_from_dict,
    scenario_to_dict,
    table_from_dict,
    table_to_dict,
)
from .prompts import (
    DEFAULT_KEY_TERMS,
    PromptTemplate,
    RepairFailed,
    load_templates,
    structured_completion,
    templates_fingerprint,
)
from .quality import lint_goal
from .redundancy import (
    DEFAULT_JACCARD_THRESHOLD,
    RedundancyRelation,
    as_threshold,
    find_redundancies,
    reuse_source,
)

log = logging.getLogger(__name__)


class PipelineError(Exception):
    pass


class PipelineFailed(PipelineError):
    """A step yielded zero usable artifacts; the run cannot continue."""


class CombineError(PipelineError):
    pass


class CheckpointCorrupt(PipelineError):
    def __init__(self, step_id: str, reason: str) -> None:
        super().__init__(f"corrupt checkpoint for step {step_id}: {reason}")
        self.step_id = step_id


ALL_STRATEGIES: tuple[GoalStrategy, ...] = tuple(GoalStrategy)

STRATEGY_LABELS: Mapping[GoalStrategy, str] = {
    GoalStrategy.AVOID_FAILURE_MODE: "Avoiding failure mode",
    GoalStrategy.RESTRICT_EXPOSURE: "Avoid being exposed to the situation",
    GoalStrategy.IMPROVE_CONTROLLABILITY: "Improve controllability",
    GoalStrategy.REDUCE_SEVERITY: "Reduce the severity",
}

STRATEGY_DESCRIPTIONS: Mapping[GoalStrategy, str] = {
    GoalStrategy.AVOID_FAILURE_MODE: (
        "Eliminate the main cause of the hazardous event: require that the "
        "malfunctioning behaviour does not occur. This is the most natural "
        "requirement and the most desirable one because it does not limit the "
        "function, but it is not always achievable with immature technology."
    ),
    GoalStrategy.RESTRICT_EXPOSURE: (
        "Avoid being exposed to the situation: restrict the operational design "
        "domain so that the function does not operate in the scenario of the "
        "hazardous event. Conservative choice when confidence in avoiding the "
        "failure mode is low."
    ),
    GoalStrategy.IMPROVE_CONTROLLABILITY: (
        "Improve controllability for every road user involved in the hazardous "
        "event - not only the driver and passengers but also pedestrians and "
        "other drivers - so that they can act to avoid harm."
    ),
    GoalStrategy.REDUCE_SEVERITY: (
        "Reduce the severity: identify and constrain the factors in the "
        "hazardous event that determine harm, such as limits on speed, "
        "acceleration, deceleration, or lateral motion. Can be combined with "
        "the other strategies."
    ),
}


def draft_goal_candidate(
    strategy: GoalStrategy, malfunction_text: str, scenario_core: str
) -> str:
    """Deterministic candidate sentence for the buffer-first redundancy check.

    The check must run before any generation call, so the candidate is a
    rule-built sketch of what a goal for this event and strategy would
    require; an existing goal that duplicates or subsumes it is reused.
    """
    if strategy is GoalStrategy.AVOID_FAILURE_MODE:
        return f"The function shall not exhibit the malfunctioning behaviour: {malfunction_text}"
    if strategy is GoalStrategy.RESTRICT_EXPOSURE:
        return f"The function shall not operate in the scenario: {scenario_core}"
    if strategy is GoalStrategy.IMPROVE_CONTROLLABILITY:
        return (
            "Road users shall be enabled to control the situation when the "
            f"malfunctioning behaviour occurs: {malfunction_text}"
        )
    return (
        "The function shall limit its motion so that the harm is reduced when "
        f"the malfunctioning behaviour occurs: {malfunction_text}"
    )


@dataclass(frozen=True)
class PipelineConfig:
    backend: str = "mock"
    fixtures: Path | None = None
    base_url: str = ""
    model: str = "gpt-4"
    credential_env: str = "OPENAI_API_KEY"
    guide_word_extensions: bool = False
    scenarios_target_count: int = 3
    diverse_selection_count: int = 3
    strategies_enabled: tuple[GoalStrategy, ...] = ALL_STRATEGIES
    parallelism: int = 1
    jaccard_threshold: Fraction = DEFAULT_JACCARD_THRESHOLD
    retries: int = 3
    backoff: tuple[float, ...] = (1.0, 4.0)
    timeout: float = 60.0
    template_dir: Path | None = None
    key_term_overrides: Mapping[str, str] = field(default_factory=dict)
    deep_check: bool = False

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "real"):
            raise ValueError(f"backend must be mock or real, got {self.backend!r}")
        if self.scenarios_target_count < 1 or self.diverse_selection_count < 1:
            raise ValueError("scenario counts must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not self.strategies_enabled:
            raise ValueError("strategies_enabled must be non-empty")
        object.__setattr__(self, "strategies_enabled", tuple(self.strategies_enabled))
        object.__setattr__(self, "jaccard_threshold", as_threshold(self.jaccard_threshold))
        object.__setattr__(self, "key_term_overrides", dict(self.key_term_overrides))

    def fingerprint(self) -> str:
        """Hash of the result-relevant settings; a change re-runs every step."""
        relevant = {
            "backend": self.backend,
            "fixtures": str(self.fixtures) if self.fixtures else "",
            "base_url": self.base_url,
            "model": self.model,
            "guide_word_extensions": self.guide_word_extensions,
            "scenarios_target_count": self.scenarios_target_count,
            "diverse_selection_count": self.diverse_selection_count,
            "strategies_enabled": [s.value for s in self.strategies_enabled],
            "jaccard_threshold": str(self.jaccard_threshold),
            "key_term_overrides": dict(sorted(self.key_term_overrides.items())),
            "deep_check": self.deep_check,
        }
        blob = json.dumps(relevant, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    step_id: str
    input_hashes: Mapping[str, str]
    output_artifacts: tuple[str, ...]
    completed_at: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_id": self.step_id,
            "input_hashes": dict(self.input_hashes),
            "output_artifacts": list(self.output_artifacts),
            "completed_at": self.completed_at,
        }


# --- step functions ----------------------------------------------------------


_ENTRY_SPLIT_RE = re.compile(r"(?m)^\s*\d+[.)]\s*")
_CORE_RE = re.compile(r"(?im)^core:\s*(.*?)\s*$")
_DETAILS_RE = re.compile(r"(?ims)^details:\s*(.*?)(?=^factors:|\Z)")
_FACTORS_RE = re.compile(r"(?im)^factors:\s*(.*?)\s*$")
_SELECTED_RE = re.compile(r"(?im)^selected:\s*(.*?)\s*$")
_SEVERITY_RE = re.compile(r"(?im)^severity:\s*S(\d+)\s*$")
_RATIONALE_RE = re.compile(r"(?is)rationale:\s*(.*)\Z")
_RELATION_RE = re.compile(r"(?im)^relation:\s*([a-z_]+)\s*$")


def _parse_factors(line: str, warnings: list[str], context: str) -> dict[str, tuple[str, ...]]:
    factors: dict[str, tuple[str, ...]] = {}
    for part in line.split(";"):
        part = part.strip()
        if not part:
            continue
        layer, sep, values = part.partition("=")
        layer = layer.strip().lower().replace(" ", "_")
        if not sep:
            warnings.append(f"{context}: unparseable factor entry {part!r}")
            continue
        if layer not in SCENARIO_LAYERS:
            warnings.append(f"{context}: unknown factor layer {layer!r} dropped")
            continue
        entries = tuple(v.strip() for v in values.split(",") if v.strip())
        if entries:
            factors[layer] = entries
    return factors


def parse_scenario_entries(
    result_text: str, warnings: list[str]
) -> list[tuple[str, str, dict[str, tuple[str, ...]]]]:
    """(core, details, factors) triples from an enumerated result section."""
    parsed: list[tuple[str, str, dict[str, tuple[str, ...]]]] = []
    for index, block in enumerate(_ENTRY_SPLIT_RE.split(result_text)):
        block = block.strip()
        if not block:
            continue
        core_match = _CORE_RE.search(block)
        if not core_match or not core_match.group(1).strip():
            warnings.append(f"scenario entry {index}: missing core summary, entry dropped")
            continue
        details_match = _DETAILS_RE.search(block)
        details = details_match.group(1).strip() if details_match else ""
        factors_match = _FACTORS_RE.search(block)
        if factors_match:
            factors = _parse_factors(
                factors_match.group(1), warnings, f"scenario entry {index}"
            )
        else:
            factors = {}
            warnings.append(f"scenario entry {index}: missing factor block, factors empty")
        parsed.append((core_match.group(1).strip(), details, factors))
    return parsed


def generate_scenarios(
    item: ItemDefinition,
    target_count: int,
    *,
    client: LlmClient,
    template: PromptTemplate,
    definitions: Mapping[str, str],
) -> tuple[list[OperationalScenario], list[str]]:
    """LLM step: core scenarios with detailed descriptions and factor tags."""
    warnings: list[str] = []
    context = {
        "function_name": item.function_name,
        "function_description": item.description,
        "function_outputs": ", ".join(item.function_outputs),
        "odd_notes": item.odd_notes or "(none provided)",
        "driver_interaction": item.driver_interaction or "(none provided)",
        "target_count": str(target_count),
    }
    try:
        sections = structured_completion(
            client,
            template,
            context,
            row_key=None,
            definitions=definitions,
            item_text=item.combined_text,
        )
    except (RepairFailed, BackendError) as exc:
        raise PipelineFailed(f"scenario generation failed: {exc}") from exc
    ids = IdAllocator()
    scenarios = [
        OperationalScenario(
            id=ids.next("SC"),
            core_summary=core,
            detailed_description=details,
            factors=factors,
            source=ScenarioSource.LLM_GENERATED,
        )
        for core, details, factors in parse_scenario_entries(sections["result"], warnings)
    ]
    if not scenarios:
        raise PipelineFailed("scenario generation produced no usable scenarios")
    return scenarios, warnings


def _factor_pairs(scenario: OperationalScenario) -> frozenset[tuple[str, str]]:
    return frozenset(
        (layer, value) for layer, values in scenario.factors.items() for value in values
    )


def greedy_select(scenarios: Sequence[OperationalScenario], k: int) -> list[OperationalScenario]:
    """Deterministic diversity selection: greedy max-coverage over factor
    values with lexicographic id tie-break."""
    remaining = sorted(scenarios, key=lambda s: s.id)
    covered: set[tuple[str, str]] = set()
    chosen: list[OperationalScenario] = []
    while remaining and len(chosen) < k:
        gain = max(len(_factor_pairs(s) - covered) for s in remaining)
        # remaining is id-sorted, so ties break towards the smaller id
        best = next(s for s in remaining if len(_factor_pairs(s) - covered) == gain)
        chosen.append(best)
        covered |= _factor_pairs(best)
        remaining.remove(best)
    return chosen


def cluster_and_select(
    scenarios: Sequence[OperationalScenario],
    k: int,
    *,
    client: LlmClient | None = None,
    template: PromptTemplate | None = None,
    definitions: Mapping[str, str] | None = None,
    item_text: str | None = None,
    warnings: list[str] | None = None,
) -> list[OperationalScenario]:
    """Pick k scenarios maximizing factor diversity.

    Default path is one LLM call; on unknown or malformed ids (or without a
    usable backend) it falls back to the deterministic greedy selection.
    Selected scenarios are tagged with their cluster id.
    """
    if k > len(scenarios):
        raise ValueError(f"k={k} exceeds scenario count {len(scenarios)}")
    warnings = warnings if warnings is not None else []
    if k == len(scenarios):
        selected = list(scenarios)
    else:
        selected = None
        if client is not None and template is not None:
            selected = _llm_select(
                scenarios, k, client, template, definitions or DEFAULT_KEY_TERMS,
                item_text, warnings,
            )
        if selected is None:
            selected = greedy_select(scenarios, k)
    return [dataclasses.replace(s, cluster_id=s.id) for s in selected]


def _llm_select(
    scenarios: Sequence[OperationalScenario],
    k: int,
    client: LlmClient,
    template: PromptTemplate,
    definitions: Mapping[str, str],
    item_text: str | None,
    warnings: list[str],
) -> list[OperationalScenario] | None:
    by_id = {s.id: s for s in scenarios}
    catalogue = "\n".join(
        f"{s.id} | {s.core_summary} | "
        + "; ".join(f"{layer}={', '.join(values)}" for layer, values in s.factors.items())
        for s in scenarios
    )
    try:
        sections = structured_completion(
            client,
            template,
            {"scenario_catalogue": catalogue, "k": str(k)},
            row_key=None,
            definitions=definitions,
            item_text=item_text,
        )
    except (RepairFailed, BackendError) as exc:
        warnings.append(f"selection call failed, using deterministic selection: {exc}")
        return None
    match = _SELECTED_RE.search(sections["result"])
    if not match:
        warnings.append("selection result had no 'Selected:' line, using deterministic selection")
        return None
    ids = [token.strip() for token in match.group(1).split(",") if token.strip()]
    unique_ids = list(dict.fromkeys(ids))
    unknown = [i for i in unique_ids if i not in by_id]
    if unknown or len(unique_ids) != k:
        warnings.append(
            f"selection returned unknown or wrong-count ids {unique_ids!r}, "
            "using deterministic selection"
        )
        return None
    return [by_id[i] for i in unique_ids]


def enumerate_malfunctions(
    item: ItemDefinition,
    catalogue: Sequence[GuideWord],
    *,
    client: LlmClient | None = None,
    template: PromptTemplate | None = None,
    definitions: Mapping[str, str] | None = None,
) -> tuple[list[Malfunction], list[str]]:
    """Deterministic outputs x guide-words cross product, then one LLM call
    per stub for the natural-language description."""
    if not item.function_outputs or not catalogue:
        raise PipelineError("outputs and guide word catalogue must be non-empty")
    warnings: list[str] = []
    ids = IdAllocator()
    stubs: list[Malfunction] = [
        Malfunction(
            id=ids.next("MF"),
            output_ref=output_ref,
            guide_word=gw.name,
            description="",
            source=MalfunctionSource.RULE_ENUMERATED,
        )
        for output_ref in range(len(item.function_outputs))
        for gw in catalogue
    ]
    if client is None or template is None:
        return [
            dataclasses.replace(
                stub,
                description=f"{stub.guide_word} of {item.function_outputs[stub.output_ref]}",
            )
            for stub in stubs
        ], warnings
    guide_by_name = {gw.name: gw for gw in catalogue}

    def expand(stub: Malfunction) -> Malfunction:
        output_name = item.function_outputs[stub.output_ref]
        try:
            sections = structured_completion(
                client,
                template,
                {
                    "function_description": item.description,
                    "output_name": output_name,
                    "guide_word": stub.guide_word,
                    "guide_word_definition": guide_by_name[stub.guide_word].definition,
                },
                row_key=stub.id,
                definitions=definitions or DEFAULT_KEY_TERMS,
                item_text=item.combined_text,
            )
            text = sections["result"].strip()
            if not text:
                raise RepairFailed("malfunction", stub.id, "empty result section")
            return dataclasses.replace(
                stub, description=text, source=MalfunctionSource.LLM_EXPANDED
            )
        except (RepairFailed, BackendError) as exc:
            warnings.append(
                f"{stub.id}: expansion failed, keeping templated stub ({exc})"
            )
            return dataclasses.replace(
                stub, description=f"{stub.guide_word} of {output_name}"
            )

    return list(_map_rows(expand, stubs, parallelism=1)), warnings


def combine(
    scenarios: Sequence[OperationalScenario], malfunctions: Sequence[Malfunction]
) -> list[HazardousEvent]:
    """Rule-based full cartesian product, scenario-major, malfunction-minor.

    Requires completeness, not creativity: no LLM is involved and the output
    order is stable across runs.
    """
    if not scenarios or not malfunctions:
        raise CombineError("combine requires non-empty scenario and malfunction lists")
    scenario_ids = [s.id for s in scenarios]
    malfunction_ids = [m.id for m in malfunctions]
    if len(set(scenario_ids)) != len(scenario_ids):
        raise CombineError("duplicate scenario ids")
    if len(set(malfunction_ids)) != len(malfunction_ids):
        raise CombineError("duplicate malfunction ids")
    ids = IdAllocator()
    return [
        HazardousEvent(id=ids.next("HE"), scenario_ref=s.id, malfunction_ref=m.id)
        for s in scenarios
        for m in malfunctions
    ]


def formulate_hazardous_event(
    draft: HazardousEvent,
    scenario: OperationalScenario,
    malfunction: Malfunction,
    item: ItemDefinition,
    *,
    client: LlmClient,
    template: PromptTemplate,
    definitions: Mapping[str, str],
) -> HazardousEvent:
    """LLM step: fill in the consequence and the explanation bundle."""
    sections = structured_completion(
        client,
        template,
        {
            "function_name": item.function_name,
            "scenario_core": scenario.core_summary,
            "scenario_details": scenario.detailed_description or scenario.core_summary,
            "malfunction_description": malfunction.description,
            "guide_word": malfunction.guide_word,
            "output_name": item.function_outputs[malfunction.output_ref],
        },
        row_key=draft.id,
        definitions=definitions,
        item_text=item.combined_text,
    )
    consequence = sections["result"].strip()
    if not consequence:
        raise RepairFailed(template.step_id, draft.id, "empty consequence")
    return dataclasses.replace(
        draft,
        consequence=consequence,
        explanation=ExplanationBundle(
            background=sections["background"],
            assumptions=sections["assumptions"],
            reasoning=sections["reasoning"],
        ),
    )


def assess_severity(
    event: HazardousEvent,
    scenario: OperationalScenario,
    malfunction: Malfunction,
    *,
    client: LlmClient,
    template: PromptTemplate,
    definitions: Mapping[str, str],
    item_text: str | None = None,
) -> HazardousEvent:
    """LLM step at temperature 0; the result must carry `Severity: S<n>`."""
    sections = structured_completion(
        client,
        template,
        {
            "scenario_core": scenario.core_summary,
            "scenario_details": scenario.detailed_description or scenario.core_summary,
            "malfunction_description": malfunction.description,
            "consequence": event.consequence,
        },
        row_key=event.id,
        definitions=definitions,
        item_text=item_text,
    )
    result = sections["result"]
    match = _SEVERITY_RE.search(result)
    if not match:
        raise RepairFailed(template.step_id, event.id, "no parseable severity token")
    level = int(match.group(1))
    if level > 3:
        raise RepairFailed(template.step_id, event.id, f"severity out of range: S{level}")
    rationale_match = _RATIONALE_RE.search(result)
    rationale = (
        rationale_match.group(1).strip() if rationale_match else sections["reasoning"].strip()
    )
    if not rationale:
        raise RepairFailed(template.step_id, event.id, "missing severity rationale")
    assumptions = sections["assumptions"].strip()
    return dataclasses.replace(
        event,
        severity=Severity(f"s{level}"),
        severity_rationale=rationale,
        kinematic_rationale=assumptions or None,
    )


def gate_for_goals(events: Sequence[HazardousEvent]) -> list[str]:
    """Deterministic severity gate: ids of rows above S0, in table order."""
    return [e.id for e in events if e.severity is not None and e.severity.rank > 0]


def specify_safety_goals(
    event: HazardousEvent,
    scenario: OperationalScenario,
    malfunction: Malfunction,
    strategies: Sequence[GoalStrategy],
    buffer: list[SafetyGoal],
    *,
    ids: IdAllocator,
    client: LlmClient,
    templates: Mapping[str, PromptTemplate],
    definitions: Mapping[str, str],
    threshold: Fraction = DEFAULT_JACCARD_THRESHOLD,
    item_text: str | None = None,
    warnings: list[str] | None = None,
) -> tuple[list[SafetyGoal], list[RedundancyFinding]]:
    """One goal per enabled strategy, buffer-first.

    For each strategy the redundancy finder runs against the buffer before
    any generation call; a duplicate or subsuming existing goal is reused
    (status=reused_existing) instead of generating. Newly proposed goals are
    appended to the buffer; reused goals add no new buffer text.
    """
    if event.severity is None or event.severity.rank == 0:
        raise PipelineError(f"{event.id}: goals are only specified above S0")
    warnings = warnings if warnings is not None else []
    goals: list[SafetyGoal] = []
    findings: list[RedundancyFinding] = []
    for strategy in strategies:
        candidate = draft_goal_candidate(
            strategy, malfunction.description, scenario.core_summary
        )
        pair_base = f"{event.id}.{strategy.value}"
        raw_findings = find_redundancies(
            candidate,
            buffer,
            candidate_id="candidate",
            threshold=threshold,
            classify=_make_classifier(client, templates, definitions, pair_base),
            warnings=warnings,
        )
        source = reuse_source(raw_findings, buffer)
        if source is not None:
            goal = SafetyGoal(
                id=ids.next("SG"),
                text=source.text,
                strategy=strategy,
                covered_events=(event.id,),
                status=GoalStatus.REUSED_EXISTING,
                explanation=ExplanationBundle(
                    background=(
                        f"Reused existing goal {source.id}: an equivalent or more "
                        "general requirement already covers this hazardous event."
                    )
                ),
                lint_findings=tuple(lint_goal(source.text)),
            )
        else:
            goal = _generate_goal(
                event, scenario, malfunction, strategy,
                ids=ids, client=client, templates=templates,
                definitions=definitions, item_text=item_text, warnings=warnings,
            )
            if goal is None:
                continue
            buffer.append(goal)
        goals.append(goal)
        findings.extend(
            dataclasses.replace(f, goal_a=goal.id) for f in raw_findings
        )
    return goals, findings


def _generate_goal(
    event: HazardousEvent,
    scenario: OperationalScenario,
    malfunction: Malfunction,
    strategy: GoalStrategy,
    *,
    ids: IdAllocator,
    client: LlmClient,
    templates: Mapping[str, PromptTemplate],
    definitions: Mapping[str, str],
    item_text: str | None,
    warnings: list[str],
) -> SafetyGoal | None:
    assert event.severity is not None
    try:
        sections = structured_completion(
            client,
            templates["goal"],
            {
                "severity": event.severity.label,
                "consequence": event.consequence,
                "scenario_core": scenario.core_summary,
                "malfunction_description": malfunction.description,
                "strategy_name": STRATEGY_LABELS[strategy],
                "strategy_description": STRATEGY_DESCRIPTIONS[strategy],
            },
            row_key=f"{event.id}.{strategy.value}",
            definitions=definitions,
            item_text=item_text,
        )
        text = sections["result"].strip()
        return SafetyGoal(
            id=ids.next("SG"),
            text=text,
            strategy=strategy,
            covered_events=(event.id,),
            status=GoalStatus.PROPOSED,
            explanation=ExplanationBundle(
                background=sections["background"],
                assumptions=sections["assumptions"],
                reasoning=sections["reasoning"],
            ),
            lint_findings=tuple(lint_goal(text)),
        )
    except (RepairFailed, BackendError, ModelError) as exc:
        warnings.append(f"{event.id}/{strategy.value}: strategy skipped ({exc})")
        return None


def _make_classifier(
    client: LlmClient,
    templates: Mapping[str, PromptTemplate],
    definitions: Mapping[str, str],
    pair_base: str,
):
    template = templates.get("redundancy")
    if template is None:
        return None

    def classify(candidate_text: str, goal: SafetyGoal) -> tuple[RedundancyRelation, str]:
        sections = structured_completion(
            client,
            template,
            {
                "candidate_text": candidate_text,
                "existing_id": goal.id,
                "existing_text": goal.text,
            },
            row_key=f"{pair_base}.{goal.id}",
            definitions=definitions,
        )
        result = sections["result"]
        match = _RELATION_RE.search(result)
        if not match:
            raise ValueError("no parseable relation token")
        relation = RedundancyRelation(match.group(1))
        rationale_match = _RATIONALE_RE.search(result)
        rationale = rationale_match.group(1).strip() if rationale_match else ""
        return relation, rationale

    return classify


def _map_rows(fn: Callable, rows: Sequence, *, parallelism: int) -> list:
    """Apply fn to rows, committing results in input order regardless of
    completion order."""
    if parallelism <= 1 or len(rows) <= 1:
        return [fn(row) for row in rows]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, rows))


# --- run orchestration ---------------------------------------------------------

STEP_ORDER: tuple[str, ...] = (
    "scenarios",
    "select",
    "malfunctions",
    "combine",
    "hazardous_event",
    "severity",
    "gate",
    "goals",
    "render",
)

_STEP_INPUTS: Mapping[str, tuple[str, ...]] = {
    "scenarios": ("item.json",),
    "select": ("item.json", "scenarios_generated.json"),
    "malfunctions": ("item.json",),
    "combine": ("item.json", "scenarios.json", "malfunctions.json"),
    "hazardous_event": ("item.json", "scenarios.json", "malfunctions.json", "events_draft.json"),
    "severity": ("item.json", "scenarios.json", "malfunctions.json", "events_formulated.json"),
    "gate": ("item.json", "events.json"),
    "goals": ("item.json", "scenarios.json", "malfunctions.json", "events.json", "gate.json"),
    "render": (
        "item.json",
        "scenarios_generated.json",
        "scenarios.json",
        "malfunctions.json",
        "events_draft.json",
        "events_formulated.json",
        "events.json",
        "gate.json",
        "goals.json",
    ),
}

_STEP_OUTPUTS: Mapping[str, tuple[str, ...]] = {
    "scenarios": ("scenarios_generated.json",),
    "select": ("scenarios.json",),
    "malfunctions": ("malfunctions.json",),
    "combine": ("events_draft.json",),
    "hazardous_event": ("events_formulated.json",),
    "severity": ("events.json",),
    "gate": ("gate.json",),
    "goals": ("goals.json",),
    "render": ("table.json", "report.json"),
}


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_artifact(path: Path, data: Any) -> None:
    """Atomic write (write-then-rename) of a canonical JSON document."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(dump_json(data))
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def read_artifact(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


class PipelineRun:
    """One checkpointed run bound to a run directory.

    Resuming is the default behavior: a step is executed only when its
    checkpoint is missing, any recorded artifact hash mismatches, or an
    output file is absent.
    """

    def __init__(
        self,
        item: ItemDefinition,
        cfg: PipelineConfig,
        run_dir: Path,
        *,
        client: LlmClient | None = None,
        env: Mapping[str, str] | None = None,
    ) -> None:
        self.item = item
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.templates = load_templates(cfg.template_dir)
        self.definitions = dict(DEFAULT_KEY_TERMS)
        self.definitions.update(cfg.key_term_overrides)
        self.client = client or self._build_client(env or os.environ)
        self.prompt_version = templates_fingerprint(cfg.template_dir)
        self._config_hash = cfg.fingerprint()

    def _build_client(self, env: Mapping[str, str]) -> LlmClient:
        if self.cfg.backend == "mock":
            if self.cfg.fixtures is None:
                raise PipelineError("mock backend requires a fixture directory")
            backend: MockBackend | RealBackend = MockBackend(self.cfg.fixtures)
        else:
            credential = env.get(self.cfg.credential_env, "")
            if not credential:
                raise PipelineError(
                    f"credential environment variable {self.cfg.credential_env} is not set"
                )
            if not self.cfg.base_url:
                raise PipelineError("real backend requires base_url")
            backend = RealBackend(
                self.cfg.base_url, self.cfg.model, credential, timeout=self.cfg.timeout
            )
        return LlmClient(backend, retries=self.cfg.retries, backoff=self.cfg.backoff)

    # artifact paths ---------------------------------------------------------

    def path(self, name: str) -> Path:
        return self.run_dir / name

    def _checkpoint_path(self, step_id: str) -> Path:
        return self.run_dir / "checkpoints" / f"{step_id}.json"

    def _transcript_path(self, step_id: str) -> Path:
        return self.run_dir / "transcripts" / f"{step_id}.json"

    # checkpointing ------------------------------------------------------------

    def _current_hashes(self, names: Iterable[str]) -> dict[str, str]:
        hashes = {"config": self._config_hash, "prompts": self.prompt_version}
        for name in names:
            path = self.path(name)
            hashes[name] = _sha256_file(path) if path.is_file() else "absent"
        return hashes

    def load_checkpoint(self, step_id: str) -> Checkpoint | None:
        path = self._checkpoint_path(step_id)
        if not path.is_file():
            return None
        try:
            data = read_artifact(path)
            return Checkpoint(
                step_id=data["step_id"],
                input_hashes=dict(data["input_hashes"]),
                output_artifacts=tuple(data["output_artifacts"]),
                completed_at=data["completed_at"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointCorrupt(step_id, str(exc)) from exc

    def checkpoint_valid(self, step_id: str) -> bool:
        checkpoint = self.load_checkpoint(step_id)
        if checkpoint is None:
            return False
        for name in checkpoint.output_artifacts:
            if not self.path(name).is_file():
                return False
        expected = dict(checkpoint.input_hashes)
        tracked = [n for n in expected if n not in ("config", "prompts")]
        return self._current_hashes(tracked) == expected

    def _write_checkpoint(self, step_id: str) -> None:
        # Hash both inputs and outputs: a tampered output re-runs its producer.
        tracked = list(_STEP_INPUTS[step_id]) + list(_STEP_OUTPUTS[step_id])
        checkpoint = Checkpoint(
            step_id=step_id,
            input_hashes=self._current_hashes(tracked),
            output_artifacts=_STEP_OUTPUTS[step_id],
            completed_at=_utc_now(),
        )
        write_artifact(self._checkpoint_path(step_id), checkpoint.to_dict())

    def _flush_transcript(self, step_id: str) -> None:
        entries = sort_transcript(self.client.drain_transcript())
        if entries:
            write_artifact(
                self._transcript_path(step_id),
                {"entries": [transcript_entry_to_dict(e) for e in entries]},
            )

    # main entry ---------------------------------------------------------------

    def run(self, stop_after: str | None = None) -> HaraTable | None:
        """Execute all steps in order, skipping valid checkpoints.

        Returns the final table, or None when stopped early via stop_after.
        Raises PipelineFailed after persisting a failure report.
        """
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_artifact(self.path("item.json"), item_to_dict(self.item))
        runners: Mapping[str, Callable[[], None]] = {
            "scenarios": self._step_scenarios,
            "select": self._step_select,
            "malfunctions": self._step_malfunctions,
            "combine": self._step_combine,
            "hazardous_event": self._step_hazardous_event,
            "severity": self._step_severity,
            "gate": self._step_gate,
            "goals": self._step_goals,
            "render": self._step_render,
        }
        for step_id in STEP_ORDER:
            if self.checkpoint_valid(step_id):
                log.info("step %s: checkpoint valid, skipping", step_id)
            else:
                log.info("step %s: running", step_id)
                try:
                    runners[step_id]()
                except PipelineFailed as exc:
                    self._flush_transcript(step_id)
                    self._write_failure_report(step_id, str(exc))
                    raise
                self._flush_transcript(step_id)
                self._write_checkpoint(step_id)
            if stop_after == step_id:
                return None
        return table_from_dict(read_artifact(self.path("table.json")))

    # step runners ---------------------------------------------------------------

    def _load_scenarios(self, name: str) -> list[OperationalScenario]:
        return [scenario_from_dict(s) for s in read_artifact(self.path(name))["scenarios"]]

    def _load_malfunctions(self) -> list[Malfunction]:
        return [
            malfunction_from_dict(m)
            for m in read_artifact(self.path("malfunctions.json"))["malfunctions"]
        ]

    def _load_events(self, name: str) -> list[HazardousEvent]:
        return [event_from_dict(e) for e in read_artifact(self.path(name))["events"]]

    def _step_scenarios(self) -> None:
        scenarios, warnings = generate_scenarios(
            self.item,
            self.cfg.scenarios_target_count,
            client=self.client,
            template=self.templates["scenarios"],
            definitions=self.definitions,
        )
        write_artifact(
            self.path("scenarios_generated.json"),
            {"scenarios": [scenario_to_dict(s) for s in scenarios], "warnings": warnings},
        )

    def _step_select(self) -> None:
        scenarios = self._load_scenarios("scenarios_generated.json")
        warnings: list[str] = []
        k = self.cfg.diverse_selection_count
        if k > len(scenarios):
            warnings.append(
                f"selection count {k} exceeds available {len(scenarios)}, clamping"
            )
            k = len(scenarios)
        selected = cluster_and_select(
            scenarios,
            k,
            client=self.client,
            template=self.templates.get("select"),
            definitions=self.definitions,
            item_text=self.item.combined_text,
            warnings=warnings,
        )
        write_artifact(
            self.path("scenarios.json"),
            {"scenarios": [scenario_to_dict(s) for s in selected], "warnings": warnings},
        )

    def _step_malfunctions(self) -> None:
        catalogue = default_guideword_catalogue(self.cfg.guide_word_extensions)
        malfunctions, warnings = enumerate_malfunctions(
            self.item,
            catalogue,
            client=self.client,
            template=self.templates["malfunction"],
            definitions=self.definitions,
        )
        write_artifact(
            self.path("malfunctions.json"),
            {
                "malfunctions": [malfunction_to_dict(m) for m in malfunctions],
                "warnings": warnings,
            },
        )

    def _step_combine(self) -> None:
        drafts = combine(self._load_scenarios("scenarios.json"), self._load_malfunctions())
        write_artifact(
            self.path("events_draft.json"),
            {"events": [event_to_dict(e) for e in drafts]},
        )

    def _refs(self) -> tuple[dict[str, OperationalScenario], dict[str, Malfunction]]:
        scenarios = {s.id: s for s in self._load_scenarios("scenarios.json")}
        malfunctions = {m.id: m for m in self._load_malfunctions()}
        return scenarios, malfunctions

    def _step_hazardous_event(self) -> None:
        scenarios, malfunctions = self._refs()
        drafts = self._load_events("events_draft.json")
        failed: list[dict[str, str]] = []
        warnings: list[str] = []

        def formulate(draft: HazardousEvent) -> HazardousEvent | None:
            try:
                return formulate_hazardous_event(
                    draft,
                    scenarios[draft.scenario_ref],
                    malfunctions[draft.malfunction_ref],
                    self.item,
                    client=self.client,
                    template=self.templates["hazardous_event"],
                    definitions=self.definitions,
                )
            except (RepairFailed, BackendError) as exc:
                failed.append({"id": draft.id, "step": "hazardous_event", "reason": str(exc)})
                return None

        results = _map_rows(formulate, drafts, parallelism=self.cfg.parallelism)
        events = [e for e in results if e is not None]
        if not events:
            raise PipelineFailed("hazardous event formulation produced no usable rows")
        write_artifact(
            self.path("events_formulated.json"),
            {
                "events": [event_to_dict(e) for e in events],
                "failed": failed,
                "warnings": warnings,
            },
        )

    def _step_severity(self) -> None:
        scenarios, malfunctions = self._refs()
        formulated = self._load_events("events_formulated.json")
        failed: list[dict[str, str]] = []

        def classify(event: HazardousEvent) -> HazardousEvent | None:
            try:
                return assess_severity(
                    event,
                    scenarios[event.scenario_ref],
                    malfunctions[event.malfunction_ref],
                    client=self.client,
                    template=self.templates["severity"],
                    definitions=self.definitions,
                    item_text=self.item.combined_text,
                )
            except (RepairFailed, BackendError) as exc:
                failed.append({"id": event.id, "step": "severity", "reason": str(exc)})
                return None

        results = _map_rows(classify, formulated, parallelism=self.cfg.parallelism)
        events = [e for e in results if e is not None]
        if not events:
            raise PipelineFailed("severity assessment produced no usable rows")
        write_artifact(
            self.path("events.json"),
            {"events": [event_to_dict(e) for e in events], "failed": failed, "warnings": []},
        )

    def _step_gate(self) -> None:
        events = self._load_events("events.json")
        write_artifact(self.path("gate.json"), {"gated_ids": gate_for_goals(events)})

    def _step_goals(self) -> None:
        scenarios, malfunctions = self._refs()
        events = {e.id: e for e in self._load_events("events.json")}
        gated_ids = read_artifact(self.path("gate.json"))["gated_ids"]
        ids = IdAllocator()
        buffer: list[SafetyGoal] = []
        goals: list[SafetyGoal] = []
        findings: list[RedundancyFinding] = []
        warnings: list[str] = []
        failed: list[dict[str, str]] = []
        for event_id in gated_ids:
            event = events[event_id]
            event_goals, event_findings = specify_safety_goals(
                event,
                scenarios[event.scenario_ref],
                malfunctions[event.malfunction_ref],
                self.cfg.strategies_enabled,
                buffer,
                ids=ids,
                client=self.client,
                templates=self.templates,
                definitions=self.definitions,
                threshold=self.cfg.jaccard_threshold,
                item_text=self.item.combined_text,
                warnings=warnings,
            )
            if not event_goals:
                failed.append(
                    {
                        "id": event_id,
                        "step": "goals",
                        "reason": "every enabled strategy failed for this event",
                    }
                )
            goals.extend(event_goals)
            findings.extend(event_findings)
        write_artifact(
            self.path("goals.json"),
            {
                "goals": [goal_to_dict(g) for g in goals],
                "redundancy_findings": [redundancy_finding_to_dict(f) for f in findings],
                "failed": failed,
                "warnings": warnings,
            },
        )

    def _step_render(self) -> None:
        scenarios = self._load_scenarios("scenarios.json")
        malfunctions = self._load_malfunctions()
        events = self._load_events("events.json")
        goals_doc = read_artifact(self.path("goals.json"))
        goals = [goal_from_dict(g) for g in goals_doc["goals"]]
        findings = [
            redundancy_finding_from_dict(f) for f in goals_doc["redundancy_findings"]
        ]
        gated = set(read_artifact(self.path("gate.json"))["gated_ids"])
        covered = {e for g in goals for e in g.covered_events}
        uncovered = [e.id for e in events if e.id in gated and e.id not in covered]
        # A gated row for which every strategy failed cannot satisfy the
        # coverage invariant; it is excluded from the table and reported.
        rows = tuple(e for e in events if e.id not in uncovered)
        table = HaraTable(
            rows=rows,
            goals=tuple(goals),
            provenance=Provenance(
                model_name=self.client.backend.name,
                temperature_by_step={
                    step: t.temperature for step, t in sorted(self.templates.items())
                },
                prompt_version=self.prompt_version,
                created_at=_utc_now(),
            ),
            item_ref=self.item.id,
        )
        write_artifact(self.path("table.json"), table_to_dict(table))
        report = self._build_report(
            scenarios, malfunctions, events, goals, findings, uncovered, table
        )
        write_artifact(self.path("report.json"), report)

    def _collect(self, name: str, key: str) -> list:
        path = self.path(name)
        if not path.is_file():
            return []
        return list(read_artifact(path).get(key, []))

    def _build_report(
        self,
        scenarios: Sequence[OperationalScenario],
        malfunctions: Sequence[Malfunction],
        events: Sequence[HazardousEvent],
        goals: Sequence[SafetyGoal],
        findings: Sequence[RedundancyFinding],
        uncovered: Sequence[str],
        table: HaraTable,
    ) -> dict[str, Any]:
        failed_rows: list[dict[str, str]] = []
        warnings: list[dict[str, str]] = []
        for name, step in (
            ("scenarios_generated.json", "scenarios"),
            ("scenarios.json", "select"),
            ("malfunctions.json", "malfunctions"),
            ("events_formulated.json", "hazardous_event"),
            ("events.json", "severity"),
            ("goals.json", "goals"),
        ):
            failed_rows.extend(self._collect(name, "failed"))
            warnings.extend(
                {"step": step, "message": w} for w in self._collect(name, "warnings")
            )
        failed_rows.extend(
            {"id": row_id, "step": "goals", "reason": "no goal covers this gated row"}
            for row_id in uncovered
        )
        return {
            "item_ref": self.item.id,
            "counts": {
                "scenarios_generated": len(
                    read_artifact(self.path("scenarios_generated.json"))["scenarios"]
                ),
                "scenarios_selected": len(scenarios),
                "malfunctions": len(malfunctions),
                "drafts": len(read_artifact(self.path("events_draft.json"))["events"]),
                "rows": len(table.rows),
                "goals": len(goals),
                "redundancy_findings": len(findings),
            },
            "failed_rows": failed_rows,
            "warnings": warnings,
            "uncovered_gated_rows": list(uncovered),
            "referential_integrity_problems": check_referential_integrity(
                table, scenarios, malfunctions
            ),
            "steps": list(STEP_ORDER),
        }

    def _write_failure_report(self, step_id: str, reason: str) -> None:
        report = {
            "item_ref": self.item.id,
            "pipeline_failed": {"step": step_id, "reason": reason},
            "failed_rows": [],
            "warnings": [],
            "steps": list(STEP_ORDER),
        }
        write_artifact(self.path("report.json"), report)


def run_pipeline(
    item: ItemDefinition,
    cfg: PipelineConfig,
    run_dir: Path,
    *,
    client: LlmClient | None = None,
    env: Mapping[str, str] | None = None,
    stop_after: str | None = None,
) -> HaraTable | None:
    """Execute (or resume) the full pipeline in run_dir."""
    return PipelineRun(item, cfg, run_dir, client=client, env=env).run(stop_after=stop_after)


def item_from_file(path: Path) -> ItemDefinition:
    return item_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
