"""Domain types shared by the pipeline, quality suite, and review service.

All types are immutable value objects; revised analyses are built by
constructing new tables, never by mutating existing ones. Serialization is
UTF-8 JSON with field names matching the dataclass fields and enum values as
lowercase strings.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping


class ModelError(ValueError):
    """An invariant of a domain type was violated."""


class ItemValidationError(ModelError):
    """Item definition failed validation; carries every violated invariant."""

    def __init__(self, violations: list[str]) -> None:
        super().__init__("; ".join(violations))
        self.violations = violations


# --- enums -----------------------------------------------------------------


class Severity(str, Enum):
    S0 = "s0"
    S1 = "s1"
    S2 = "s2"
    S3 = "s3"

    @property
    def rank(self) -> int:
        return int(self.value[1])

    @property
    def label(self) -> str:
        return self.name


class Exposure(str, Enum):
    E0 = "e0"
    E1 = "e1"
    E2 = "e2"
    E3 = "e3"
    E4 = "e4"

    @property
    def label(self) -> str:
        return self.name


class Controllability(str, Enum):
    C0 = "c0"
    C1 = "c1"
    C2 = "c2"
    C3 = "c3"

    @property
    def label(self) -> str:
        return self.name


class MalfunctionSource(str, Enum):
    RULE_ENUMERATED = "rule_enumerated"
    LLM_EXPANDED = "llm_expanded"
    USER_SUPPLIED = "user_supplied"


class ScenarioSource(str, Enum):
    LLM_GENERATED = "llm_generated"
    USER_SUPPLIED = "user_supplied"


class GoalStrategy(str, Enum):
    AVOID_FAILURE_MODE = "avoid_failure_mode"
    RESTRICT_EXPOSURE = "restrict_exposure"
    IMPROVE_CONTROLLABILITY = "improve_controllability"
    REDUCE_SEVERITY = "reduce_severity"


class GoalStatus(str, Enum):
    PROPOSED = "proposed"
    REUSED_EXISTING = "reused_existing"
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class RedundancyRelation(str, Enum):
    DUPLICATE = "duplicate"
    SUBSUMES = "subsumes"
    SUBSUMED_BY = "subsumed_by"
    PARTIAL_OVERLAP = "partial_overlap"
    DISTINCT = "distinct"


class FindingMethod(str, Enum):
    LEXICAL = "lexical"
    LLM = "llm"


class LintLevel(str, Enum):
    ERROR = "error"
    WARNING = "warning"


# Scenario factor layers: road network, infrastructure, temporary
# manipulations, objects, environment, digital information.
SCENARIO_LAYERS: tuple[str, ...] = (
    "road",
    "infrastructure",
    "temporary_manipulation",
    "objects",
    "environment",
    "digital_information",
)

_SHALL_RE = re.compile(r"\bshall\b", re.IGNORECASE)


def normalize_name(text: str) -> str:
    """Whitespace/case normalization used for uniqueness checks."""
    return " ".join(text.split()).casefold()


# --- guide words -----------------------------------------------------------


@dataclass(frozen=True)
class GuideWord:
    name: str
    definition: str

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ModelError("GuideWord.name must be non-empty")
        if not self.definition.strip():
            raise ModelError(f"GuideWord {self.name!r}: definition must be non-empty")


OMISSION_DEFINITION = "the function does not produce the intended effect"
COMMISSION_DEFINITION = "The function produces the intended effect when it should not"

_EXTENSION_GUIDE_WORDS = (
    GuideWord("delay", "The function produces the intended effect later than intended."),
    GuideWord("too_much", "The function produces more of the intended effect than intended."),
    GuideWord("too_little", "The function produces less of the intended effect than intended."),
)


def default_guideword_catalogue(extensions: bool = False) -> list[GuideWord]:
    """The systematic failure-mode keywords applied to each function output.

    The default holds exactly omission and commission; extension words are
    available only behind the config flag.
    """
    catalogue = [
        GuideWord("omission", OMISSION_DEFINITION),
        GuideWord("commission", COMMISSION_DEFINITION),
    ]
    if extensions:
        catalogue.extend(_EXTENSION_GUIDE_WORDS)
    names = [gw.name for gw in catalogue]
    if len(set(names)) != len(names):
        raise ModelError("guide word names must be pairwise distinct")
    return catalogue


# --- item definition -------------------------------------------------------


@dataclass(frozen=True)
class ItemDefinition:
    id: str
    function_name: str
    description: str
    function_outputs: tuple[str, ...]
    odd_notes: str = ""
    driver_interaction: str = ""

    def __post_init__(self) -> None:
        violations = _item_violations(
            self.description, self.function_outputs, self.function_name
        )
        if violations:
            raise ItemValidationError(violations)

    @property
    def combined_text(self) -> str:
        """All item prose, used for few-shot leakage checks."""
        parts = [self.function_name, self.description, self.odd_notes, self.driver_interaction]
        parts.extend(self.function_outputs)
        return "\n".join(p for p in parts if p)


def _item_violations(
    description: str, outputs: Iterable[str], function_name: str
) -> list[str]:
    violations: list[str] = []
    if not function_name.strip():
        violations.append("function_name is empty")
    if not description.strip():
        violations.append("description is empty")
    outputs = tuple(outputs)
    if not outputs:
        violations.append("no function outputs")
    seen: dict[str, str] = {}
    for name in outputs:
        if not name.strip():
            violations.append("function output name is empty")
            continue
        key = normalize_name(name)
        if key in seen:
            violations.append(
                f"duplicate output after normalization: {name!r} vs {seen[key]!r}"
            )
        else:
            seen[key] = name
    return violations


def validate_item_definition(raw: Mapping[str, Any]) -> ItemDefinition:
    """Build a validated ItemDefinition from a parsed item document.

    Raises ItemValidationError carrying every violated invariant rather than
    stopping at the first.
    """
    if not isinstance(raw, Mapping):
        raise ItemValidationError(["item document must be a JSON object"])
    violations: list[str] = []
    item_id = str(raw.get("id", "") or "").strip()
    if not item_id:
        violations.append("id is empty")
    function_name = str(raw.get("function_name", "") or "")
    description = raw.get("description", "")
    if not isinstance(description, str):
        violations.append("description must be plain text")
        description = ""
    outputs_raw = raw.get("function_outputs", [])
    if not isinstance(outputs_raw, (list, tuple)):
        violations.append("function_outputs must be a list")
        outputs_raw = []
    outputs = tuple(str(o) for o in outputs_raw)
    odd_notes = raw.get("odd_notes", "") or ""
    driver_interaction = raw.get("driver_interaction", "") or ""
    if not isinstance(odd_notes, str) or not isinstance(driver_interaction, str):
        violations.append("odd_notes and driver_interaction must be plain text")
        odd_notes, driver_interaction = str(odd_notes), str(driver_interaction)
    violations.extend(_item_violations(description, outputs, function_name))
    if violations:
        raise ItemValidationError(violations)
    return ItemDefinition(
        id=item_id,
        function_name=function_name,
        description=description,
        function_outputs=outputs,
        odd_notes=odd_notes,
        driver_interaction=driver_interaction,
    )


# --- analysis artifacts ----------------------------------------------------


@dataclass(frozen=True)
class Malfunction:
    id: str
    output_ref: int
    guide_word: str
    description: str
    source: MalfunctionSource

    def __post_init__(self) -> None:
        if self.output_ref < 0:
            raise ModelError(f"{self.id}: output_ref must be >= 0")
        if self.source in (MalfunctionSource.LLM_EXPANDED, MalfunctionSource.USER_SUPPLIED):
            if not self.description.strip():
                raise ModelError(f"{self.id}: description required for source {self.source.value}")


def check_malfunction_set(malfunctions: Iterable[Malfunction]) -> None:
    """(output_ref, guide_word) pairs must be unique across a set."""
    seen: set[tuple[int, str]] = set()
    for mf in malfunctions:
        pair = (mf.output_ref, mf.guide_word)
        if pair in seen:
            raise ModelError(f"duplicate (output, guide word) pair: {pair}")
        seen.add(pair)


@dataclass(frozen=True)
class OperationalScenario:
    id: str
    core_summary: str
    detailed_description: str
    factors: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    cluster_id: str | None = None
    source: ScenarioSource = ScenarioSource.LLM_GENERATED

    def __post_init__(self) -> None:
        if not self.core_summary.strip():
            raise ModelError(f"{self.id}: core_summary must be non-empty")
        unknown = set(self.factors) - set(SCENARIO_LAYERS)
        if unknown:
            raise ModelError(f"{self.id}: unknown factor layers {sorted(unknown)}")
        object.__setattr__(
            self, "factors", {k: tuple(v) for k, v in self.factors.items()}
        )


@dataclass(frozen=True)
class ExplanationBundle:
    background: str = ""
    assumptions: str = ""
    reasoning: str = ""


@dataclass(frozen=True)
class HazardousEvent:
    """A scenario x malfunction combination with its consequence.

    Severity and consequence may be absent while the event is a draft moving
    through the pipeline; a completed table only accepts filled-in rows.
    """

    id: str
    scenario_ref: str
    malfunction_ref: str
    consequence: str = ""
    kinematic_rationale: str | None = None
    severity: Severity | None = None
    severity_rationale: str = ""
    exposure: Exposure | None = None
    controllability: Controllability | None = None
    explanation: ExplanationBundle = field(default_factory=ExplanationBundle)

    @property
    def is_draft(self) -> bool:
        return (
            not self.consequence.strip()
            or self.severity is None
            or not self.severity_rationale.strip()
        )


@dataclass(frozen=True)
class LintFinding:
    rule_id: str
    level: LintLevel
    snippet: str
    message: str


@dataclass(frozen=True)
class SafetyGoal:
    id: str
    text: str
    strategy: GoalStrategy
    covered_events: tuple[str, ...]
    status: GoalStatus = GoalStatus.PROPOSED
    explanation: ExplanationBundle = field(default_factory=ExplanationBundle)
    lint_findings: tuple[LintFinding, ...] = ()

    def __post_init__(self) -> None:
        if not tuple(self.covered_events):
            raise ModelError(f"{self.id}: covered_events must be non-empty")
        object.__setattr__(self, "covered_events", tuple(self.covered_events))
        object.__setattr__(self, "lint_findings", tuple(self.lint_findings))
        if not _SHALL_RE.search(self.text):
            raise ModelError(f"{self.id}: goal text must contain the word 'shall'")


@dataclass(frozen=True)
class RedundancyFinding:
    goal_a: str
    goal_b: str
    relation: RedundancyRelation
    rationale: str
    method: FindingMethod

    def __post_init__(self) -> None:
        if self.goal_a == self.goal_b:
            raise ModelError("redundancy finding must relate two distinct goals")


def check_finding_orientation(findings: Iterable[RedundancyFinding]) -> None:
    """subsumes(a,b) must pair with subsumed_by(b,a) when both are reported."""
    index = {(f.goal_a, f.goal_b): f.relation for f in findings}
    for (a, b), rel in index.items():
        mirror = index.get((b, a))
        if mirror is None:
            continue
        if rel is RedundancyRelation.SUBSUMES and mirror is not RedundancyRelation.SUBSUMED_BY:
            raise ModelError(f"inconsistent orientation for {a}/{b}")
        if rel is RedundancyRelation.SUBSUMED_BY and mirror is not RedundancyRelation.SUBSUMES:
            raise ModelError(f"inconsistent orientation for {a}/{b}")


@dataclass(frozen=True)
class Provenance:
    model_name: str
    temperature_by_step: Mapping[str, float]
    prompt_version: str
    created_at: str

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "temperature_by_step", dict(self.temperature_by_step)
        )


@dataclass(frozen=True)
class HaraTable:
    rows: tuple[HazardousEvent, ...]
    goals: tuple[SafetyGoal, ...]
    provenance: Provenance
    item_ref: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "rows", tuple(self.rows))
        object.__setattr__(self, "goals", tuple(self.goals))
        row_ids = [r.id for r in self.rows]
        if len(set(row_ids)) != len(row_ids):
            raise ModelError("row ids must be unique")
        goal_ids = [g.id for g in self.goals]
        if len(set(goal_ids)) != len(goal_ids):
            raise ModelError("goal ids must be unique")
        by_id = {r.id: r for r in self.rows}
        for row in self.rows:
            if row.is_draft:
                raise ModelError(f"{row.id}: draft row in completed table")
        for goal in self.goals:
            for event_id in goal.covered_events:
                row = by_id.get(event_id)
                if row is None:
                    raise ModelError(f"{goal.id}: covered event {event_id} not in table")
                if row.severity is None or row.severity.rank == 0:
                    raise ModelError(
                        f"{goal.id}: covers {event_id} whose severity is not above S0"
                    )

    def row(self, event_id: str) -> HazardousEvent:
        for r in self.rows:
            if r.id == event_id:
                return r
        raise KeyError(event_id)

    def goals_for(self, event_id: str) -> list[SafetyGoal]:
        return [g for g in self.goals if event_id in g.covered_events]

    def uncovered_gated_rows(self) -> list[str]:
        """Rows with severity above S0 that no goal covers (checklist g signal)."""
        covered = {e for g in self.goals for e in g.covered_events}
        return [
            r.id
            for r in self.rows
            if r.severity is not None and r.severity.rank > 0 and r.id not in covered
        ]


def check_referential_integrity(
    table: HaraTable,
    scenarios: Iterable[OperationalScenario],
    malfunctions: Iterable[Malfunction],
) -> list[str]:
    """Dangling scenario/malfunction/event references, empty when sound."""
    scenario_ids = {s.id for s in scenarios}
    malfunction_ids = {m.id for m in malfunctions}
    problems: list[str] = []
    for row in table.rows:
        if row.scenario_ref not in scenario_ids:
            problems.append(f"{row.id}: dangling scenario ref {row.scenario_ref}")
        if row.malfunction_ref not in malfunction_ids:
            problems.append(f"{row.id}: dangling malfunction ref {row.malfunction_ref}")
    row_ids = {r.id for r in table.rows}
    for goal in table.goals:
        for event_id in goal.covered_events:
            if event_id not in row_ids:
                problems.append(f"{goal.id}: dangling event ref {event_id}")
    return problems


# --- review checklist types ------------------------------------------------


@dataclass(frozen=True)
class ChecklistCriterion:
    letter: str
    text: str

    def __post_init__(self) -> None:
        if self.letter not in "abcdefghij" or len(self.letter) != 1:
            raise ModelError(f"criterion letter must be a..j, got {self.letter!r}")


@dataclass(frozen=True)
class Verdict:
    criterion: str
    reviewer: str
    raw_score: int

    def __post_init__(self) -> None:
        if self.raw_score not in (1, 2, 3, 4, 5):
            raise ModelError(f"raw_score must be in 1..5, got {self.raw_score}")
        if self.criterion not in "abcdefghij" or len(self.criterion) != 1:
            raise ModelError(f"criterion must be a..j, got {self.criterion!r}")


@dataclass(frozen=True)
class AggregatedScore:
    criterion: str
    mean: float
    stddev: float
    n_used: int
    n_excluded: int


# --- id generation ---------------------------------------------------------


class IdAllocator:
    """Zero-padded sequential ids with a type prefix (SC-, MF-, HE-, SG-)."""

    def __init__(self) -> None:
        self._counters: dict[str, int] = {}

    def next(self, prefix: str) -> str:
        n = self._counters.get(prefix, 0) + 1
        self._counters[prefix] = n
        return f"{prefix}-{n:04d}"

    def reserve(self, existing: Iterable[str]) -> None:
        """Advance counters past already-issued ids (used on resume)."""
        for full in existing:
            prefix, _, num = full.rpartition("-")
            if prefix and num.isdigit():
                self._counters[prefix] = max(self._counters.get(prefix, 0), int(num))


# --- serialization ---------------------------------------------------------


def _enum_value(value: Any) -> Any:
    return value.value if isinstance(value, Enum) else value


def item_to_dict(item: ItemDefinition) -> dict[str, Any]:
    return {
        "id": item.id,
        "function_name": item.function_name,
        "description": item.description,
        "function_outputs": list(item.function_outputs),
        "odd_notes": item.odd_notes,
        "driver_interaction": item.driver_interaction,
    }


def item_from_dict(data: Mapping[str, Any]) -> ItemDefinition:
    return validate_item_definition(data)


def guideword_to_dict(gw: GuideWord) -> dict[str, Any]:
    return {"name": gw.name, "definition": gw.definition}


def guideword_from_dict(data: Mapping[str, Any]) -> GuideWord:
    return GuideWord(name=data["name"], definition=data["definition"])


def scenario_to_dict(sc: OperationalScenario) -> dict[str, Any]:
    return {
        "id": sc.id,
        "core_summary": sc.core_summary,
        "detailed_description": sc.detailed_description,
        "factors": {k: list(v) for k, v in sc.factors.items()},
        "cluster_id": sc.cluster_id,
        "source": sc.source.value,
    }


def scenario_from_dict(data: Mapping[str, Any]) -> OperationalScenario:
    return OperationalScenario(
        id=data["id"],
        core_summary=data["core_summary"],
        detailed_description=data.get("detailed_description", ""),
        factors={k: tuple(v) for k, v in data.get("factors", {}).items()},
        cluster_id=data.get("cluster_id"),
        source=ScenarioSource(data.get("source", "llm_generated")),
    )


def malfunction_to_dict(mf: Malfunction) -> dict[str, Any]:
    return {
        "id": mf.id,
        "output_ref": mf.output_ref,
        "guide_word": mf.guide_word,
        "description": mf.description,
        "source": mf.source.value,
    }


def malfunction_from_dict(data: Mapping[str, Any]) -> Malfunction:
    return Malfunction(
        id=data["id"],
        output_ref=int(data["output_ref"]),
        guide_word=data["guide_word"],
        description=data.get("description", ""),
        source=MalfunctionSource(data["source"]),
    )


def explanation_to_dict(ex: ExplanationBundle) -> dict[str, Any]:
    return {
        "background": ex.background,
        "assumptions": ex.assumptions,
        "reasoning": ex.reasoning,
    }


def explanation_from_dict(data: Mapping[str, Any] | None) -> ExplanationBundle:
    data = data or {}
    return ExplanationBundle(
        background=data.get("background", ""),
        assumptions=data.get("assumptions", ""),
        reasoning=data.get("reasoning", ""),
    )


def event_to_dict(ev: HazardousEvent) -> dict[str, Any]:
    return {
        "id": ev.id,
        "scenario_ref": ev.scenario_ref,
        "malfunction_ref": ev.malfunction_ref,
        "consequence": ev.consequence,
        "kinematic_rationale": ev.kinematic_rationale,
        "severity": _enum_value(ev.severity),
        "severity_rationale": ev.severity_rationale,
        "exposure": _enum_value(ev.exposure),
        "controllability": _enum_value(ev.controllability),
        "explanation": explanation_to_dict(ev.explanation),
    }


def event_from_dict(data: Mapping[str, Any]) -> HazardousEvent:
    severity = data.get("severity")
    exposure = data.get("exposure")
    controllability = data.get("controllability")
    return HazardousEvent(
        id=data["id"],
        scenario_ref=data["scenario_ref"],
        malfunction_ref=data["malfunction_ref"],
        consequence=data.get("consequence", ""),
        kinematic_rationale=data.get("kinematic_rationale"),
        severity=Severity(severity) if severity else None,
        severity_rationale=data.get("severity_rationale", ""),
        exposure=Exposure(exposure) if exposure else None,
        controllability=Controllability(controllability) if controllability else None,
        explanation=explanation_from_dict(data.get("explanation")),
    )


def lint_finding_to_dict(f: LintFinding) -> dict[str, Any]:
    return {
        "rule_id": f.rule_id,
        "level": f.level.value,
        "snippet": f.snippet,
        "message": f.message,
    }


def lint_finding_from_dict(data: Mapping[str, Any]) -> LintFinding:
    return LintFinding(
        rule_id=data["rule_id"],
        level=LintLevel(data["level"]),
        snippet=data["snippet"],
        message=data["message"],
    )


def goal_to_dict(goal: SafetyGoal) -> dict[str, Any]:
    return {
        "id": goal.id,
        "text": goal.text,
        "strategy": goal.strategy.value,
        "covered_events": list(goal.covered_events),
        "status": goal.status.value,
        "explanation": explanation_to_dict(goal.explanation),
        "lint_findings": [lint_finding_to_dict(f) for f in goal.lint_findings],
    }


def goal_from_dict(data: Mapping[str, Any]) -> SafetyGoal:
    return SafetyGoal(
        id=data["id"],
        text=data["text"],
        strategy=GoalStrategy(data["strategy"]),
        covered_events=tuple(data["covered_events"]),
        status=GoalStatus(data.get("status", "proposed")),
        explanation=explanation_from_dict(data.get("explanation")),
        lint_findings=tuple(
            lint_finding_from_dict(f) for f in data.get("lint_findings", [])
        ),
    )


def redundancy_finding_to_dict(f: RedundancyFinding) -> dict[str, Any]:
    return {
        "goal_a": f.goal_a,
        "goal_b": f.goal_b,
        "relation": f.relation.value,
        "rationale": f.rationale,
        "method": f.method.value,
    }


def redundancy_finding_from_dict(data: Mapping[str, Any]) -> RedundancyFinding:
    return RedundancyFinding(
        goal_a=data["goal_a"],
        goal_b=data["goal_b"],
        relation=RedundancyRelation(data["relation"]),
        rationale=data.get("rationale", ""),
        method=FindingMethod(data["method"]),
    )


def table_to_dict(table: HaraTable) -> dict[str, Any]:
    return {
        "rows": [event_to_dict(r) for r in table.rows],
        "goals": [goal_to_dict(g) for g in table.goals],
        "provenance": {
            "model_name": table.provenance.model_name,
            "temperature_by_step": dict(table.provenance.temperature_by_step),
            "prompt_version": table.provenance.prompt_version,
            "created_at": table.provenance.created_at,
        },
        "item_ref": table.item_ref,
    }


def table_from_dict(data: Mapping[str, Any]) -> HaraTable:
    prov = data["provenance"]
    return HaraTable(
        rows=tuple(event_from_dict(r) for r in data["rows"]),
        goals=tuple(goal_from_dict(g) for g in data["goals"]),
        provenance=Provenance(
            model_name=prov["model_name"],
            temperature_by_step={k: float(v) for k, v in prov["temperature_by_step"].items()},
            prompt_version=prov["prompt_version"],
            created_at=prov["created_at"],
        ),
        item_ref=data["item_ref"],
    )


def dump_json(data: Any) -> str:
    """Canonical JSON used for every persisted artifact."""
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


__all__ = [
    "AggregatedScore",
    "ChecklistCriterion",
    "Controllability",
    "COMMISSION_DEFINITION",
    "ExplanationBundle",
    "Exposure",
    "FindingMethod",
    "GoalStatus",
    "GoalStrategy",
    "GuideWord",
    "HaraTable",
    "HazardousEvent",
    "IdAllocator",
    "ItemDefinition",
    "ItemValidationError",
    "LintFinding",
    "LintLevel",
    "Malfunction",
    "MalfunctionSource",
    "ModelError",
    "OMISSION_DEFINITION",
    "OperationalScenario",
    "Provenance",
    "RedundancyFinding",
    "RedundancyRelation",
    "SCENARIO_LAYERS",
    "ScenarioSource",
    "Severity",
    "SafetyGoal",
    "Verdict",
    "check_finding_orientation",
    "check_malfunction_set",
    "check_referential_integrity",
    "default_guideword_catalogue",
    "dump_json",
    "event_from_dict",
    "event_to_dict",
    "explanation_from_dict",
    "explanation_to_dict",
    "goal_from_dict",
    "goal_to_dict",
    "guideword_from_dict",
    "guideword_to_dict",
    "item_from_dict",
    "item_to_dict",
    "lint_finding_from_dict",
    "lint_finding_to_dict",
    "malfunction_from_dict",
    "malfunction_to_dict",
    "normalize_name",
    "redundancy_finding_from_dict",
    "redundancy_finding_to_dict",
    "scenario_from_dict",
    "scenario_to_dict",
    "table_from_dict",
    "table_to_dict",
    "validate_item_definition",
]
