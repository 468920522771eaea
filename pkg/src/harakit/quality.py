"""Deterministic quality checks, the review checklist scaffold, and expert
score aggregation.

The vague-phrase list is the single source of truth shared with the prompt
engine's forbidden-pattern block, so generation and checking cannot drift
apart.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from math import sqrt
from typing import Any, Iterable, Mapping, Sequence

from .model import (
    AggregatedScore,
    ChecklistCriterion,
    HaraTable,
    LintFinding,
    LintLevel,
    OperationalScenario,
    Verdict,
)
from .redundancy import normalize_key, normalize_tokens

# Seeded from reviewer language that made requirements untestable; extensible
# via config, deliberately favoring false positives.
VAGUE_PHRASES: tuple[str, ...] = (
    "when necessary",
    "vicinity",
    "if needed",
    "as appropriate",
    "to prevent unnecessary",
)

TECHNOLOGY_TERMS: tuple[str, ...] = (
    "sensor",
    "camera",
    "radar",
    "algorithm",
    "software module",
)


@dataclass(frozen=True)
class LintRuleSet:
    vague_phrases: tuple[str, ...] = VAGUE_PHRASES
    recommendation_modals: tuple[str, ...] = ("should",)
    required_modal: str = "shall"
    technology_terms: tuple[str, ...] = TECHNOLOGY_TERMS

    def __post_init__(self) -> None:
        if not self.vague_phrases or not self.recommendation_modals or not self.technology_terms:
            raise ValueError("lint rule lists must be non-empty")
        if not self.required_modal.strip():
            raise ValueError("required_modal must be non-empty")


def _word_re(word: str) -> re.Pattern[str]:
    return re.compile(rf"\b{re.escape(word)}\b", re.IGNORECASE)


def _phrase_occurrences(text: str, phrase: str) -> list[str]:
    """Exact snippets of each case-insensitive occurrence of a phrase."""
    pattern = re.compile(re.escape(phrase), re.IGNORECASE)
    return [m.group(0) for m in pattern.finditer(text)]


def lint_goal(text: str, rules: LintRuleSet | None = None) -> list[LintFinding]:
    """Lint one requirement text; findings carry the exact offending snippet."""
    rules = rules or LintRuleSet()
    findings: list[LintFinding] = []
    if not _word_re(rules.required_modal).search(text):
        findings.append(
            LintFinding(
                rule_id="missing_shall",
                level=LintLevel.ERROR,
                snippet=text,
                message=f"requirement must use the mandatory modal {rules.required_modal!r}",
            )
        )
    for modal in rules.recommendation_modals:
        for snippet in (m.group(0) for m in _word_re(modal).finditer(text)):
            findings.append(
                LintFinding(
                    rule_id="recommendation_modal",
                    level=LintLevel.ERROR,
                    snippet=snippet,
                    message=f"{modal!r} states a recommendation, not a mandatory requirement",
                )
            )
    for phrase in rules.vague_phrases:
        for snippet in _phrase_occurrences(text, phrase):
            findings.append(
                LintFinding(
                    rule_id="vague_phrase",
                    level=LintLevel.WARNING,
                    snippet=snippet,
                    message=f"{snippet!r} is vague and ambiguous; state a testable condition",
                )
            )
    for term in rules.technology_terms:
        for snippet in _phrase_occurrences(text, term):
            findings.append(
                LintFinding(
                    rule_id="technology_term",
                    level=LintLevel.WARNING,
                    snippet=snippet,
                    message=(
                        f"{snippet!r} names a technical solution; safety goals stay "
                        "solution-free (review checklist item d)"
                    ),
                )
            )
    return findings


def check_consistency(
    table: HaraTable,
    scenarios: Sequence[OperationalScenario] | None = None,
    *,
    deep_agent_check: bool = False,
) -> list[LintFinding]:
    """Cross-row consistency: equal consequences must carry equal severities.

    Rows are grouped by the normalized consequence text (same normalization
    as the redundancy pre-filter); any group with more than one distinct
    severity yields one error finding listing the row ids. The optional agent
    check flags goals whose text shares no agent term with the scenario
    objects of its covered events; it is off by default because it needs
    judgment to act on.
    """
    findings: list[LintFinding] = []
    groups: dict[str, list[str]] = {}
    severities: dict[str, set[str]] = {}
    first_raw: dict[str, str] = {}
    for row in table.rows:
        key = normalize_key(row.consequence)
        groups.setdefault(key, []).append(row.id)
        severities.setdefault(key, set()).add(
            row.severity.value if row.severity else "unset"
        )
        first_raw.setdefault(key, row.consequence)
    for key, row_ids in groups.items():
        if len(row_ids) > 1 and len(severities[key]) > 1:
            findings.append(
                LintFinding(
                    rule_id="inconsistent_severity",
                    level=LintLevel.ERROR,
                    snippet=first_raw[key],
                    message=(
                        "severity differs for the same consequence across rows "
                        + ", ".join(row_ids)
                    ),
                )
            )
    if deep_agent_check and scenarios is not None:
        findings.extend(_agent_mismatch_findings(table, scenarios))
    return findings


def _agent_mismatch_findings(
    table: HaraTable, scenarios: Sequence[OperationalScenario]
) -> list[LintFinding]:
    scenario_by_id = {s.id: s for s in scenarios}
    findings: list[LintFinding] = []
    for goal in table.goals:
        agent_tokens: set[str] = set()
        for event_id in goal.covered_events:
            row = table.row(event_id)
            scenario = scenario_by_id.get(row.scenario_ref)
            if scenario is None:
                continue
            for value in scenario.factors.get("objects", ()):
                agent_tokens.update(normalize_tokens(value))
        if agent_tokens and not agent_tokens & set(normalize_tokens(goal.text)):
            findings.append(
                LintFinding(
                    rule_id="agent_mismatch",
                    level=LintLevel.WARNING,
                    snippet=goal.text,
                    message=(
                        f"{goal.id} names none of the scenario agents of its covered "
                        "events; check that the goal addresses the hazardous event"
                    ),
                )
            )
    return findings


# --- review checklist --------------------------------------------------------

CHECKLIST_CRITERIA: tuple[ChecklistCriterion, ...] = (
    ChecklistCriterion(
        "a",
        "Considering the Operation Design Domain and the output under analysis "
        "(i.e., lateral motion request), have all failure modes or functional "
        "insufficiencies (i.e., Commission and Omission) been identified in the HARA?",
    ),
    ChecklistCriterion(
        "b",
        "Have all relevant hazardous events been identified? (e.g., the relevant "
        "scenario elements in ODD are covered for both Omission and Commission)",
    ),
    ChecklistCriterion(
        "c",
        "Have all Hazardous Events been correctly formulated to present the "
        "consequence of the identified malfunction (or functional insufficiency) "
        "in the specified scenario?",
    ),
    ChecklistCriterion(
        "d",
        "Are the safety mechanisms excluded from the analysis? (e.g., no "
        "assumption is made on the possible internal mechanisms to avoid the "
        "hazardous events)",
    ),
    ChecklistCriterion("e", "Are all assigned severities corresponding with the rational?"),
    ChecklistCriterion(
        "f",
        "Is there any inconsistency within the results of HARA? (e.g., the "
        "severity classifications are different for the same consequence.)",
    ),
    ChecklistCriterion(
        "g",
        "Are there safety goals formulated for each hazardous events with "
        "severity higher than S0?",
    ),
    ChecklistCriterion(
        "h",
        "Does the safety goal cover the hazardous event? (i.e., the safety goal "
        "is enough to avoid or mitigate the hazardous event)",
    ),
    ChecklistCriterion(
        "i",
        "Have all safety goals been formulated in a correct way? (e.g., Unambiguous)",
    ),
    ChecklistCriterion(
        "j",
        "Is the HARA contributing to the achievement of functional safety or SOTIF?",
    ),
)

SCALE_LABELS: Mapping[int, str] = {
    1: "Not fulfilled systematically in all rows of HARA",
    2: "Not fulfilled in most of the rows of HARA",
    3: "No opinion",
    4: "Fulfilled in most of the rows of HARA",
    5: "Fulfilled in all rows of HARA",
}

# Criteria with machine-checkable evidence; all others are human judgment and
# the suite never fabricates a verdict for them.
MACHINE_SIGNAL_CRITERIA = frozenset({"d", "f", "g", "i"})


def checklist_scaffold(
    table: HaraTable,
    scenarios: Sequence[OperationalScenario] | None = None,
    rules: LintRuleSet | None = None,
) -> dict[str, Any]:
    """Review package: the ten criteria with machine evidence where possible."""
    uncovered = table.uncovered_gated_rows()
    gate_evidence = (
        "machine-verified: pass"
        if not uncovered
        else "machine-verified: fail (uncovered rows: " + ", ".join(uncovered) + ")"
    )
    tech_findings = [
        (goal.id, f)
        for goal in table.goals
        for f in lint_goal(goal.text, rules)
        if f.rule_id == "technology_term"
    ]
    consistency = check_consistency(table, scenarios)
    lint_counts = {"error": 0, "warning": 0}
    for goal in table.goals:
        for f in lint_goal(goal.text, rules):
            lint_counts[f.level.value] += 1
    evidence: dict[str, str] = {
        "g": gate_evidence,
        "d": (
            "no technology terms found in goal texts"
            if not tech_findings
            else "technology terms found: "
            + "; ".join(f"{gid}: {f.snippet!r}" for gid, f in tech_findings)
        ),
        "f": (
            "no severity inconsistencies found"
            if not consistency
            else "; ".join(f.message for f in consistency)
        ),
        "i": (
            f"goal lint summary: {lint_counts['error']} error(s), "
            f"{lint_counts['warning']} warning(s) across {len(table.goals)} goal(s)"
        ),
    }
    return {
        "criteria": [
            {
                "letter": c.letter,
                "text": c.text,
                "machine_evidence": evidence.get(c.letter),
                "human_judgment": "",
            }
            for c in CHECKLIST_CRITERIA
        ],
        "scale": {str(k): v for k, v in SCALE_LABELS.items()},
    }


# --- expert score aggregation ------------------------------------------------

# Raw 1..5 scale with the no-opinion midpoint dropped, remapped onto 1..4.
SCORE_REMAP: Mapping[int, int] = {1: 1, 2: 2, 4: 3, 5: 4}


class NoDataError(ValueError):
    """Every verdict was 'no opinion'; the mean is undefined."""


def aggregate_scores(criterion: str, raw_scores: Iterable[int]) -> AggregatedScore:
    """Mean and population standard deviation on the remapped 1..4 scale.

    All 3s ("no opinion") are excluded first; 1 and 2 keep their value, 4
    maps to 3 and 5 maps to 4. Raises NoDataError when nothing remains.
    """
    raw = list(raw_scores)
    for score in raw:
        if score not in (1, 2, 3, 4, 5):
            raise ValueError(f"raw score must be in 1..5, got {score}")
    remapped = [SCORE_REMAP[s] for s in raw if s != 3]
    n_excluded = len(raw) - len(remapped)
    if not remapped:
        raise NoDataError(f"criterion {criterion}: no verdicts after exclusion")
    n = len(remapped)
    mean = Fraction(sum(remapped), n)
    variance = sum((Fraction(x) - mean) ** 2 for x in remapped) / n
    return AggregatedScore(
        criterion=criterion,
        mean=float(mean),
        stddev=sqrt(float(variance)),
        n_used=n,
        n_excluded=n_excluded,
    )


def aggregate_all(verdicts: Iterable[Verdict]) -> dict[str, AggregatedScore | None]:
    """Per-criterion aggregation; None marks a criterion with no usable data."""
    by_criterion: dict[str, list[int]] = {}
    for v in verdicts:
        by_criterion.setdefault(v.criterion, []).append(v.raw_score)
    result: dict[str, AggregatedScore | None] = {}
    for criterion in sorted(by_criterion):
        try:
            result[criterion] = aggregate_scores(criterion, by_criterion[criterion])
        except NoDataError:
            result[criterion] = None
    return result
