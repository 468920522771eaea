"""Redundancy detection between safety goals.

Stage 1 is a deterministic lexical pre-filter (normalized token Jaccard with
an exact-match short circuit); stage 2 classifies surviving pairs via an
injected callable, normally an LLM call. Findings never delete goals; the
resolution is a human decision.

The normalization here is also the grouping key for the consistency checker,
so both checks agree on what "the same text" means.
"""

from __future__ import annotations

import logging
import re
from fractions import Fraction
from typing import Callable, Iterable, Sequence

from .model import (
    FindingMethod,
    RedundancyFinding,
    RedundancyRelation,
    SafetyGoal,
)

log = logging.getLogger(__name__)

# Fixed stop-word list: function words plus the modal tokens every
# requirement carries, which would otherwise inflate similarity.
STOP_WORDS = frozenset(
    {
        "a", "an", "the", "to", "of", "in", "on", "at", "for", "and", "or",
        "is", "are", "be", "been", "it", "its", "this", "that", "these",
        "with", "by", "do", "does", "will", "when", "while", "any", "all",
        "no", "not", "shall", "should", "must",
    }
)

DEFAULT_JACCARD_THRESHOLD = Fraction(2, 5)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

# Classifier contract: (candidate_text, existing_goal) -> (relation, rationale).
Classifier = Callable[[str, SafetyGoal], tuple[RedundancyRelation, str]]


def normalize_tokens(text: str) -> tuple[str, ...]:
    """Lowercase, strip punctuation, drop stop words."""
    return tuple(t for t in _TOKEN_RE.findall(text.lower()) if t not in STOP_WORDS)


def normalize_key(text: str) -> str:
    """Canonical string form of the normalized token sequence."""
    return " ".join(normalize_tokens(text))


def jaccard(text_a: str, text_b: str) -> Fraction:
    """Jaccard similarity of the normalized token sets, exact arithmetic."""
    set_a = set(normalize_tokens(text_a))
    set_b = set(normalize_tokens(text_b))
    union = set_a | set_b
    if not union:
        return Fraction(1)
    return Fraction(len(set_a & set_b), len(union))


def as_threshold(value: float | str | Fraction) -> Fraction:
    """Exact threshold from a config value ("0.4" and 0.4 both mean 2/5)."""
    if isinstance(value, Fraction):
        return value
    return Fraction(str(value))


def find_redundancies(
    candidate_text: str,
    buffer: Sequence[SafetyGoal],
    *,
    candidate_id: str = "candidate",
    threshold: float | str | Fraction = DEFAULT_JACCARD_THRESHOLD,
    classify: Classifier | None = None,
    warnings: list[str] | None = None,
) -> list[RedundancyFinding]:
    """Compare a candidate requirement text against already existing goals.

    Exact normalized match is reported as duplicate without any LLM call;
    pairs at or above the Jaccard threshold go to the classifier. A failed or
    absent classification degrades to partial_overlap with method=lexical.
    """
    limit = as_threshold(threshold)
    candidate_key = normalize_key(candidate_text)
    findings: list[RedundancyFinding] = []
    for goal in buffer:
        if goal.id == candidate_id:
            continue
        goal_key = normalize_key(goal.text)
        if candidate_key and candidate_key == goal_key:
            findings.append(
                RedundancyFinding(
                    goal_a=candidate_id,
                    goal_b=goal.id,
                    relation=RedundancyRelation.DUPLICATE,
                    rationale="exact match after normalization",
                    method=FindingMethod.LEXICAL,
                )
            )
            continue
        similarity = jaccard(candidate_text, goal.text)
        if similarity < limit:
            continue
        findings.append(
            _classify_pair(candidate_text, candidate_id, goal, similarity, classify, warnings)
        )
    return findings


def _classify_pair(
    candidate_text: str,
    candidate_id: str,
    goal: SafetyGoal,
    similarity: Fraction,
    classify: Classifier | None,
    warnings: list[str] | None,
) -> RedundancyFinding:
    if classify is not None:
        try:
            relation, rationale = classify(candidate_text, goal)
            return RedundancyFinding(
                goal_a=candidate_id,
                goal_b=goal.id,
                relation=relation,
                rationale=rationale,
                method=FindingMethod.LLM,
            )
        except Exception as exc:  # degraded, never fatal: humans resolve
            message = f"redundancy classification failed for {candidate_id}/{goal.id}: {exc}"
            log.warning(message)
            if warnings is not None:
                warnings.append(message)
    return RedundancyFinding(
        goal_a=candidate_id,
        goal_b=goal.id,
        relation=RedundancyRelation.PARTIAL_OVERLAP,
        rationale=f"token overlap {similarity.numerator}/{similarity.denominator} above threshold",
        method=FindingMethod.LEXICAL,
    )


def reuse_source(
    findings: Iterable[RedundancyFinding], buffer: Sequence[SafetyGoal]
) -> SafetyGoal | None:
    """The buffer goal a candidate should reuse, if any.

    Reuse applies when an existing goal is the same requirement (duplicate)
    or already includes the candidate (subsumed_by, read as "candidate is
    subsumed by the existing goal").
    """
    by_id = {g.id: g for g in buffer}
    for finding in findings:
        if finding.relation in (RedundancyRelation.DUPLICATE, RedundancyRelation.SUBSUMED_BY):
            goal = by_id.get(finding.goal_b)
            if goal is not None:
                return goal
    return None
