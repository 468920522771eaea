// Pure view-model logic. Everything here is a function of service payloads,
// so a full page reload reconstructs the identical view (the client itself
// is stateless); every user action maps to exactly one decision request.

import type {
  ContextPayload,
  DecisionRequest,
  GoalStrategy,
  HaraTablePayload,
  HazardousEventRow,
  Malfunction,
  RedundancyFindingPayload,
  SafetyGoal,
  Scenario,
  ScoreEntry,
} from "./types.js";
import { STRATEGY_ORDER, isNoData } from "./types.js";

export interface RowView {
  id: string;
  severity: string;
  guideWord: string;
  coreScenario: string;
  malfunction: string;
  consequence: string;
  goalCount: number;
  lintCount: number;
  hasLintErrors: boolean;
}

export interface TableFilters {
  severity: string;
  guideWord: string;
  lintedOnly: boolean;
}

export const EMPTY_FILTERS: TableFilters = { severity: "", guideWord: "", lintedOnly: false };

export function severityLabel(value: string | null): string {
  return value ? value.toUpperCase() : "?";
}

export function buildRowViews(table: HaraTablePayload, context: ContextPayload): RowView[] {
  const scenarioById = new Map<string, Scenario>(context.scenarios.map((s) => [s.id, s]));
  const malfunctionById = new Map<string, Malfunction>(
    context.malfunctions.map((m) => [m.id, m]),
  );
  return table.rows.map((row) => {
    const goals = goalsForRow(table.goals, row.id);
    const findings = goals.flatMap((g) => g.lint_findings);
    const malfunction = malfunctionById.get(row.malfunction_ref);
    const scenario = scenarioById.get(row.scenario_ref);
    return {
      id: row.id,
      severity: severityLabel(row.severity),
      guideWord: malfunction ? malfunction.guide_word : "?",
      coreScenario: scenario ? scenario.core_summary : row.scenario_ref,
      malfunction: malfunction ? malfunction.description : row.malfunction_ref,
      consequence: row.consequence,
      goalCount: goals.length,
      lintCount: findings.length,
      hasLintErrors: findings.some((f) => f.level === "error"),
    };
  });
}

export function goalsForRow(goals: SafetyGoal[], rowId: string): SafetyGoal[] {
  return goals.filter((g) => g.covered_events.includes(rowId));
}

export function filterRows(rows: RowView[], filters: TableFilters): RowView[] {
  return rows.filter((row) => {
    if (filters.severity && row.severity !== filters.severity) return false;
    if (filters.guideWord && row.guideWord !== filters.guideWord) return false;
    if (filters.lintedOnly && row.lintCount === 0) return false;
    return true;
  });
}

export type SortKey = "id" | "severity" | "guideWord" | "goalCount" | "lintCount";

export function sortRows(rows: RowView[], key: SortKey, descending = false): RowView[] {
  const sorted = [...rows].sort((a, b) => {
    const va = a[key];
    const vb = b[key];
    if (va < vb) return -1;
    if (va > vb) return 1;
    return a.id < b.id ? -1 : 1;
  });
  return descending ? sorted.reverse() : sorted;
}

export function guideWordOptions(context: ContextPayload): string[] {
  return [...new Set(context.malfunctions.map((m) => m.guide_word))].sort();
}

export function severityOptions(rows: RowView[]): string[] {
  return [...new Set(rows.map((r) => r.severity))].sort();
}

// One column per strategy, in canonical order, empty when the strategy
// yielded no goal for this event.
export function strategyColumns(
  goals: SafetyGoal[],
): { strategy: GoalStrategy; goal: SafetyGoal | null }[] {
  return STRATEGY_ORDER.map((strategy) => ({
    strategy,
    goal: goals.find((g) => g.strategy === strategy) ?? null,
  }));
}

// Reused goals record their source in the explanation background
// ("Reused existing goal SG-0042: ..."); surface that id for display.
const REUSE_RE = /Reused existing goal (SG-\d+)/;

export function reusedSource(goal: SafetyGoal): string | null {
  if (goal.status !== "reused_existing") return null;
  const match = REUSE_RE.exec(goal.explanation.background);
  return match ? match[1] ?? null : null;
}

export function openRedundancyPairs(
  findings: RedundancyFindingPayload[],
): RedundancyFindingPayload[] {
  return findings.filter((f) => !f.resolved && f.relation !== "distinct");
}

// --- decision builders: exactly one POST body per user action -----------------

export function acceptGoal(goalId: string, reviewer: string): DecisionRequest {
  return { target: goalId, kind: "accept_goal", reviewer, payload: {} };
}

export function rejectGoal(goalId: string, reviewer: string): DecisionRequest {
  return { target: goalId, kind: "reject_goal", reviewer, payload: {} };
}

export function adoptReused(goalId: string, reviewer: string): DecisionRequest {
  return { target: goalId, kind: "adopt_reused", reviewer, payload: {} };
}

export function preferStrategy(
  eventId: string,
  strategy: GoalStrategy,
  reviewer: string,
): DecisionRequest {
  return { target: eventId, kind: "prefer_strategy", reviewer, payload: { strategy } };
}

export function resolveRedundancy(
  finding: RedundancyFindingPayload,
  resolution: "keep_a" | "keep_b" | "merge_note",
  reviewer: string,
  note = "",
): DecisionRequest {
  return {
    target: finding.goal_a,
    kind: "resolve_redundancy",
    reviewer,
    payload: { other: finding.goal_b, resolution, note },
  };
}

export function commentOn(target: string, text: string, reviewer: string): DecisionRequest {
  return { target, kind: "comment", reviewer, payload: { text } };
}

export function scoreCriterion(
  letter: string,
  rawScore: number,
  reviewer: string,
): DecisionRequest {
  return { target: letter, kind: "verdict", reviewer, payload: { raw_score: rawScore } };
}

// --- checklist helpers ----------------------------------------------------------

// A raw score of 3 is "no opinion" and is excluded before aggregation.
export function isExcludedScore(rawScore: number): boolean {
  return rawScore === 3;
}

export function formatScore(entry: ScoreEntry | undefined): string {
  if (!entry) return "no verdicts yet";
  if (isNoData(entry)) return "no data (all votes were no-opinion)";
  return `mean ${entry.mean.toFixed(2)} (stddev ${entry.stddev.toFixed(2)}, n=${entry.n_used}, excluded ${entry.n_excluded})`;
}
