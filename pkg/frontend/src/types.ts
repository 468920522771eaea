// Payload shapes mirrored from the review service JSON. The UI holds no
// domain types of its own.

export interface ExplanationBundle {
  background: string;
  assumptions: string;
  reasoning: string;
}

export interface HazardousEventRow {
  id: string;
  scenario_ref: string;
  malfunction_ref: string;
  consequence: string;
  kinematic_rationale: string | null;
  severity: string | null;
  severity_rationale: string;
  exposure: string | null;
  controllability: string | null;
  explanation: ExplanationBundle;
}

export interface LintFinding {
  rule_id: string;
  level: "error" | "warning";
  snippet: string;
  message: string;
}

export type GoalStrategy =
  | "avoid_failure_mode"
  | "restrict_exposure"
  | "improve_controllability"
  | "reduce_severity";

export const STRATEGY_ORDER: GoalStrategy[] = [
  "avoid_failure_mode",
  "restrict_exposure",
  "improve_controllability",
  "reduce_severity",
];

export const STRATEGY_LABELS: Record<GoalStrategy, string> = {
  avoid_failure_mode: "Avoid failure mode",
  restrict_exposure: "Restrict exposure",
  improve_controllability: "Improve controllability",
  reduce_severity: "Reduce severity",
};

export interface SafetyGoal {
  id: string;
  text: string;
  strategy: GoalStrategy;
  covered_events: string[];
  status: "proposed" | "reused_existing" | "accepted" | "rejected";
  explanation: ExplanationBundle;
  lint_findings: LintFinding[];
}

export interface HaraTablePayload {
  rows: HazardousEventRow[];
  goals: SafetyGoal[];
  provenance: {
    model_name: string;
    temperature_by_step: Record<string, number>;
    prompt_version: string;
    created_at: string;
  };
  item_ref: string;
}

export interface Scenario {
  id: string;
  core_summary: string;
  detailed_description: string;
  factors: Record<string, string[]>;
  cluster_id: string | null;
  source: string;
}

export interface Malfunction {
  id: string;
  output_ref: number;
  guide_word: string;
  description: string;
  source: string;
}

export interface ContextPayload {
  scenarios: Scenario[];
  malfunctions: Malfunction[];
}

export interface RedundancyFindingPayload {
  goal_a: string;
  goal_b: string;
  relation: string;
  rationale: string;
  method: string;
  resolved: boolean;
}

export interface RowDetailPayload {
  row: HazardousEventRow;
  goals: SafetyGoal[];
  lint_findings: Record<string, string[]>;
  redundancy_findings: RedundancyFindingPayload[];
  preferred_strategy: string | null;
  comments: DecisionRecord[];
}

export interface ChecklistCriterion {
  letter: string;
  text: string;
  machine_evidence: string | null;
  human_judgment: string;
}

export interface ChecklistPayload {
  criteria: ChecklistCriterion[];
  scale: Record<string, string>;
}

export interface AggregatedScore {
  criterion: string;
  mean: number;
  stddev: number;
  n_used: number;
  n_excluded: number;
}

export interface NoDataScore {
  criterion: string;
  no_data: true;
}

export type ScoreEntry = AggregatedScore | NoDataScore;

export type ScoresPayload = Record<string, ScoreEntry>;

export type DecisionKind =
  | "accept_goal"
  | "reject_goal"
  | "adopt_reused"
  | "prefer_strategy"
  | "resolve_redundancy"
  | "comment"
  | "verdict";

export interface DecisionRequest {
  target: string;
  kind: DecisionKind;
  reviewer: string;
  payload: Record<string, unknown>;
}

export interface DecisionRecord extends DecisionRequest {
  id: string;
  at: string;
}

export function isNoData(entry: ScoreEntry): entry is NoDataScore {
  return (entry as NoDataScore).no_data === true;
}
