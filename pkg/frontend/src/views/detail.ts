// Row detail: explanation bundle, four-column strategy comparison with
// accept/reject/prefer controls, and the redundancy resolver.

import type { DecisionRequest, RowDetailPayload, SafetyGoal } from "../types.js";
import { STRATEGY_LABELS } from "../types.js";
import {
  acceptGoal,
  adoptReused,
  commentOn,
  openRedundancyPairs,
  preferStrategy,
  rejectGoal,
  resolveRedundancy,
  reusedSource,
  strategyColumns,
} from "../state.js";
import { clear, el } from "./dom.js";

export interface DetailHandlers {
  submit: (decision: DecisionRequest) => Promise<void>;
  back: () => void;
  reviewer: () => string;
}

export function renderRowDetail(
  container: HTMLElement,
  detail: RowDetailPayload,
  handlers: DetailHandlers,
): void {
  clear(container);
  const back = el("button", "link", "< back to table");
  back.addEventListener("click", handlers.back);
  container.appendChild(back);

  const row = detail.row;
  container.appendChild(el("h2", "", `${row.id} (severity ${row.severity ?? "?"})`));
  container.appendChild(el("p", "consequence", row.consequence));
  container.appendChild(el("p", "rationale", `Severity rationale: ${row.severity_rationale}`));
  if (row.kinematic_rationale) {
    container.appendChild(el("p", "rationale", `Kinematics: ${row.kinematic_rationale}`));
  }

  const bundle = el("details", "bundle");
  bundle.appendChild(el("summary", "", "Explanation bundle"));
  for (const key of ["background", "assumptions", "reasoning"] as const) {
    bundle.appendChild(el("h4", "", key));
    bundle.appendChild(el("p", "", row.explanation[key] || "(empty)"));
  }
  container.appendChild(bundle);

  if (detail.preferred_strategy) {
    container.appendChild(
      el("p", "preferred", `Preferred strategy: ${detail.preferred_strategy}`),
    );
  }

  container.appendChild(el("h3", "", "Safety goals by strategy"));
  const grid = el("div", "strategy-grid");
  for (const { strategy, goal } of strategyColumns(detail.goals)) {
    const column = el("div", "strategy-column");
    const header = el("div", "strategy-head");
    header.appendChild(el("h4", "", STRATEGY_LABELS[strategy]));
    const prefer = el("button", "", "prefer");
    prefer.addEventListener("click", () =>
      handlers.submit(preferStrategy(row.id, strategy, handlers.reviewer())),
    );
    header.appendChild(prefer);
    column.appendChild(header);
    column.appendChild(goal ? renderGoal(goal, detail, handlers) : el("p", "muted", "no goal"));
    grid.appendChild(column);
  }
  container.appendChild(grid);

  container.appendChild(renderRedundancy(detail, handlers));
  container.appendChild(renderCommentBox(row.id, handlers));
}

function renderGoal(
  goal: SafetyGoal,
  detail: RowDetailPayload,
  handlers: DetailHandlers,
): HTMLElement {
  const card = el("div", `goal-card status-${goal.status}`);
  card.appendChild(el("div", "goal-id", `${goal.id} - ${goal.status}`));
  // goal text is read-only by design; rewordings go into comments
  card.appendChild(el("p", "goal-text", goal.text));
  const source = reusedSource(goal);
  if (source) {
    card.appendChild(el("p", "muted", `reused from ${source}`));
  }
  for (const finding of goal.lint_findings) {
    card.appendChild(
      el("p", `lint lint-${finding.level}`, `${finding.rule_id}: ${finding.message}`),
    );
  }
  const controls = el("div", "controls");
  const accept = el("button", "accept", "accept");
  accept.addEventListener("click", () =>
    handlers.submit(acceptGoal(goal.id, handlers.reviewer())),
  );
  const reject = el("button", "reject", "reject");
  reject.addEventListener("click", () =>
    handlers.submit(rejectGoal(goal.id, handlers.reviewer())),
  );
  controls.append(accept, reject);
  if (goal.status === "reused_existing") {
    const adopt = el("button", "", "adopt reused");
    adopt.addEventListener("click", () =>
      handlers.submit(adoptReused(goal.id, handlers.reviewer())),
    );
    controls.appendChild(adopt);
  }
  card.appendChild(controls);
  return card;
}

function renderRedundancy(detail: RowDetailPayload, handlers: DetailHandlers): HTMLElement {
  const section = el("div", "redundancy");
  const open = openRedundancyPairs(detail.redundancy_findings);
  const title = el("h3");
  title.textContent = "Redundancy findings ";
  title.appendChild(el("span", "badge badge-warn", String(open.length)));
  section.appendChild(title);
  if (detail.redundancy_findings.length === 0) {
    section.appendChild(el("p", "muted", "none for this row"));
    return section;
  }
  for (const finding of detail.redundancy_findings) {
    const line = el("div", finding.resolved ? "finding resolved" : "finding");
    line.appendChild(
      el(
        "span",
        "",
        `${finding.goal_a} ${finding.relation} ${finding.goal_b} (${finding.method}): ${finding.rationale}`,
      ),
    );
    if (!finding.resolved) {
      for (const resolution of ["keep_a", "keep_b", "merge_note"] as const) {
        const button = el("button", "", resolution.replace("_", " "));
        button.addEventListener("click", () => {
          const note =
            resolution === "merge_note"
              ? window.prompt("Merge note for the engineers:") ?? ""
              : "";
          void handlers.submit(
            resolveRedundancy(finding, resolution, handlers.reviewer(), note),
          );
        });
        line.appendChild(button);
      }
    } else {
      line.appendChild(el("span", "muted", " resolved"));
    }
    section.appendChild(line);
  }
  return section;
}

function renderCommentBox(target: string, handlers: DetailHandlers): HTMLElement {
  const box = el("div", "comment-box");
  box.appendChild(el("h3", "", "Comment"));
  const input = el("textarea") as HTMLTextAreaElement;
  input.placeholder = "Review comment (proposed rewordings go here; goal text is read-only)";
  const send = el("button", "", "post comment");
  send.addEventListener("click", () => {
    const text = input.value.trim();
    if (!text) return;
    void handlers.submit(commentOn(target, text, handlers.reviewer())).then(() => {
      input.value = "";
    });
  });
  box.append(input, send);
  return box;
}
