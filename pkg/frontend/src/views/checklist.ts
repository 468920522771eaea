// Checklist panel: the ten criteria with the 1-5 scale, comment fields, and
// live aggregated scores.

import type { ChecklistPayload, DecisionRequest, ScoresPayload } from "../types.js";
import { commentOn, formatScore, isExcludedScore, scoreCriterion } from "../state.js";
import { clear, el } from "./dom.js";

export interface ChecklistHandlers {
  submit: (decision: DecisionRequest) => Promise<void>;
  refreshScores: () => Promise<ScoresPayload>;
  reviewer: () => string;
}

export function renderChecklist(
  container: HTMLElement,
  checklist: ChecklistPayload,
  scores: ScoresPayload,
  handlers: ChecklistHandlers,
): void {
  clear(container);
  container.appendChild(el("h2", "", "Review checklist"));
  const scaleNote = Object.entries(checklist.scale)
    .map(([value, label]) => `${value} = ${label}`)
    .join("; ");
  container.appendChild(el("p", "muted", scaleNote));

  const scoreNodes = new Map<string, HTMLElement>();

  for (const criterion of checklist.criteria) {
    const block = el("div", "criterion");
    block.appendChild(el("h3", "", `${criterion.letter}. ${criterion.text}`));
    if (criterion.machine_evidence) {
      block.appendChild(el("p", "evidence", `machine evidence: ${criterion.machine_evidence}`));
    } else {
      block.appendChild(el("p", "muted", "human judgment only"));
    }

    const scale = el("div", "scale");
    const preview = el("span", "muted");
    for (const value of [1, 2, 3, 4, 5]) {
      const button = el("button", "score", String(value));
      button.addEventListener("click", () => {
        preview.textContent = isExcludedScore(value)
          ? "no opinion: excluded from the aggregated score"
          : `will count as a ${value < 3 ? value : value - 1} on the 1-4 scale`;
        void handlers
          .submit(scoreCriterion(criterion.letter, value, handlers.reviewer()))
          .then(() => handlers.refreshScores())
          .then((fresh) => paintScores(fresh));
      });
      scale.appendChild(button);
    }
    scale.appendChild(preview);
    block.appendChild(scale);

    const scoreLine = el("p", "score-line", formatScore(scores[criterion.letter]));
    scoreNodes.set(criterion.letter, scoreLine);
    block.appendChild(scoreLine);

    const comment = el("textarea") as HTMLTextAreaElement;
    comment.placeholder = "comment for this criterion";
    const send = el("button", "", "post comment");
    send.addEventListener("click", () => {
      const text = comment.value.trim();
      if (!text) return;
      void handlers
        .submit(commentOn(criterion.letter, text, handlers.reviewer()))
        .then(() => {
          comment.value = "";
        });
    });
    block.append(comment, send);
    container.appendChild(block);
  }

  function paintScores(fresh: ScoresPayload): void {
    for (const [letter, node] of scoreNodes) {
      node.textContent = formatScore(fresh[letter]);
    }
  }
}
