// Entry point: hash routing between the table, row detail, and checklist
// views. The reviewer id is entered once per browser session and attached to
// every decision; all state lives on the server.

import { getChecklist, getContext, getRow, getScores, getTable, postDecision } from "./api.js";
import type { DecisionRequest } from "./types.js";
import { exportReviewPackageUrl } from "./api.js";
import { clear, el } from "./views/dom.js";
import { renderChecklist } from "./views/checklist.js";
import { renderRowDetail } from "./views/detail.js";
import { renderTableView } from "./views/table.js";

const REVIEWER_KEY = "harakit.reviewer";

function reviewerId(): string {
  let reviewer = window.sessionStorage.getItem(REVIEWER_KEY) ?? "";
  while (!reviewer.trim()) {
    reviewer = window.prompt("Reviewer id for this session:") ?? "";
  }
  window.sessionStorage.setItem(REVIEWER_KEY, reviewer.trim());
  return reviewer.trim();
}

async function submitDecision(decision: DecisionRequest): Promise<void> {
  await postDecision(decision);
  await route(); // optimistic refresh: re-render the active view from the server
}

function navigate(hash: string): void {
  window.location.hash = hash;
}

async function route(): Promise<void> {
  const app = document.getElementById("app");
  if (!app) return;
  const hash = window.location.hash || "#/table";
  try {
    if (hash.startsWith("#/row/")) {
      const rowId = decodeURIComponent(hash.slice("#/row/".length));
      const detail = await getRow(rowId);
      renderRowDetail(app, detail, {
        submit: submitDecision,
        back: () => navigate("#/table"),
        reviewer: reviewerId,
      });
    } else if (hash === "#/checklist") {
      const [checklist, scores] = await Promise.all([getChecklist(), getScores()]);
      renderChecklist(app, checklist, scores, {
        submit: submitDecision,
        refreshScores: getScores,
        reviewer: reviewerId,
      });
    } else {
      const [table, context] = await Promise.all([getTable(), getContext()]);
      renderTableView(app, table, context, (rowId) => navigate(`#/row/${rowId}`));
    }
  } catch (error) {
    clear(app);
    app.appendChild(el("p", "error", `Cannot reach the review service: ${String(error)}`));
  }
}

function bootstrap(): void {
  const nav = document.getElementById("nav");
  if (nav) {
    const tableLink = el("a", "", "Table");
    tableLink.setAttribute("href", "#/table");
    const checklistLink = el("a", "", "Checklist");
    checklistLink.setAttribute("href", "#/checklist");
    const exportLink = el("a", "", "Export review package");
    exportLink.setAttribute("href", exportReviewPackageUrl());
    exportLink.setAttribute("target", "_blank");
    nav.append(tableLink, checklistLink, exportLink);
  }
  window.addEventListener("hashchange", () => void route());
  void route();
}

bootstrap();
