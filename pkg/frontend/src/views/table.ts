// Sortable, filterable table of hazardous events.

import type { ContextPayload, HaraTablePayload } from "../types.js";
import {
  EMPTY_FILTERS,
  RowView,
  SortKey,
  TableFilters,
  buildRowViews,
  filterRows,
  guideWordOptions,
  severityOptions,
  sortRows,
} from "../state.js";
import { clear, el, option } from "./dom.js";

const COLUMNS: { key: SortKey | null; label: string }[] = [
  { key: "id", label: "ID" },
  { key: "severity", label: "Severity" },
  { key: "guideWord", label: "Guide word" },
  { key: null, label: "Core scenario" },
  { key: null, label: "Consequence" },
  { key: "goalCount", label: "Goals" },
  { key: "lintCount", label: "Lint" },
];

export function renderTableView(
  container: HTMLElement,
  table: HaraTablePayload,
  context: ContextPayload,
  openRow: (rowId: string) => void,
): void {
  const rows = buildRowViews(table, context);
  let filters: TableFilters = { ...EMPTY_FILTERS };
  let sortKey: SortKey = "id";
  let descending = false;

  clear(container);
  container.appendChild(el("h2", "", `Hazard analysis for ${table.item_ref}`));

  const bar = el("div", "filter-bar");
  const severitySelect = el("select");
  severitySelect.appendChild(option("", "all severities"));
  severityOptions(rows).forEach((s) => severitySelect.appendChild(option(s)));
  const guideSelect = el("select");
  guideSelect.appendChild(option("", "all guide words"));
  guideWordOptions(context).forEach((g) => guideSelect.appendChild(option(g)));
  const lintToggle = el("input") as HTMLInputElement;
  lintToggle.type = "checkbox";
  lintToggle.id = "linted-only";
  const lintLabel = el("label", "", "only rows with lint findings");
  lintLabel.htmlFor = "linted-only";
  bar.append(severitySelect, guideSelect, lintToggle, lintLabel);
  container.appendChild(bar);

  const tableNode = el("table", "hara-table");
  const head = el("thead");
  const headRow = el("tr");
  for (const column of COLUMNS) {
    const th = el("th", column.key ? "sortable" : "", column.label);
    if (column.key) {
      th.addEventListener("click", () => {
        descending = sortKey === column.key ? !descending : false;
        sortKey = column.key as SortKey;
        paint();
      });
    }
    headRow.appendChild(th);
  }
  head.appendChild(headRow);
  tableNode.appendChild(head);
  const body = el("tbody");
  tableNode.appendChild(body);
  container.appendChild(tableNode);

  function paint(): void {
    clear(body);
    for (const row of sortRows(filterRows(rows, filters), sortKey, descending)) {
      body.appendChild(renderRow(row));
    }
  }

  function renderRow(row: RowView): HTMLTableRowElement {
    const tr = el("tr", "row-line");
    tr.appendChild(el("td", "", row.id));
    tr.appendChild(el("td", `sev sev-${row.severity.toLowerCase()}`, row.severity));
    tr.appendChild(el("td", "", row.guideWord));
    tr.appendChild(el("td", "", row.coreScenario));
    tr.appendChild(el("td", "", row.consequence));
    tr.appendChild(el("td", "", String(row.goalCount)));
    const lintCell = el("td");
    if (row.lintCount > 0) {
      lintCell.appendChild(
        el("span", row.hasLintErrors ? "badge badge-error" : "badge badge-warn",
          String(row.lintCount)),
      );
    }
    tr.appendChild(lintCell);
    tr.addEventListener("click", () => openRow(row.id));
    return tr;
  }

  severitySelect.addEventListener("change", () => {
    filters = { ...filters, severity: severitySelect.value };
    paint();
  });
  guideSelect.addEventListener("change", () => {
    filters = { ...filters, guideWord: guideSelect.value };
    paint();
  });
  lintToggle.addEventListener("change", () => {
    filters = { ...filters, lintedOnly: lintToggle.checked };
    paint();
  });

  paint();
}
