// Thin typed wrappers over the review-service endpoints. The service runs on
// the same origin that serves these assets.

import type {
  ChecklistPayload,
  ContextPayload,
  DecisionRequest,
  HaraTablePayload,
  RowDetailPayload,
  ScoresPayload,
} from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function requestJson<T>(path: string, init?: RequestInit): Promise<T> {
  const response = await fetch(path, init);
  if (!response.ok) {
    let detail = response.statusText;
    try {
      const body = (await response.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      // non-JSON error body; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return (await response.json()) as T;
}

export function getTable(): Promise<HaraTablePayload> {
  return requestJson<HaraTablePayload>("/hara");
}

export function getRow(rowId: string): Promise<RowDetailPayload> {
  return requestJson<RowDetailPayload>(`/hara/rows/${encodeURIComponent(rowId)}`);
}

export function getContext(): Promise<ContextPayload> {
  return requestJson<ContextPayload>("/context");
}

export function getChecklist(): Promise<ChecklistPayload> {
  return requestJson<ChecklistPayload>("/checklist");
}

export function getScores(): Promise<ScoresPayload> {
  return requestJson<ScoresPayload>("/scores");
}

export function postDecision(decision: DecisionRequest): Promise<{ id: string }> {
  return requestJson<{ id: string }>("/decisions", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(decision),
  });
}

export function exportReviewPackageUrl(): string {
  return "/export/review-package";
}
