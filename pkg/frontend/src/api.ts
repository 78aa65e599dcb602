/** HTTP client for the extraction service; the demo never computes scores. */

import {
  DemoState,
  ExtractionResult,
  beginRequest,
  canSubmit,
  requestFailed,
  requestSucceeded,
} from "./state.js";

export const UNREACHABLE_MESSAGE = "service unreachable";

export interface ExtractionRequestBody {
  text: string;
  h?: { pos: [number, number] };
  t?: { pos: [number, number] };
  top_k: number;
}

/** Spans are sent exactly as selected: characters [start, end). */
export function buildRequestBody(state: DemoState, topK = 3): ExtractionRequestBody {
  const body: ExtractionRequestBody = { text: state.text, top_k: topK };
  if (state.head && state.tail) {
    body.h = { pos: [state.head.start, state.head.end] };
    body.t = { pos: [state.tail.start, state.tail.end] };
  }
  return body;
}

export type FetchLike = (url: string, init: RequestInit) => Promise<Response>;

export async function submitExtraction(
  state: DemoState,
  fetchFn: FetchLike,
  base = "",
  topK = 3,
): Promise<DemoState> {
  if (!canSubmit(state)) return state;
  const pending = beginRequest(state);
  let response: Response;
  try {
    response = await fetchFn(`${base}/extract`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(buildRequestBody(state, topK)),
    });
  } catch {
    return requestFailed(pending, UNREACHABLE_MESSAGE);
  }
  if (!response.ok) {
    let message = `request failed (${response.status})`;
    try {
      const payload = await response.json();
      if (typeof payload?.detail === "string") message = payload.detail;
    } catch {
      // keep the generic status message
    }
    return requestFailed(pending, message);
  }
  try {
    const payload = await response.json();
    if (!Array.isArray(payload?.results)) throw new Error("malformed payload");
    return requestSucceeded(pending, payload.results as ExtractionResult[]);
  } catch {
    return requestFailed(pending, "malformed response from service");
  }
}

export async function checkHealth(fetchFn: FetchLike, base = ""): Promise<boolean> {
  try {
    const response = await fetchFn(`${base}/health`, { method: "GET" });
    return response.ok;
  } catch {
    return false;
  }
}
