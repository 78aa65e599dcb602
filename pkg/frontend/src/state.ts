/** Demo page state and its pure transition functions. */

export interface Span {
  start: number;
  end: number;
}

export interface EntityPayload {
  mention: string;
  span: [number, number];
  id?: string;
}

export interface ExtractionResult {
  head: EntityPayload;
  tail: EntityPayload;
  relation: string;
  score: number;
}

export interface DemoState {
  text: string;
  head: Span | null;
  tail: Span | null;
  results: ExtractionResult[] | null;
  inFlight: boolean;
  error: string | null;
}

export const initialState: DemoState = {
  text: "",
  head: null,
  tail: null,
  results: null,
  inFlight: false,
  error: null,
};

export function canSubmit(state: DemoState): boolean {
  return state.text.trim().length > 0 && !state.inFlight;
}

function spanValid(span: Span, text: string): boolean {
  return 0 <= span.start && span.start < span.end && span.end <= text.length;
}

function spansOverlap(a: Span, b: Span): boolean {
  return a.start < b.end && b.start < a.end;
}

/** Replace the text; spans that no longer fit the new text are dropped. */
export function setText(state: DemoState, text: string): DemoState {
  const head = state.head && spanValid(state.head, text) ? state.head : null;
  const tail = state.tail && spanValid(state.tail, text) ? state.tail : null;
  return { ...state, text, head, tail };
}

export function selectHead(state: DemoState, span: Span | null): DemoState {
  if (span === null) return { ...state, head: null };
  if (!spanValid(span, state.text)) return state;
  if (state.tail && spansOverlap(span, state.tail)) return state;
  return { ...state, head: span };
}

export function selectTail(state: DemoState, span: Span | null): DemoState {
  if (span === null) return { ...state, tail: null };
  if (!spanValid(span, state.text)) return state;
  if (state.head && spansOverlap(span, state.head)) return state;
  return { ...state, tail: span };
}

export function beginRequest(state: DemoState): DemoState {
  return { ...state, inFlight: true, error: null };
}

export function requestSucceeded(state: DemoState, results: ExtractionResult[]): DemoState {
  return { ...state, inFlight: false, error: null, results };
}

/** Failures keep the input text and the previous results untouched. */
export function requestFailed(state: DemoState, message: string): DemoState {
  return { ...state, inFlight: false, error: message };
}
