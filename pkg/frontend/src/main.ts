/** DOM glue: wires the pure state/render modules to the static page. */

import { checkHealth, submitExtraction } from "./api.js";
import { renderPage } from "./render.js";
import {
  DemoState,
  canSubmit,
  initialState,
  selectHead,
  selectTail,
  setText,
} from "./state.js";

let state: DemoState = initialState;

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function sync(next: DemoState): void {
  state = next;
  el<HTMLButtonElement>("submit").disabled = !canSubmit(state);
  el<HTMLDivElement>("output").innerHTML = renderPage(state);
}

function selectedSpan(): { start: number; end: number } | null {
  const input = el<HTMLTextAreaElement>("text");
  const start = input.selectionStart ?? 0;
  const end = input.selectionEnd ?? 0;
  return start < end ? { start, end } : null;
}

function init(): void {
  const input = el<HTMLTextAreaElement>("text");
  input.addEventListener("input", () => sync(setText(state, input.value)));
  el<HTMLButtonElement>("mark-head").addEventListener("click", () =>
    sync(selectHead(state, selectedSpan())),
  );
  el<HTMLButtonElement>("mark-tail").addEventListener("click", () =>
    sync(selectTail(state, selectedSpan())),
  );
  el<HTMLButtonElement>("submit").addEventListener("click", async () => {
    sync({ ...state, inFlight: true });
    sync(await submitExtraction({ ...state, inFlight: false }, fetch.bind(window)));
  });
  checkHealth(fetch.bind(window)).then((ok) => {
    el<HTMLSpanElement>("health").textContent = ok ? "service up" : "service down";
  });
  sync(state);
}

document.addEventListener("DOMContentLoaded", init);
