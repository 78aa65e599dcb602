/** Pure HTML-string renderers, kept DOM-free so they are directly testable. */

import { DemoState, ExtractionResult } from "./state.js";

export function escapeHtml(raw: string): string {
  return raw
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Every displayed score is the service's number, fixed to 3 decimals. */
export function formatScore(score: number): string {
  return score.toFixed(3);
}

/** Sentence with the head span in one style and the tail span in another. */
export function highlightSpans(
  text: string,
  head: [number, number] | null,
  tail: [number, number] | null,
): string {
  const marks: { span: [number, number]; cls: string }[] = [];
  if (head) marks.push({ span: head, cls: "head" });
  if (tail) marks.push({ span: tail, cls: "tail" });
  marks.sort((a, b) => a.span[0] - b.span[0]);
  let out = "";
  let cursor = 0;
  for (const { span, cls } of marks) {
    out += escapeHtml(text.slice(cursor, span[0]));
    out += `<mark class="${cls}">${escapeHtml(text.slice(span[0], span[1]))}</mark>`;
    cursor = span[1];
  }
  return out + escapeHtml(text.slice(cursor));
}

export function renderResultRow(result: ExtractionResult, text: string): string {
  return (
    `<tr>` +
    `<td class="sentence">${highlightSpans(text, result.head.span, result.tail.span)}</td>` +
    `<td class="head-mention">${escapeHtml(result.head.mention)}</td>` +
    `<td class="relation">${escapeHtml(result.relation)}</td>` +
    `<td class="tail-mention">${escapeHtml(result.tail.mention)}</td>` +
    `<td class="score">${formatScore(result.score)}</td>` +
    `</tr>`
  );
}

export function renderResults(results: ExtractionResult[], text: string): string {
  if (results.length === 0) {
    return `<p class="empty">no relation found</p>`;
  }
  const ordered = [...results].sort((a, b) => b.score - a.score);
  const rows = ordered.map((r) => renderResultRow(r, text)).join("");
  return (
    `<table><thead><tr>` +
    `<th>sentence</th><th>head</th><th>relation</th><th>tail</th><th>score</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function renderBanner(state: DemoState): string {
  if (!state.error) return "";
  return `<div class="banner error">${escapeHtml(state.error)}</div>`;
}

export function renderPage(state: DemoState): string {
  const banner = renderBanner(state);
  const preview = highlightSpans(
    state.text,
    state.head ? [state.head.start, state.head.end] : null,
    state.tail ? [state.tail.start, state.tail.end] : null,
  );
  const results = state.results === null ? "" : renderResults(state.results, state.text);
  return `${banner}<p class="preview">${preview}</p>${results}`;
}
