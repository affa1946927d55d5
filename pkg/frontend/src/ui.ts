// DOM rendering. The whole view re-renders from fresh server responses after
// every action; no optimistic updates anywhere.

import {
  ClassFilter,
  ProtoCard,
  Session,
  countsFromRoster,
  countsMatch,
  filterRoster,
  overlayRect,
  sortRoster,
} from "./state.js";
import { ApiClient, ApiError } from "./api.js";

const CONTEXT_DISPLAY = 256;

export interface ViewState {
  filter: ClassFilter;
  focusId: number | null;
}

export function renderBanner(root: HTMLElement, message: string, onRetry: () => void): void {
  root.innerHTML = "";
  const banner = document.createElement("div");
  banner.className = "banner error";
  const text = document.createElement("span");
  text.textContent = `Review service unreachable: ${message}`;
  const retry = document.createElement("button");
  retry.textContent = "Retry";
  retry.addEventListener("click", onRetry);
  banner.append(text, retry);
  root.appendChild(banner);
}

function renderHeader(session: Session, roster: ProtoCard[], view: ViewState,
                      onFilter: (f: ClassFilter) => void, onExport: () => void): HTMLElement {
  const header = document.createElement("header");

  const counts = document.createElement("div");
  counts.className = "counts";
  const local = countsFromRoster(roster);
  counts.textContent =
    `${session.counts.pending} pending / ${session.counts.valid} valid / ` +
    `${session.counts.discard} discarded of ${session.num_prototypes}`;
  if (!countsMatch(local, session.counts)) {
    // should never happen: state is server-derived end to end
    counts.textContent += " (desync, reload)";
    counts.classList.add("error");
  }
  const perClass = document.createElement("div");
  perClass.className = "per-class";
  for (const [cls, c] of Object.entries(session.per_class)) {
    const chip = document.createElement("span");
    const name = cls === "1" ? "MEL" : "NV";
    chip.className = "chip";
    chip.textContent = `${name}: ${c.valid}+${c.discard}/${c.valid + c.discard + c.pending}`;
    perClass.appendChild(chip);
  }

  const filters = document.createElement("div");
  filters.className = "filters";
  const options: Array<[string, ClassFilter]> = [["All", "all"], ["NV", 0], ["MEL", 1]];
  for (const [label, value] of options) {
    const btn = document.createElement("button");
    btn.textContent = label;
    btn.className = view.filter === value ? "active" : "";
    btn.addEventListener("click", () => onFilter(value));
    filters.appendChild(btn);
  }

  const exportBtn = document.createElement("button");
  exportBtn.id = "export";
  exportBtn.textContent = session.export_ready ? "Export valid set" : "Export (partial)";
  exportBtn.addEventListener("click", onExport);

  const guidance = document.createElement("p");
  guidance.className = "guidance";
  guidance.textContent = session.guidance;

  header.append(counts, perClass, filters, exportBtn, guidance);
  return header;
}

function renderCard(card: ProtoCard, session: Session, focused: boolean,
                    onVerdict: (id: number, verdict: "valid" | "discard") => void,
                    onFocus: (id: number) => void): HTMLElement {
  const el = document.createElement("article");
  el.className = `card ${card.verdict}${focused ? " focused" : ""}`;
  el.dataset.protoId = String(card.id);
  el.tabIndex = 0;
  el.addEventListener("focus", () => onFocus(card.id));
  el.addEventListener("click", () => onFocus(card.id));

  const title = document.createElement("h3");
  title.textContent = `p${card.id}`;
  const badge = document.createElement("span");
  badge.className = `badge cls${card.class}`;
  badge.textContent = card.class_name;
  title.appendChild(badge);
  const verdict = document.createElement("span");
  verdict.className = "verdict";
  verdict.textContent = card.verdict;
  title.appendChild(verdict);

  const imgs = document.createElement("div");
  imgs.className = "images";
  const patch = document.createElement("img");
  patch.className = "patch";
  patch.src = card.patch_url;
  patch.alt = `prototype ${card.id} patch`;

  const context = document.createElement("div");
  context.className = "context";
  const ctxImg = document.createElement("img");
  ctxImg.src = `${card.context_url}?plain=1`;
  ctxImg.alt = `prototype ${card.id} in context`;
  ctxImg.width = CONTEXT_DISPLAY;
  ctxImg.height = CONTEXT_DISPLAY;
  const box = document.createElement("div");
  box.className = "bbox";
  const rect = overlayRect(card.bbox, session.image_size, CONTEXT_DISPLAY);
  box.style.left = `${rect.left}px`;
  box.style.top = `${rect.top}px`;
  box.style.width = `${rect.width}px`;
  box.style.height = `${rect.height}px`;
  context.append(ctxImg, box);
  imgs.append(patch, context);

  const actions = document.createElement("div");
  actions.className = "actions";
  for (const v of ["valid", "discard"] as const) {
    const btn = document.createElement("button");
    btn.textContent = v === "valid" ? "Valid (v)" : "Discard (d)";
    btn.className = v;
    btn.addEventListener("click", (ev) => {
      ev.stopPropagation();
      onVerdict(card.id, v);
    });
    actions.appendChild(btn);
  }

  el.append(title, imgs, actions);
  return el;
}

export function renderExportDialog(root: HTMLElement, result: {
  summary: string; warnings: string[]; nextStep: string; documentText: string; path: string;
}): void {
  const old = root.querySelector(".export-dialog");
  if (old) old.remove();
  const dialog = document.createElement("div");
  dialog.className = "export-dialog";
  const head = document.createElement("h2");
  head.textContent = `Exported: ${result.summary}`;
  dialog.appendChild(head);
  for (const warning of result.warnings) {
    const w = document.createElement("p");
    w.className = "warning";
    w.textContent = warning;
    dialog.appendChild(w);
  }
  const path = document.createElement("p");
  path.textContent = `written to ${result.path}`;
  const next = document.createElement("pre");
  next.className = "next-step";
  next.textContent = result.nextStep;
  const download = document.createElement("a");
  download.textContent = "Download valid_set.json";
  download.download = "valid_set.json";
  download.href = URL.createObjectURL(new Blob([result.documentText], { type: "application/json" }));
  dialog.append(path, next, download);
  root.appendChild(dialog);
}

export function renderExportError(root: HTMLElement, detail: string,
                                  onOverride?: () => void): void {
  const old = root.querySelector(".export-dialog");
  if (old) old.remove();
  const dialog = document.createElement("div");
  dialog.className = "export-dialog";
  const err = document.createElement("p");
  err.className = "error";
  err.textContent = detail; // server message, verbatim
  dialog.appendChild(err);
  if (onOverride) {
    const btn = document.createElement("button");
    btn.id = "export-partial";
    btn.textContent = "Export anyway (partial)";
    btn.addEventListener("click", onOverride);
    dialog.appendChild(btn);
  }
  root.appendChild(dialog);
}

export function renderApp(root: HTMLElement, session: Session, roster: ProtoCard[],
                          view: ViewState, handlers: {
                            onVerdict: (id: number, verdict: "valid" | "discard") => void;
                            onFilter: (f: ClassFilter) => void;
                            onExport: () => void;
                            onFocus: (id: number) => void;
                          }): void {
  root.innerHTML = "";
  root.appendChild(renderHeader(session, roster, view, handlers.onFilter, handlers.onExport));
  const grid = document.createElement("main");
  grid.className = "grid";
  const cards = filterRoster(sortRoster(roster), view.filter);
  for (const card of cards) {
    grid.appendChild(renderCard(card, session, card.id === view.focusId,
                                handlers.onVerdict, handlers.onFocus));
  }
  root.appendChild(grid);
}

export { ApiClient, ApiError };
