// Pure view logic. Everything here derives from server responses; the UI
// never computes authoritative state of its own.

export type Verdict = "pending" | "valid" | "discard";

export interface ProtoCard {
  id: number;
  class: number;
  class_name: string;
  verdict: Verdict;
  note: string;
  image: string;
  bbox: [number, number, number, number];
  patch_url: string;
  context_url: string;
}

export interface Counts {
  pending: number;
  valid: number;
  discard: number;
}

export interface Session {
  checkpoint: string;
  num_prototypes: number;
  image_size: number;
  counts: Counts;
  per_class: Record<string, Counts>;
  guidance: string;
  export_ready: boolean;
}

export interface ExportResult {
  path: string;
  per_class_valid: Record<string, number>;
  warnings: string[];
  document_text: string;
  next_step: string;
}

export type ClassFilter = "all" | number;

/** Pending cards first, then by id; stable for equal keys. */
export function sortRoster(cards: ProtoCard[]): ProtoCard[] {
  return [...cards].sort((a, b) => {
    const pa = a.verdict === "pending" ? 0 : 1;
    const pb = b.verdict === "pending" ? 0 : 1;
    return pa !== pb ? pa - pb : a.id - b.id;
  });
}

export function filterRoster(cards: ProtoCard[], filter: ClassFilter): ProtoCard[] {
  if (filter === "all") return cards;
  return cards.filter((c) => c.class === filter);
}

/** Recompute totals from a roster (used only to cross-check the server's). */
export function countsFromRoster(cards: ProtoCard[]): Counts {
  const counts: Counts = { pending: 0, valid: 0, discard: 0 };
  for (const c of cards) counts[c.verdict] += 1;
  return counts;
}

export function countsMatch(a: Counts, b: Counts): boolean {
  return a.pending === b.pending && a.valid === b.valid && a.discard === b.discard;
}

/**
 * Where the bbox highlight sits on a context image displayed at
 * `displaySize` pixels. Pixel-exact at 1:1 (displaySize == imageSize).
 */
export function overlayRect(
  bbox: [number, number, number, number],
  imageSize: number,
  displaySize: number,
): { left: number; top: number; width: number; height: number } {
  const s = displaySize / imageSize;
  return { left: bbox[0] * s, top: bbox[1] * s, width: bbox[2] * s, height: bbox[3] * s };
}

/** "9 MEL / 9 NV valid" style summary for the export confirmation. */
export function exportSummary(perClassValid: Record<string, number>): string {
  const names: Record<string, string> = { "0": "NV", "1": "MEL" };
  const parts = Object.keys(perClassValid)
    .sort()
    .reverse() // MEL first, matching the clinical emphasis
    .map((k) => `${perClassValid[k]} ${names[k] ?? `class ${k}`}`);
  return `${parts.join(" / ")} valid`;
}

/** The next pending card after `fromId` in roster order, wrapping around. */
export function nextPendingId(cards: ProtoCard[], fromId: number | null): number | null {
  const order = sortRoster(cards).filter((c) => c.verdict === "pending");
  if (order.length === 0) return null;
  if (fromId === null) return order[0].id;
  const later = order.find((c) => c.id > fromId);
  return (later ?? order[0]).id;
}
