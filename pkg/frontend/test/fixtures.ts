import type { Counts, ProtoCard, Session } from "../src/state.js";

export function makeRoster(): ProtoCard[] {
  const cards: ProtoCard[] = [];
  for (let j = 0; j < 18; j++) {
    const cls = j < 9 ? 0 : 1;
    cards.push({
      id: j,
      class: cls,
      class_name: cls === 1 ? "MEL" : "NV",
      verdict: "pending",
      note: "",
      image: `images/${cls === 1 ? "mel" : "nv"}_${String(j % 9).padStart(3, "0")}.png`,
      bbox: [32 * (j % 7), 32 * (j % 5), 32, 32],
      patch_url: `/api/prototypes/${j}/patch.png`,
      context_url: `/api/prototypes/${j}/context.png`,
    });
  }
  return cards;
}

export function countsOf(cards: ProtoCard[]): Counts {
  const counts: Counts = { pending: 0, valid: 0, discard: 0 };
  for (const c of cards) counts[c.verdict] += 1;
  return counts;
}

export function makeSession(cards: ProtoCard[]): Session {
  const perClass: Record<string, Counts> = {};
  for (const cls of [0, 1]) {
    perClass[String(cls)] = countsOf(cards.filter((c) => c.class === cls));
  }
  const counts = countsOf(cards);
  return {
    checkpoint: "cafe0123beef",
    num_prototypes: cards.length,
    image_size: 224,
    counts,
    per_class: perClass,
    guidance: "Keep lesion patches, discard artifact patches.",
    export_ready: counts.pending === 0,
  };
}

/** Minimal in-memory review server speaking the same JSON API. */
export function makeFakeServer(cards: ProtoCard[] = makeRoster()) {
  const state = { cards, failNext: false, exportCalls: [] as unknown[] };

  const fetchImpl = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = String(input);
    if (state.failNext) {
      state.failNext = false;
      return new Response(JSON.stringify({ detail: "injected failure" }), { status: 500 });
    }
    if (url.endsWith("/api/session")) {
      return Response.json(makeSession(state.cards));
    }
    if (url.endsWith("/api/prototypes")) {
      return Response.json(state.cards);
    }
    const verdictMatch = url.match(/\/api\/prototypes\/(\d+)\/verdict$/);
    if (verdictMatch && init?.method === "POST") {
      const id = Number(verdictMatch[1]);
      const card = state.cards.find((c) => c.id === id);
      if (!card) {
        return new Response(JSON.stringify({ detail: `unknown prototype id ${id}` }), { status: 404 });
      }
      const body = JSON.parse(String(init.body));
      card.verdict = body.verdict;
      card.note = body.note ?? "";
      return Response.json({ ok: true });
    }
    if (url.endsWith("/api/export") && init?.method === "POST") {
      const body = JSON.parse(String(init.body));
      state.exportCalls.push(body);
      const pending = state.cards.filter((c) => c.verdict === "pending").length;
      if (pending > 0 && !body.allow_partial) {
        return new Response(
          JSON.stringify({ detail: `${pending} prototypes still pending; finish the review` }),
          { status: 409 },
        );
      }
      const valid = state.cards.filter((c) => c.verdict === "valid");
      const perClass: Record<string, number> = { "0": 0, "1": 0 };
      for (const c of valid) perClass[String(c.class)] += 1;
      const doc = JSON.stringify({
        version: 1,
        entries: valid.map((c) => ({ class: c.class, image: c.image, bbox: c.bbox, note: c.note })),
      });
      const warnings = Object.entries(perClass)
        .filter(([, n]) => n === 0)
        .map(([cls]) => `class ${cls}: no valid prototypes exported`);
      return Response.json({
        path: "/tmp/run/valid_set.json",
        per_class_valid: perClass,
        warnings,
        document_text: doc,
        next_step: "protopart train --mode lp+lr --valid-set /tmp/run/valid_set.json",
      });
    }
    return new Response(JSON.stringify({ detail: "not found" }), { status: 404 });
  };

  return { state, fetchImpl: fetchImpl as typeof fetch };
}
