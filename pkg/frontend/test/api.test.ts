import { describe, expect, it, vi } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { makeFakeServer } from "./fixtures.js";

describe("api client", () => {
  it("talks to the documented endpoints only", async () => {
    const calls: Array<[string, string]> = [];
    const { fetchImpl } = makeFakeServer();
    const spy: typeof fetch = async (input, init) => {
      calls.push([String(input), init?.method ?? "GET"]);
      return fetchImpl(input, init);
    };
    const api = new ApiClient("", spy);
    await api.getSession();
    await api.getPrototypes();
    await api.postVerdict(3, "valid", "note");
    await api.postExport(true);
    expect(calls).toEqual([
      ["/api/session", "GET"],
      ["/api/prototypes", "GET"],
      ["/api/prototypes/3/verdict", "POST"],
      ["/api/export", "POST"],
    ]);
  });

  it("sends verdict payloads the server understands", async () => {
    const bodies: unknown[] = [];
    const api = new ApiClient("", (async (_url: RequestInfo | URL, init?: RequestInit) => {
      bodies.push(JSON.parse(String(init?.body)));
      return Response.json({ ok: true });
    }) as typeof fetch);
    await api.postVerdict(7, "discard");
    expect(bodies[0]).toEqual({ verdict: "discard", note: "" });
  });

  it("surfaces server error detail verbatim", async () => {
    const api = new ApiClient("", (async () =>
      new Response(JSON.stringify({ detail: "3 prototypes still pending; finish the review" }),
                   { status: 409 })) as typeof fetch);
    const err = await api.postExport(false).catch((e) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(409);
    expect(err.detail).toBe("3 prototypes still pending; finish the review");
  });

  it("keeps non-json error bodies as-is", async () => {
    const api = new ApiClient("", (async () =>
      new Response("plain text failure", { status: 500 })) as typeof fetch);
    const err = await api.getSession().catch((e) => e);
    expect(err.detail).toBe("plain text failure");
  });
});
