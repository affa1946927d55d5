// Thin typed client over the review service JSON API. All server errors are
// surfaced verbatim through ApiError.detail.

import type { ExportResult, ProtoCard, Session, Verdict } from "./state.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public detail: string,
  ) {
    super(`HTTP ${status}: ${detail}`);
  }
}

type Fetch = typeof fetch;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: Fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.baseUrl + path, init);
    const body = await resp.text();
    if (!resp.ok) {
      let detail = body;
      try {
        const doc = JSON.parse(body);
        if (typeof doc.detail === "string") detail = doc.detail;
      } catch {
        // keep raw body
      }
      throw new ApiError(resp.status, detail);
    }
    return JSON.parse(body) as T;
  }

  getSession(): Promise<Session> {
    return this.request<Session>("/api/session");
  }

  getPrototypes(): Promise<ProtoCard[]> {
    return this.request<ProtoCard[]>("/api/prototypes");
  }

  postVerdict(id: number, verdict: Exclude<Verdict, "pending">, note = ""): Promise<unknown> {
    return this.request(`/api/prototypes/${id}/verdict`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ verdict, note }),
    });
  }

  postExport(allowPartial = false, path?: string): Promise<ExportResult> {
    return this.request<ExportResult>("/api/export", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ allow_partial: allowPartial, ...(path ? { path } : {}) }),
    });
  }
}
