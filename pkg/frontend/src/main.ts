// Bootstrap: fetch server state, render, and re-fetch after every action.

import { ApiClient, ApiError } from "./api.js";
import { ClassFilter, Session, ProtoCard, exportSummary, nextPendingId } from "./state.js";
import { renderApp, renderBanner, renderExportDialog, renderExportError } from "./ui.js";

export class App {
  private view = { filter: "all" as ClassFilter, focusId: null as number | null };
  private session: Session | null = null;
  private roster: ProtoCard[] = [];

  constructor(
    private root: HTMLElement,
    private api: ApiClient = new ApiClient(),
  ) {}

  async refresh(): Promise<void> {
    try {
      this.session = await this.api.getSession();
      this.roster = await this.api.getPrototypes();
    } catch (err) {
      renderBanner(this.root, err instanceof Error ? err.message : String(err),
                   () => void this.refresh());
      return;
    }
    this.render();
  }

  private render(): void {
    if (!this.session) return;
    renderApp(this.root, this.session, this.roster, this.view, {
      onVerdict: (id, verdict) => void this.verdict(id, verdict),
      onFilter: (f) => {
        this.view.filter = f;
        this.render();
      },
      onExport: () => void this.exportValidSet(),
      onFocus: (id) => {
        this.view.focusId = id;
      },
    });
  }

  /** Card state changes only after the server acknowledged the verdict. */
  private async verdict(id: number, verdict: "valid" | "discard"): Promise<void> {
    try {
      await this.api.postVerdict(id, verdict);
    } catch (err) {
      renderBanner(this.root, err instanceof Error ? err.message : String(err),
                   () => void this.refresh());
      return;
    }
    this.view.focusId = nextPendingId(this.roster, id);
    await this.refresh();
  }

  private async exportValidSet(allowPartial = false): Promise<void> {
    if (!this.session) return;
    try {
      const result = await this.api.postExport(allowPartial);
      renderExportDialog(this.root, {
        summary: exportSummary(result.per_class_valid),
        warnings: result.warnings,
        nextStep: result.next_step,
        documentText: result.document_text,
        path: result.path,
      });
    } catch (err) {
      if (err instanceof ApiError) {
        // pending prototypes: show the server's refusal and an explicit override
        const override = err.status === 409 ? () => void this.exportValidSet(true) : undefined;
        renderExportError(this.root, err.detail, override);
      } else {
        renderBanner(this.root, String(err), () => void this.refresh());
      }
    }
  }

  handleKey(key: string): void {
    if (this.view.focusId === null) {
      this.view.focusId = nextPendingId(this.roster, null);
      this.render();
      return;
    }
    if (key === "v") void this.verdict(this.view.focusId, "valid");
    else if (key === "d") void this.verdict(this.view.focusId, "discard");
    else if (key === "s") {
      this.view.focusId = nextPendingId(this.roster, this.view.focusId);
      this.render();
    }
  }
}

export function start(root: HTMLElement): App {
  const app = new App(root);
  document.addEventListener("keydown", (ev) => {
    const target = ev.target as HTMLElement | null;
    if (target && (target.tagName === "INPUT" || target.tagName === "TEXTAREA")) return;
    if (["v", "d", "s"].includes(ev.key)) app.handleKey(ev.key);
  });
  void app.refresh();
  return app;
}

declare global {
  interface Window {
    protopartStart?: typeof start;
  }
}

if (typeof window !== "undefined") {
  window.protopartStart = start;
  const root = document.getElementById("app");
  if (root) start(root);
}
