// @vitest-environment happy-dom
import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { App } from "../src/main.js";
import { makeFakeServer } from "./fixtures.js";

if (typeof URL.createObjectURL !== "function") {
  (URL as unknown as { createObjectURL: () => string }).createObjectURL = () => "blob:stub";
}

function makeApp(server = makeFakeServer()) {
  const root = document.createElement("div");
  document.body.appendChild(root);
  const app = new App(root, new ApiClient("", server.fetchImpl));
  return { root, app, server };
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("roster rendering", () => {
  it("shows 18 cards with server-matching counters", async () => {
    const { root, app } = makeApp();
    await app.refresh();
    expect(root.querySelectorAll("article.card")).toHaveLength(18);
    expect(root.querySelector(".counts")!.textContent).toContain("18 pending / 0 valid / 0 discarded of 18");
    expect(root.querySelector(".counts")!.classList.contains("error")).toBe(false);
  });

  it("class filter shows 9 MEL cards", async () => {
    const { root, app } = makeApp();
    await app.refresh();
    const filterButtons = [...root.querySelectorAll(".filters button")];
    (filterButtons.find((b) => b.textContent === "MEL") as HTMLButtonElement).click();
    expect(root.querySelectorAll("article.card")).toHaveLength(9);
    expect([...root.querySelectorAll(".badge")].every((b) => b.textContent === "MEL")).toBe(true);
  });

  it("bbox overlay matches the API bbox", async () => {
    const { root, app } = makeApp();
    await app.refresh();
    const card = root.querySelector('article.card[data-proto-id="3"]')!;
    const box = card.querySelector(".bbox") as HTMLElement;
    // bbox of p3 is [96, 96, 32, 32] in a 224px image shown at 256px
    const scale = 256 / 224;
    expect(parseFloat(box.style.left)).toBeCloseTo(96 * scale, 4);
    expect(parseFloat(box.style.top)).toBeCloseTo(96 * scale, 4);
    expect(parseFloat(box.style.width)).toBeCloseTo(32 * scale, 4);
    expect(parseFloat(box.style.height)).toBeCloseTo(32 * scale, 4);
  });
});

describe("server-authoritative verdicts", () => {
  it("updates a card only after the server acknowledges", async () => {
    const { root, app, server } = makeApp();
    await app.refresh();
    server.state.failNext = true;
    const card = root.querySelector('article.card[data-proto-id="0"]')!;
    (card.querySelector("button.valid") as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    // server rejected: nothing marked valid, failure banner visible
    expect(server.state.cards[0].verdict).toBe("pending");
    expect(document.body.textContent).toContain("injected failure");

    await app.refresh();
    const again = root.querySelector('article.card[data-proto-id="0"]')!;
    (again.querySelector("button.valid") as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    expect(server.state.cards[0].verdict).toBe("valid");
    expect(root.querySelector('article.card[data-proto-id="0"]')!.classList.contains("valid")).toBe(true);
    expect(root.querySelector(".counts")!.textContent).toContain("17 pending / 1 valid");
  });

  it("reload mid-session reproduces the same state", async () => {
    const { root, app, server } = makeApp();
    await app.refresh();
    (root.querySelector('article.card[data-proto-id="2"] button.discard') as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    const before = root.querySelector(".counts")!.textContent;

    // a fresh app over the same server state = a browser reload
    const second = makeApp(server);
    await second.app.refresh();
    expect(second.root.querySelector(".counts")!.textContent).toBe(before);
    expect(second.root.querySelector('article.card[data-proto-id="2"]')!.classList.contains("discard")).toBe(true);
  });
});

describe("export flow", () => {
  it("summarizes per-class valid counts and shows the retrain command", async () => {
    const { root, app, server } = makeApp();
    for (const c of server.state.cards) c.verdict = c.class === 1 ? "valid" : "discard";
    await app.refresh();
    (root.querySelector("#export") as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    const dialog = root.querySelector(".export-dialog")!;
    expect(dialog.textContent).toContain("9 MEL / 0 NV valid");
    expect(dialog.querySelector(".warning")!.textContent).toContain("class 0");
    expect(dialog.querySelector(".next-step")!.textContent).toContain("--mode lp+lr");
    expect(server.state.exportCalls).toHaveLength(1);
  });

  it("surfaces an export rejection verbatim and offers an explicit override", async () => {
    const { root, app, server } = makeApp();
    server.state.cards[0].verdict = "valid"; // 17 still pending
    await app.refresh();
    (root.querySelector("#export") as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    // the server's 409 detail appears verbatim; nothing was exported
    expect(root.querySelector(".export-dialog .error")!.textContent).toContain("still pending");
    expect(server.state.exportCalls).toHaveLength(1);

    // the explicit override retries with allow_partial
    (root.querySelector("#export-partial") as HTMLButtonElement).click();
    await new Promise((r) => setTimeout(r, 10));
    expect(server.state.exportCalls).toHaveLength(2);
    expect((server.state.exportCalls[1] as { allow_partial: boolean }).allow_partial).toBe(true);
    expect(root.querySelector(".export-dialog")!.textContent).toContain("0 MEL / 1 NV valid");
  });

  it("shows a blocking banner with retry when the service is unreachable", async () => {
    const root = document.createElement("div");
    document.body.appendChild(root);
    const api = new ApiClient("", (async () => {
      throw new Error("connection refused");
    }) as typeof fetch);
    const app = new App(root, api);
    await app.refresh();
    expect(root.querySelector(".banner.error")!.textContent).toContain("connection refused");
    expect(root.querySelector(".banner.error button")!.textContent).toBe("Retry");
  });
});
