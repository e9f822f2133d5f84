// @vitest-environment jsdom
/** Full labeling loop against the mocked service fixture (offline). */

import { beforeEach, describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import { createWorkbench, Workbench } from "../src/app.js";
import { COLORS } from "../src/overlay.js";
import { clickCanvas, FakeService, mountPage, RecordingDraw, until } from "./_helpers.js";

const PNG_STUB = new Uint8Array([137, 80, 78, 71, 13, 10, 26, 10]);

interface Rig {
  wb: Workbench;
  draw: RecordingDraw;
  service: FakeService;
  canvas: HTMLCanvasElement;
}

function rig(): Rig {
  mountPage();
  const service = new FakeService();
  const draw = new RecordingDraw();
  const wb = createWorkbench({
    root: document,
    api: new Client("http://fake.test", service.fetch),
    draw,
    pollMs: 5,
  });
  const canvas = document.querySelector("#canvas") as HTMLCanvasElement;
  return { wb, draw, service, canvas };
}

function setZoom(value: string): void {
  const zoom = document.querySelector("#zoom") as HTMLSelectElement;
  zoom.value = value;
  zoom.dispatchEvent(new Event("change"));
}

async function loadFrame(wb: Workbench): Promise<void> {
  await wb.loadFrame(PNG_STUB);
  await wb.idle();
}

describe("drawing", () => {
  let r: Rig;
  beforeEach(() => {
    r = rig();
  });

  it("two clicks in line mode place a straight draft in image coords", async () => {
    await loadFrame(r.wb);
    setZoom("2");
    clickCanvas(r.canvas, 20, 8); // display (20, 8) at 2x -> image (10, 4)
    clickCanvas(r.canvas, 60, 40);
    const body = r.wb.store.get().bodies[0];
    expect(body?.status).toBe("draft");
    expect(body?.chain?.knots).toEqual([
      [10, 4],
      [30, 20],
    ]);
  });

  it("polyline mode needs an explicit finish", async () => {
    await loadFrame(r.wb);
    setZoom("1");
    const mode = document.querySelector("#mode") as HTMLSelectElement;
    mode.value = "polyline";
    mode.dispatchEvent(new Event("change"));

    clickCanvas(r.canvas, 5, 5);
    clickCanvas(r.canvas, 20, 10);
    clickCanvas(r.canvas, 40, 30);
    expect(r.wb.store.get().bodies).toHaveLength(0);
    expect(r.wb.store.get().pending).toHaveLength(3);

    (document.querySelector("#finish") as HTMLButtonElement).click();
    expect(r.wb.store.get().bodies).toHaveLength(1);
    expect(r.wb.store.get().bodies[0]?.chain?.knots).toHaveLength(3);
  });

  it("a single dangling click blocks submission with a notice", async () => {
    await loadFrame(r.wb);
    setZoom("1");
    clickCanvas(r.canvas, 5, 5);
    (document.querySelector("#submit") as HTMLButtonElement).click();
    await r.wb.idle();
    expect(r.wb.store.get().notice).toMatch(/2\+ points/);
    expect(r.service.requests.filter((q) => q.includes("/splines"))).toHaveLength(0);
  });

  it("clicks outside the image clamp to the frame", async () => {
    await loadFrame(r.wb);
    setZoom("1");
    clickCanvas(r.canvas, 500, 500);
    expect(r.wb.store.get().pending[0]).toEqual({ x: 63, y: 63 });
  });
});

describe("submission", () => {
  let r: Rig;
  beforeEach(async () => {
    r = rig();
    await loadFrame(r.wb);
    setZoom("1");
  });

  it("replaces drafts with the server echo", async () => {
    clickCanvas(r.canvas, 10, 10);
    clickCanvas(r.canvas, 50, 40);
    (document.querySelector("#submit") as HTMLButtonElement).click();
    await r.wb.idle();
    const body = r.wb.store.get().bodies[0];
    expect(body?.chain?.knots[0]).toEqual([10, 10, 1]); // w filled in by server
  });

  it("surfaces a 422 inline and keeps the draft for redraw", async () => {
    // the mocked service rejects negative coordinates
    r.wb.store.addPendingKnot({ x: -5, y: 10 });
    r.wb.store.addPendingKnot({ x: 20, y: 20 });
    r.wb.store.finishPending();
    (document.querySelector("#submit") as HTMLButtonElement).click();
    await r.wb.idle();
    const body = r.wb.store.get().bodies[0];
    expect(body?.status).toBe("draft");
    expect(body?.fault).toMatch(/out of bounds/);
    const row = document.querySelector("#bodies li span") as HTMLElement;
    expect(row.textContent).toMatch(/out of bounds/);
  });
});

describe("refinement loop", () => {
  let r: Rig;
  beforeEach(async () => {
    r = rig();
    await loadFrame(r.wb);
    setZoom("1");
    clickCanvas(r.canvas, 10, 10);
    clickCanvas(r.canvas, 50, 40);
    (document.querySelector("#submit") as HTMLButtonElement).click();
    await r.wb.idle();
  });

  async function refineToDone(): Promise<void> {
    (document.querySelector("#refine") as HTMLButtonElement).click();
    await r.wb.idle();
    await until(() => r.wb.store.get().job?.state === "done");
  }

  it("polls through the phases and lands on refined geometry", async () => {
    const phases: number[] = [];
    r.wb.store.subscribe((s) => {
      if (s.job) phases.push(s.job.progress.phase);
    });
    await refineToDone();
    // progress advanced through phases 1 -> 3 before finishing
    expect(phases).toContain(1);
    expect(phases).toContain(2);
    expect(phases).toContain(3);

    const body = r.wb.store.get().bodies[0];
    expect(body?.status).toBe("refined");
    expect(body?.chain?.knots[0]?.[0]).toBeCloseTo(10.4, 9); // server truth, not client geometry
  });

  it("draws refined bodies in a distinct color from drafts", async () => {
    r.draw.reset();
    await refineToDone();
    expect(r.draw.polylinesOf(COLORS.refined).length).toBeGreaterThan(0);
    const last = r.draw.calls.filter((c) => c.op === "polyline").at(-1);
    expect(last?.color).toBe(COLORS.refined);
    expect(last?.dashed).toBe(false);
  });

  it("shows the loss badge with the success hint", async () => {
    await refineToDone();
    const badge = document.querySelector("#badge") as HTMLElement;
    expect(badge.textContent).toMatch(/recon loss 2\.500e-4/);
    expect(badge.textContent).toMatch(/success/);
    expect(badge.dataset.kind).toBe("ok");
  });

  it("points the reconstruction panel at the overlay endpoint", async () => {
    await refineToDone();
    const recon = document.querySelector("#recon") as HTMLImageElement;
    expect(recon.src).toContain("/sessions/fake1/overlay?kind=reconstruction");
  });

  it("accept + export round-trips flags through the server", async () => {
    await refineToDone();
    const accept = document.querySelector("#bodies li input.accept") as HTMLInputElement;
    expect(accept.disabled).toBe(false);
    accept.click();
    expect(r.wb.store.get().bodies[0]?.status).toBe("accepted");

    const del = document.querySelector("#bodies li button.delete") as HTMLButtonElement;
    expect(del.disabled).toBe(true); // accepted bodies are locked

    (document.querySelector("#export") as HTMLButtonElement).click();
    await r.wb.idle();
    expect(r.wb.lastExport?.bodies[0]?.accepted).toBe(true);
    expect(r.service.requests.at(-1)).toContain("export?accepted=0");

    // re-export is idempotent
    (document.querySelector("#export") as HTMLButtonElement).click();
    await r.wb.idle();
    expect(r.wb.lastExport?.bodies[0]?.accepted).toBe(true);
  });
});
