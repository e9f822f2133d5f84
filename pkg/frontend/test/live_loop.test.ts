// @vitest-environment jsdom
/** End-to-end labeling loop against a live local service: draw a
 * 2-click straight line on a generated frame, refine, watch the
 * overlay and loss badge, export, and round-trip the exported knots
 * through the core parser. Budget: under 2 minutes. */

import { execFileSync, spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { Client } from "../src/api.js";
import { createWorkbench, type Workbench } from "../src/app.js";
import { COLORS } from "../src/overlay.js";
import { clickCanvas, mountPage, RecordingDraw, until } from "./_helpers.js";

const PORT = 8700 + (process.pid % 200);
const BASE = `http://127.0.0.1:${PORT}`;

const GEN_FRAME = `
import json, sys
from slenderfit.synth import GenConfig, gen_labeled_frame
from slenderfit.imgio import encode_image

frame = gen_labeled_frame(GenConfig(n_bodies=1, resolution=64), master_seed=5, index=0)
with open(sys.argv[1], "wb") as fh:
    fh.write(encode_image(frame.image))
label = frame.labels[0]
print(json.dumps({"a": [float(v) for v in label[0]],
                  "b": [float(v) for v in label[-1]]}))
`;

const ROUND_TRIP = `
import json, sys
import numpy as np
from slenderfit.geometry import KnotChain, fit_natural_cubic, sample_uniform

with open(sys.argv[1]) as fh:
    doc = json.load(fh)
assert doc["bodies"], "export carried no bodies"
for body in doc["bodies"]:
    chain = KnotChain.from_dict(body["knots"])
    poly = sample_uniform(fit_natural_cubic(chain), 100)[:, :2]
    ref = np.asarray(body["polyline"], dtype=float)
    assert poly.shape == ref.shape == (100, 2), (poly.shape, ref.shape)
    err = float(np.abs(poly - ref).max())
    assert err < 1e-6, f"parser disagrees with exported polyline by {err}"
print("round-trip ok:", len(doc["bodies"]))
`;

let workdir: string;
let server: ChildProcess | null = null;
let framePng: Uint8Array;
let endA: { x: number; y: number };
let endB: { x: number; y: number };

async function serviceUp(): Promise<void> {
  const deadline = Date.now() + 30_000;
  for (;;) {
    try {
      const res = await fetch(`${BASE}/jobs/warmup-probe`);
      if (res.status === 404) return;
    } catch {
      // not yet listening
    }
    if (Date.now() > deadline) throw new Error("service never came up");
    await new Promise((r) => setTimeout(r, 250));
  }
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "slenderfit-ui-"));
  const framePath = join(workdir, "frame.png");
  const out = execFileSync("python3", ["-c", GEN_FRAME, framePath], { encoding: "utf-8" });
  const ends = JSON.parse(out) as { a: [number, number]; b: [number, number] };
  endA = { x: ends.a[0], y: ends.a[1] };
  endB = { x: ends.b[0], y: ends.b[1] };
  framePng = new Uint8Array(readFileSync(framePath));

  server = spawn(
    "python3",
    [
      "-c",
      "import sys; from slenderfit.cli import main; sys.exit(main(sys.argv[1:]))",
      "serve",
      "--service.port",
      String(PORT),
      "--service.data_root",
      join(workdir, "sessions"),
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  await serviceUp();
});

afterAll(() => {
  server?.kill("SIGTERM");
  rmSync(workdir, { recursive: true, force: true });
});

describe("live labeling loop", () => {
  it("draws, refines, inspects, and exports against the real service", async () => {
    const started = Date.now();
    mountPage();
    const draw = new RecordingDraw();
    const wb: Workbench = createWorkbench({
      root: document,
      api: new Client(BASE),
      draw,
      pollMs: 1000, // production cadence
    });

    // -- load the generated frame ------------------------------------
    await wb.loadFrame(framePng);
    await wb.idle();
    expect(wb.store.get().sessionId).toBeTruthy();
    expect(wb.store.get().resolution).toEqual([64, 64]);

    // -- 2-click straight line between the true endpoints, 4x zoom ----
    const zoom = document.querySelector("#zoom") as HTMLSelectElement;
    zoom.value = "4";
    zoom.dispatchEvent(new Event("change"));
    const canvas = document.querySelector("#canvas") as HTMLCanvasElement;
    clickCanvas(canvas, endA.x * 4, endA.y * 4);
    clickCanvas(canvas, endB.x * 4, endB.y * 4);

    const draft = wb.store.get().bodies[0];
    expect(draft?.status).toBe("draft");
    expect(draft?.chain?.knots).toHaveLength(2);
    expect(draft?.chain?.knots[0]?.[0]).toBeCloseTo(endA.x, 6);
    expect(draft?.chain?.knots[0]?.[1]).toBeCloseTo(endA.y, 6);

    (document.querySelector("#submit") as HTMLButtonElement).click();
    await wb.idle();
    expect(wb.store.get().bodies[0]?.chain?.knots[0]).toHaveLength(3); // server echo adds w

    // -- refine with a fast-but-real schedule --------------------------
    const settings = document.querySelector("#settings") as HTMLInputElement;
    settings.value = JSON.stringify({ seeds: 1, t1: 60, t2: 150, t3: 60, master_seed: 0 });
    (document.querySelector("#refine") as HTMLButtonElement).click();
    await wb.idle();
    expect(wb.store.get().job).toBeTruthy();

    await until(() => {
      const job = wb.store.get().job;
      if (job?.state === "failed") throw new Error(`refinement failed: ${job.error}`);
      return job?.state === "done";
    }, 90_000);

    // -- refined overlay and loss badge --------------------------------
    const body = wb.store.get().bodies[0];
    expect(body?.status).toBe("refined");
    expect(body?.chain?.knots.length).toBeGreaterThanOrEqual(2);
    expect(body?.widths).toHaveLength(100);
    expect(draw.polylinesOf(COLORS.refined).length).toBeGreaterThan(0);

    const badge = document.querySelector("#badge") as HTMLElement;
    expect(badge.textContent).toMatch(/recon loss/);
    expect(badge.dataset.kind).toBe("ok"); // success hint from the server
    expect(wb.store.get().loss?.success).toBe(true);

    const recon = document.querySelector("#recon") as HTMLImageElement;
    expect(recon.src).toContain("kind=reconstruction");

    // overlay endpoint serves a PNG for the refined splines
    const sid = wb.store.get().sessionId!;
    const overlay = await wb.api.fetchOverlay(sid, "overlay");
    expect(Array.from(overlay.slice(0, 4))).toEqual([137, 80, 78, 71]);

    // -- accept, export, and round-trip through the core parser --------
    const accept = document.querySelector("#bodies li input.accept") as HTMLInputElement;
    accept.click();
    expect(wb.store.get().bodies[0]?.status).toBe("accepted");

    (document.querySelector("#export") as HTMLButtonElement).click();
    await wb.idle();
    const payload = wb.lastExport;
    expect(payload?.bodies).toHaveLength(1);
    expect(payload?.bodies[0]?.accepted).toBe(true);
    expect(payload?.bodies[0]?.polyline).toHaveLength(100);
    expect(payload?.metadata.success).toBe(true);
    expect(payload?.metadata.final_recon_loss).toBeLessThan(
      payload?.metadata.background_recon_loss ?? 0,
    );

    const exportPath = join(workdir, "export.json");
    writeFileSync(exportPath, JSON.stringify(payload));
    const verdict = execFileSync("python3", ["-c", ROUND_TRIP, exportPath], {
      encoding: "utf-8",
    });
    expect(verdict).toContain("round-trip ok: 1");

    expect(Date.now() - started).toBeLessThan(120_000);
  });
});
