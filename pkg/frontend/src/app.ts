/** Workbench wiring: DOM events in, service calls out, store in between.
 *
 * The labeling loop: load a frame, click out rough centerlines (two
 * clicks in line mode), submit, refine, watch the loss badge, accept
 * bodies, export. All refined geometry comes from the server; the
 * client never edits chains after submission.
 */

import { ApiFault, Client } from "./api.js";
import type { ChainDoc, ExportPayload, JobDoc } from "./api.js";
import { clampToImage, displayToImage } from "./geom.js";
import type { Draw2D } from "./overlay.js";
import { badge, canvasDraw, render } from "./overlay.js";
import { Store } from "./state.js";

export interface WorkbenchOptions {
  root: Document | HTMLElement;
  api: Client;
  draw?: Draw2D;
  /** Job poll period in ms; 1 Hz in production, shorter in tests. */
  pollMs?: number;
}

function must<T extends Element>(root: Document | HTMLElement, sel: string): T {
  const el = root.querySelector(sel);
  if (!el) throw new Error(`missing element ${sel}`);
  return el as T;
}

export class Workbench {
  readonly store = new Store();
  readonly api: Client;
  lastExport: ExportPayload | null = null;

  private readonly draw: Draw2D | null;
  private readonly pollMs: number;
  private readonly canvas: HTMLCanvasElement;
  private readonly badgeEl: HTMLElement;
  private readonly statusEl: HTMLElement;
  private readonly bodiesEl: HTMLElement;
  private readonly reconEl: HTMLImageElement;
  private readonly settingsEl: HTMLInputElement;
  private bitmap: ImageBitmap | null = null;
  private pollTimer: ReturnType<typeof setTimeout> | null = null;
  private ops: Promise<void> = Promise.resolve();

  constructor(opts: WorkbenchOptions) {
    const root = opts.root;
    this.api = opts.api;
    this.pollMs = opts.pollMs ?? 1000;
    this.canvas = must<HTMLCanvasElement>(root, "#canvas");
    this.badgeEl = must<HTMLElement>(root, "#badge");
    this.statusEl = must<HTMLElement>(root, "#status");
    this.bodiesEl = must<HTMLElement>(root, "#bodies");
    this.reconEl = must<HTMLImageElement>(root, "#recon");
    this.settingsEl = must<HTMLInputElement>(root, "#settings");

    this.draw = opts.draw ?? this.contextDraw();
    this.wire(root);
    this.store.subscribe(() => this.repaint());
  }

  /** Canvas 2D is unavailable under jsdom; drawing becomes a no-op there. */
  private contextDraw(): Draw2D | null {
    try {
      const ctx = this.canvas.getContext("2d");
      return ctx ? canvasDraw(ctx) : null;
    } catch {
      return null;
    }
  }

  private wire(root: Document | HTMLElement): void {
    const file = must<HTMLInputElement>(root, "#file");
    file.addEventListener("change", () => {
      const f = file.files?.[0];
      if (!f) return;
      this.enqueue(async () => {
        const bytes = new Uint8Array(await f.arrayBuffer());
        await this.loadFrame(bytes);
      });
    });

    const mode = must<HTMLSelectElement>(root, "#mode");
    const syncMode = () =>
      this.store.update({ mode: mode.value === "polyline" ? "polyline" : "line" });
    mode.addEventListener("change", syncMode);
    syncMode();

    const zoom = must<HTMLSelectElement>(root, "#zoom");
    const syncZoom = () => this.store.update({ zoom: Number(zoom.value) || 1 });
    zoom.addEventListener("change", syncZoom);
    syncZoom();

    this.canvas.addEventListener("click", (ev) => this.onCanvasClick(ev));
    this.canvas.addEventListener("dblclick", () => this.finishDraft());

    must<HTMLButtonElement>(root, "#finish").addEventListener("click", () => this.finishDraft());
    must<HTMLButtonElement>(root, "#submit").addEventListener("click", () => this.submitDrafts());
    must<HTMLButtonElement>(root, "#refine").addEventListener("click", () => this.refine());
    must<HTMLButtonElement>(root, "#export").addEventListener("click", () => this.exportLabels());
  }

  /** Serialized async op queue so tests can await idle(). */
  private enqueue(work: () => Promise<void>): Promise<void> {
    this.ops = this.ops.then(work).catch((err) => {
      const message = err instanceof ApiFault ? `${err.code}: ${err.message}` : String(err);
      this.store.update({ notice: message });
    });
    return this.ops;
  }

  idle(): Promise<void> {
    return this.ops;
  }

  // -- frame -----------------------------------------------------------

  async loadFrame(png: Uint8Array): Promise<void> {
    const info = await this.api.createSession(png);
    this.stopPolling();
    this.bitmap = await this.decodePreview(png);
    this.store.startSession(info.session_id, info.resolution);
  }

  private async decodePreview(png: Uint8Array): Promise<ImageBitmap | null> {
    if (typeof createImageBitmap !== "function") return null;
    try {
      return await createImageBitmap(new Blob([png.buffer as ArrayBuffer], { type: "image/png" }));
    } catch {
      return null;
    }
  }

  // -- drawing -----------------------------------------------------------

  private onCanvasClick(ev: MouseEvent): void {
    const state = this.store.get();
    if (!state.sessionId || !state.resolution) return;
    if (state.job && (state.job.state === "queued" || state.job.state === "running")) return;
    const rect = this.canvas.getBoundingClientRect();
    const display = { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
    const [h, w] = state.resolution;
    const p = clampToImage(displayToImage(display, state.zoom), w, h);
    this.store.addPendingKnot(p);
    if (this.store.get().mode === "line" && this.store.get().pending.length === 2) {
      this.store.finishPending();
    }
  }

  finishDraft(): boolean {
    return this.store.finishPending();
  }

  // -- server round trips ---------------------------------------------------

  submitDrafts(): Promise<void> {
    return this.enqueue(async () => {
      const state = this.store.get();
      if (!state.sessionId) return;
      if (state.pending.length === 1) {
        // one click dangling: refuse rather than drop it silently
        this.store.update({ notice: "finish the open polyline first (needs 2+ points)" });
        return;
      }
      if (state.pending.length >= 2) this.store.finishPending();
      const chains = this.store
        .get()
        .bodies.map((b) => b.chain)
        .filter((c): c is ChainDoc => c !== null);
      if (chains.length === 0) {
        this.store.update({ notice: "draw at least one polyline first" });
        return;
      }
      try {
        const echoed = await this.api.submitSplines(state.sessionId, chains);
        this.store.splinesAccepted(echoed);
      } catch (err) {
        if (err instanceof ApiFault && err.status === 422) {
          this.store.splinesRejected(err.message);
          return;
        }
        throw err;
      }
    });
  }

  refine(): Promise<void> {
    return this.enqueue(async () => {
      const state = this.store.get();
      if (!state.sessionId) return;
      let settings: Record<string, unknown> | undefined;
      const raw = this.settingsEl.value.trim();
      if (raw) settings = JSON.parse(raw) as Record<string, unknown>;
      const jobId = await this.api.startRefine(state.sessionId, settings);
      this.store.jobStarted(jobId);
      this.schedulePoll(jobId);
    });
  }

  private schedulePoll(jobId: string): void {
    this.stopPolling();
    this.pollTimer = setTimeout(() => {
      void this.pollOnce(jobId).then((again) => {
        if (again) this.schedulePoll(jobId);
      });
    }, this.pollMs);
  }

  private async pollOnce(jobId: string): Promise<boolean> {
    let job: JobDoc;
    try {
      job = await this.api.pollJob(jobId);
    } catch {
      return true; // transient poll failure: keep trying
    }
    const view = {
      id: job.id,
      state: job.state,
      progress: job.progress,
      error: job.error,
    };
    if (job.state === "done" && job.result) {
      const r = job.result;
      this.store.jobDone(view, r.chains, r.width_samples, {
        finalRecon: r.final_recon_loss,
        backgroundRecon: r.background_recon_loss,
        success: r.success,
      });
      this.showReconstruction();
      return false;
    }
    if (job.state === "failed") {
      this.store.jobFailed(view);
      return false;
    }
    this.store.jobPolled(view);
    return true;
  }

  private showReconstruction(): void {
    const sid = this.store.get().sessionId;
    if (!sid) return;
    this.reconEl.src = this.api.overlayUrl(sid, "reconstruction") + `&t=${Date.now()}`;
  }

  stopPolling(): void {
    if (this.pollTimer !== null) {
      clearTimeout(this.pollTimer);
      this.pollTimer = null;
    }
  }

  toggleAccept(index: number): void {
    const body = this.store.get().bodies[index];
    if (!body) return;
    if (body.status === "refined") {
      this.store.acceptedFlags(
        this.store.get().bodies.map((b, i) => (i === index ? true : b.status === "accepted")),
      );
    } else if (body.status === "accepted") {
      this.store.acceptedFlags(
        this.store.get().bodies.map((b, i) => (i === index ? false : b.status === "accepted")),
      );
    }
  }

  exportLabels(): Promise<void> {
    return this.enqueue(async () => {
      const state = this.store.get();
      if (!state.sessionId) return;
      const payload = await this.api.exportLabels(state.sessionId, this.store.acceptedIndices());
      this.lastExport = payload;
      this.store.acceptedFlags(payload.bodies.map((b) => b.accepted));
      this.download(payload);
    });
  }

  private download(payload: ExportPayload): void {
    if (typeof URL.createObjectURL !== "function") return; // test DOM
    const blob = new Blob([JSON.stringify(payload, null, 2)], { type: "application/json" });
    const url = URL.createObjectURL(blob);
    const a = document.createElement("a");
    a.href = url;
    a.download = `labels_${payload.metadata.session_id}.json`;
    a.click();
    URL.revokeObjectURL(url);
  }

  // -- view -----------------------------------------------------------

  private repaint(): void {
    const state = this.store.get();
    if (this.draw) render(state, this.draw, this.bitmap);

    const b = badge(state);
    this.badgeEl.textContent = b.text;
    this.badgeEl.dataset.kind = b.kind;

    const parts: string[] = [];
    if (state.sessionId && state.resolution) {
      parts.push(`session ${state.sessionId} (${state.resolution[1]}x${state.resolution[0]})`);
    } else {
      parts.push("no frame loaded");
    }
    if (state.pending.length > 0) parts.push(`${state.pending.length} point(s) pending`);
    if (state.notice) parts.push(state.notice);
    this.statusEl.textContent = parts.join(" · ");

    this.renderBodyList();
  }

  private renderBodyList(): void {
    this.bodiesEl.textContent = "";
    const doc = this.bodiesEl.ownerDocument;
    this.store.get().bodies.forEach((body, i) => {
      const row = doc.createElement("li");
      row.dataset.status = body.status;
      const label = doc.createElement("span");
      const knots = body.chain ? body.chain.knots.length : 0;
      label.textContent = `body ${i}: ${body.status}, ${knots} knots`;
      if (body.fault) label.textContent += `: ${body.fault}`;
      row.appendChild(label);

      const accept = doc.createElement("input");
      accept.type = "checkbox";
      accept.className = "accept";
      accept.checked = body.status === "accepted";
      accept.disabled = body.status === "draft" || body.status === "refining";
      accept.addEventListener("change", () => this.toggleAccept(i));
      row.appendChild(accept);

      const del = doc.createElement("button");
      del.textContent = "delete";
      del.className = "delete";
      del.disabled = body.status === "accepted" || body.status === "refining";
      del.addEventListener("click", () => this.store.removeBody(i));
      row.appendChild(del);

      this.bodiesEl.appendChild(row);
    });
  }
}

export function createWorkbench(opts: WorkbenchOptions): Workbench {
  return new Workbench(opts);
}
