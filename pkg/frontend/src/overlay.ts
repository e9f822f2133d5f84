/** Canvas overlay drawing, behind a small interface so tests can record
 * draw calls without a real 2D context. */

import type { Pt } from "./geom.js";
import { imageToDisplay, knotsToPts } from "./geom.js";
import type { WorkbenchState } from "./state.js";

export interface Draw2D {
  clear(width: number, height: number): void;
  image(bitmap: ImageBitmap | null, width: number, height: number): void;
  polyline(pts: Pt[], color: string, width: number, dashed: boolean): void;
  disc(p: Pt, radius: number, color: string): void;
}

export const COLORS = {
  draft: "#f0b429",
  refining: "#9aa5b1",
  refined: "#2f80ed",
  accepted: "#27ae60",
  pending: "#e8590c",
} as const;

export function render(state: WorkbenchState, draw: Draw2D, bitmap: ImageBitmap | null): void {
  if (!state.resolution) return;
  const [h, w] = state.resolution;
  const dw = w * state.zoom;
  const dh = h * state.zoom;
  draw.clear(dw, dh);
  draw.image(bitmap, dw, dh);

  for (const body of state.bodies) {
    if (!body.chain) continue;
    const pts = knotsToPts(body.chain.knots).map((p) => imageToDisplay(p, state.zoom));
    const color = COLORS[body.status];
    draw.polyline(pts, color, body.status === "accepted" ? 3 : 2, body.status === "draft");
    for (const p of pts) draw.disc(p, 3, color);
  }

  const pendingPts = state.pending.map((p) => imageToDisplay(p, state.zoom));
  if (pendingPts.length >= 2) {
    draw.polyline(pendingPts, COLORS.pending, 1, true);
  }
  for (const p of pendingPts) draw.disc(p, 3, COLORS.pending);
}

export interface BadgeView {
  text: string;
  kind: "idle" | "busy" | "ok" | "warn" | "error";
}

/** Loss badge content: reconstruction loss plus the server success hint. */
export function badge(state: WorkbenchState): BadgeView {
  if (state.job && (state.job.state === "queued" || state.job.state === "running")) {
    const { phase, step } = state.job.progress;
    return { text: `refining… phase ${phase} step ${step}`, kind: "busy" };
  }
  if (state.job && state.job.state === "failed") {
    return { text: `refinement failed: ${state.job.error ?? "unknown"}`, kind: "error" };
  }
  if (state.loss) {
    const ratio = state.loss.finalRecon / Math.max(state.loss.backgroundRecon, 1e-300);
    const text =
      `recon loss ${state.loss.finalRecon.toExponential(3)} ` +
      `(${(ratio * 100).toFixed(1)}% of background-only)`;
    return state.loss.success
      ? { text: `${text} · success`, kind: "ok" }
      : { text: `${text} · check result`, kind: "warn" };
  }
  return { text: "no refinement yet", kind: "idle" };
}

/** Adapter from the Draw2D interface onto a real canvas context. */
export function canvasDraw(ctx: CanvasRenderingContext2D): Draw2D {
  return {
    clear(width, height) {
      ctx.canvas.width = width;
      ctx.canvas.height = height;
      ctx.clearRect(0, 0, width, height);
    },
    image(bitmap, width, height) {
      if (bitmap) {
        ctx.imageSmoothingEnabled = false;
        ctx.drawImage(bitmap, 0, 0, width, height);
      } else {
        ctx.fillStyle = "#111";
        ctx.fillRect(0, 0, width, height);
      }
    },
    polyline(pts, color, width, dashed) {
      if (pts.length < 2) return;
      ctx.strokeStyle = color;
      ctx.lineWidth = width;
      ctx.setLineDash(dashed ? [6, 4] : []);
      ctx.beginPath();
      ctx.moveTo(pts[0]!.x, pts[0]!.y);
      for (let i = 1; i < pts.length; i++) ctx.lineTo(pts[i]!.x, pts[i]!.y);
      ctx.stroke();
      ctx.setLineDash([]);
    },
    disc(p, radius, color) {
      ctx.fillStyle = color;
      ctx.beginPath();
      ctx.arc(p.x, p.y, radius, 0, Math.PI * 2);
      ctx.fill();
    },
  };
}
