/** Client-side state for the labeling loop.
 *
 * Geometry truth always comes from server responses: submitted drafts
 * hold the server echo, refined bodies hold the chains from the job
 * result. The client only ever originates raw clicks.
 */

import type { ChainDoc, JobProgress, JobState } from "./api.js";
import type { Pt } from "./geom.js";

export type BodyStatus = "draft" | "refining" | "refined" | "accepted";

export interface Body {
  status: BodyStatus;
  /** Server-echoed chain; null until the first splines submission. */
  chain: ChainDoc | null;
  /** Per-arc-length widths from the last job result, px. */
  widths: number[];
  /** Inline server complaint attached to this polyline, if any. */
  fault: string | null;
}

export interface LossBadge {
  finalRecon: number;
  backgroundRecon: number;
  success: boolean;
}

export interface JobView {
  id: string;
  state: JobState;
  progress: JobProgress;
  error: string | null;
}

export type DrawMode = "polyline" | "line";

export interface WorkbenchState {
  sessionId: string | null;
  /** [height, width] px. */
  resolution: [number, number] | null;
  mode: DrawMode;
  zoom: number;
  /** Knots of the polyline currently being clicked out, image coords. */
  pending: Pt[];
  bodies: Body[];
  job: JobView | null;
  loss: LossBadge | null;
  notice: string | null;
}

export function initialState(): WorkbenchState {
  return {
    sessionId: null,
    resolution: null,
    mode: "line",
    zoom: 1,
    pending: [],
    bodies: [],
    job: null,
    loss: null,
    notice: null,
  };
}

export type Listener = (state: WorkbenchState) => void;

export class Store {
  private state: WorkbenchState = initialState();
  private listeners: Listener[] = [];

  get(): WorkbenchState {
    return this.state;
  }

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  update(patch: Partial<WorkbenchState>): void {
    this.state = { ...this.state, ...patch };
    for (const fn of this.listeners) fn(this.state);
  }

  // -- drawing -----------------------------------------------------------

  startSession(sessionId: string, resolution: [number, number]): void {
    this.update({
      ...initialState(),
      mode: this.state.mode,
      zoom: this.state.zoom,
      sessionId,
      resolution,
    });
  }

  addPendingKnot(p: Pt): void {
    if (!this.state.sessionId) return;
    this.update({ pending: [...this.state.pending, p], notice: null });
  }

  /** A finished draft needs at least 2 knots; fewer is a no-op guard. */
  canFinishPending(): boolean {
    return this.state.pending.length >= 2;
  }

  finishPending(): boolean {
    if (!this.canFinishPending()) return false;
    const knots = this.state.pending.map((p) => [p.x, p.y]);
    this.update({
      pending: [],
      bodies: [
        ...this.state.bodies,
        { status: "draft", chain: { knots }, widths: [], fault: null },
      ],
    });
    return true;
  }

  discardPending(): void {
    this.update({ pending: [] });
  }

  /** Accepted bodies are locked; deleting one is refused. */
  removeBody(index: number): boolean {
    const body = this.state.bodies[index];
    if (!body || body.status === "accepted" || body.status === "refining") return false;
    this.update({ bodies: this.state.bodies.filter((_, i) => i !== index) });
    return true;
  }

  // -- server mirrors ------------------------------------------------------

  /** Replace draft geometry with the server echo after a submission. */
  splinesAccepted(chains: ChainDoc[]): void {
    this.update({
      bodies: chains.map((chain) => ({
        status: "draft",
        chain,
        widths: [],
        fault: null,
      })),
      loss: null,
    });
  }

  splinesRejected(message: string): void {
    // drafts stay put for redraw; the complaint lands on the last body
    const bodies = this.state.bodies.map((b, i) =>
      i === this.state.bodies.length - 1 ? { ...b, fault: message } : b,
    );
    this.update({ bodies, notice: message });
  }

  jobStarted(id: string): void {
    this.update({
      job: { id, state: "queued", progress: { phase: 0, step: 0 }, error: null },
      bodies: this.state.bodies.map((b) => ({ ...b, status: "refining" as BodyStatus })),
      loss: null,
    });
  }

  jobPolled(view: JobView): void {
    this.update({ job: view });
  }

  jobDone(view: JobView, chains: ChainDoc[], widths: number[][], loss: LossBadge): void {
    this.update({
      job: view,
      bodies: chains.map((chain, i) => ({
        status: "refined" as BodyStatus,
        chain,
        widths: widths[i] ?? [],
        fault: null,
      })),
      loss,
    });
  }

  jobFailed(view: JobView): void {
    // failed refinement: drafts preserved so the user can redraw
    this.update({
      job: view,
      bodies: this.state.bodies.map((b) => ({
        ...b,
        status: "draft" as BodyStatus,
      })),
      notice: view.error ?? "refinement failed",
    });
  }

  /** Accept flags come back from the export response (server truth). */
  acceptedFlags(flags: boolean[]): void {
    this.update({
      bodies: this.state.bodies.map((b, i) => {
        if (b.status !== "refined" && b.status !== "accepted") return b;
        return { ...b, status: flags[i] ? "accepted" : "refined" };
      }),
    });
  }

  acceptedIndices(): number[] {
    return this.state.bodies.flatMap((b, i) => (b.status === "accepted" ? [i] : []));
  }
}
