/** Typed client for the slenderfit labeling service REST API. */

export interface ChainDoc {
  /** [x, y, w] per knot; w optional on input (defaults to 1.0 server-side). */
  knots: number[][];
}

export interface SessionInfo {
  session_id: string;
  /** [height, width] in pixels. */
  resolution: [number, number];
}

export type JobState = "queued" | "running" | "done" | "failed";

export interface JobProgress {
  phase: number;
  step: number;
}

export interface JobResult {
  chains: ChainDoc[];
  final_recon_loss: number;
  background_recon_loss: number;
  global_width: number;
  width_samples: number[][];
  success: boolean;
  best_seed: number;
  [extra: string]: unknown;
}

export interface JobDoc {
  id: string;
  session_id: string;
  state: JobState;
  progress: JobProgress;
  error: string | null;
  result: JobResult | null;
}

export interface ExportBody {
  index: number;
  accepted: boolean;
  knots: ChainDoc;
  polyline: number[][];
  widths: number[];
}

export interface ExportPayload {
  bodies: ExportBody[];
  metadata: {
    session_id: string;
    resolution: [number, number];
    final_recon_loss?: number;
    background_recon_loss?: number;
    success?: boolean;
    [extra: string]: unknown;
  };
}

export type OverlayKind = "overlay" | "reconstruction" | "per_body";

/** Error raised for any non-2xx response; mirrors the service envelope. */
export class ApiFault extends Error {
  constructor(
    readonly status: number,
    readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiFault";
  }
}

async function raiseFault(res: Response): Promise<never> {
  let code = "http_error";
  let message = `${res.status} ${res.statusText}`;
  try {
    const body = (await res.json()) as { error?: { code?: string; message?: string } };
    if (body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body: keep the status-line message
  }
  throw new ApiFault(res.status, code, message);
}

export class Client {
  constructor(readonly baseUrl: string, private readonly fetchFn: typeof fetch = fetch) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const res = await this.fetchFn(this.url(path), init);
    if (!res.ok) await raiseFault(res);
    return res;
  }

  async createSession(png: Uint8Array | Blob): Promise<SessionInfo> {
    // raw bytes, not a Blob wrapper: keeps the body portable between
    // browser fetch and the node fetch used by the test runner
    const res = await this.request("/sessions", {
      method: "POST",
      headers: { "content-type": "image/png" },
      body: png as BodyInit,
    });
    return (await res.json()) as SessionInfo;
  }

  async submitSplines(sid: string, chains: ChainDoc[]): Promise<ChainDoc[]> {
    const res = await this.request(`/sessions/${sid}/splines`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ chains }),
    });
    const doc = (await res.json()) as { chains: ChainDoc[] };
    return doc.chains;
  }

  async startRefine(sid: string, settings?: Record<string, unknown>): Promise<string> {
    const res = await this.request(`/sessions/${sid}/refine`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(settings ? { settings } : {}),
    });
    const doc = (await res.json()) as { job_id: string };
    return doc.job_id;
  }

  async pollJob(jid: string): Promise<JobDoc> {
    const res = await this.request(`/jobs/${jid}`);
    return (await res.json()) as JobDoc;
  }

  overlayUrl(sid: string, kind: OverlayKind, body?: number): string {
    const extra = kind === "per_body" ? `&body=${body ?? 0}` : "";
    return this.url(`/sessions/${sid}/overlay?kind=${kind}${extra}`);
  }

  async fetchOverlay(sid: string, kind: OverlayKind, body?: number): Promise<Uint8Array> {
    const res = await this.request(
      `/sessions/${sid}/overlay?kind=${kind}` + (kind === "per_body" ? `&body=${body ?? 0}` : ""),
    );
    return new Uint8Array(await res.arrayBuffer());
  }

  async exportLabels(sid: string, accepted?: number[]): Promise<ExportPayload> {
    const query = accepted !== undefined ? `?accepted=${accepted.join(",")}` : "";
    const res = await this.request(`/sessions/${sid}/export${query}`);
    return (await res.json()) as ExportPayload;
  }
}
