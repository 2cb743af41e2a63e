/** Typed client for the workbench HTTP API.
 *
 * Every request goes through one helper that appends to a request log, so
 * tests can assert the client never touches an undocumented endpoint and
 * never mutates state outside the documented POSTs.
 */
import type {
  AssessReport,
  Job,
  RoundsCurrent,
  SlideListEntry,
  SlideMeta,
  StrokeAck,
} from "./types.js";
import type { StrokeEvent } from "./strokes.js";

export interface RequestLogEntry {
  method: "GET" | "POST";
  path: string;
  status: number;
}

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly detail: string,
    method: string,
    path: string,
  ) {
    super(`${method} ${path} -> ${status}: ${detail}`);
    this.name = "ApiError";
  }
}

/** The service's documented endpoint set; the client may use nothing else. */
export const DOCUMENTED_ENDPOINTS: { method: "GET" | "POST"; pattern: RegExp }[] = [
  { method: "GET", pattern: /^\/slides$/ },
  { method: "GET", pattern: /^\/slides\/[^/]+\/meta$/ },
  { method: "GET", pattern: /^\/slides\/[^/]+\/tile\/\d+\/\d+\/\d+$/ },
  { method: "GET", pattern: /^\/slides\/[^/]+\/overlay\/(round|pred)\/\d+\/\d+\/\d+(\?alpha=[\d.]+)?$/ },
  { method: "GET", pattern: /^\/rounds\/current$/ },
  { method: "POST", pattern: /^\/rounds\/train$/ },
  { method: "POST", pattern: /^\/rounds\/finetune$/ },
  { method: "POST", pattern: /^\/rounds\/satisfy$/ },
  { method: "POST", pattern: /^\/corrections\/[^/]+$/ },
  { method: "GET", pattern: /^\/jobs$/ },
  { method: "GET", pattern: /^\/jobs\/[^/]+$/ },
  { method: "POST", pattern: /^\/assess$/ },
  { method: "GET", pattern: /^\/assess\/report$/ },
];

export function isDocumented(entry: { method: string; path: string }): boolean {
  return DOCUMENTED_ENDPOINTS.some(
    (e) => e.method === entry.method && e.pattern.test(entry.path),
  );
}

export class DialApi {
  readonly log: RequestLogEntry[] = [];

  constructor(
    private readonly base: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  /** True when every logged request used a documented endpoint. */
  get logClean(): boolean {
    return this.log.every(isDocumented);
  }

  private async request(method: "GET" | "POST", path: string, body?: unknown): Promise<Response> {
    const init: RequestInit = { method };
    if (body !== undefined) {
      init.body = JSON.stringify(body);
      init.headers = { "content-type": "application/json" };
    }
    const resp = await this.fetchImpl(this.base + path, init);
    this.log.push({ method, path, status: resp.status });
    if (!resp.ok) {
      let detail = resp.statusText;
      try {
        const payload = (await resp.json()) as { detail?: string };
        if (payload.detail) detail = payload.detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(resp.status, detail, method, path);
    }
    return resp;
  }

  private async json<T>(method: "GET" | "POST", path: string, body?: unknown): Promise<T> {
    return (await (await this.request(method, path, body)).json()) as T;
  }

  slides(): Promise<SlideListEntry[]> {
    return this.json("GET", "/slides");
  }

  slideMeta(slideId: string): Promise<SlideMeta> {
    return this.json("GET", `/slides/${slideId}/meta`);
  }

  tilePath(slideId: string, level: number, row: number, col: number): string {
    return `/slides/${slideId}/tile/${level}/${row}/${col}`;
  }

  overlayPath(
    slideId: string,
    layer: "round" | "pred",
    level: number,
    row: number,
    col: number,
    alpha: number,
  ): string {
    return `/slides/${slideId}/overlay/${layer}/${level}/${row}/${col}?alpha=${alpha}`;
  }

  /** Absolute URL for <img>/canvas tile sources. */
  url(path: string): string {
    return this.base + path;
  }

  /** Fetch a PNG tile as raw bytes (tests and canvas decoding). */
  async fetchPng(path: string): Promise<ArrayBuffer> {
    return (await this.request("GET", path)).arrayBuffer();
  }

  roundsCurrent(): Promise<RoundsCurrent> {
    return this.json("GET", "/rounds/current");
  }

  train(): Promise<Job> {
    return this.json("POST", "/rounds/train", {});
  }

  finetune(weighting: "single" | "double"): Promise<Job> {
    return this.json("POST", "/rounds/finetune", { weighting });
  }

  satisfy(): Promise<unknown> {
    return this.json("POST", "/rounds/satisfy", {});
  }

  postStrokes(slideId: string, events: StrokeEvent[]): Promise<StrokeAck> {
    return this.json("POST", `/corrections/${slideId}`, { strokes: events });
  }

  jobs(): Promise<Job[]> {
    return this.json("GET", "/jobs");
  }

  job(jobId: string): Promise<Job> {
    return this.json("GET", `/jobs/${jobId}`);
  }

  assess(): Promise<Job> {
    return this.json("POST", "/assess", {});
  }

  assessReport(): Promise<AssessReport> {
    return this.json("GET", "/assess/report");
  }
}
