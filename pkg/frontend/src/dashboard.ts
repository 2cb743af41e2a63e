/** Round dashboard logic: which buttons are live, model lineage, the
 * per-round labeled-pixel bars, and job polling.  Pure functions except the
 * poller, so the state machine is testable without a DOM.
 */
import type { Job, ModelRecord, RoundsCurrent } from "./types.js";

export interface ButtonStates {
  train: boolean;
  finetuneSingle: boolean;
  finetuneDouble: boolean;
  satisfy: boolean;
  /** whether the brush/polygon tools accept input */
  paint: boolean;
}

/** Mirror of the server's round state machine.
 *
 * The server is authoritative (it answers 409 to anything off-protocol);
 * disabling buttons that would bounce just keeps the protocol visible.
 */
export function buttonStates(rc: RoundsCurrent, jobActive: boolean): ButtonStates {
  const idle = !jobActive;
  const correcting = rc.status === "awaiting_correction";
  const strokesPending = Object.values(rc.stroke_counts).some((n) => n > 0);
  const submitted = rc.pending_round !== null;
  return {
    train: idle && rc.status === "awaiting_training" && rc.models.length === 0,
    finetuneSingle: idle && correcting && (strokesPending || submitted),
    finetuneDouble: idle && correcting && (strokesPending || submitted),
    satisfy: idle && correcting && !strokesPending && !submitted,
    paint: idle && correcting && !submitted,
  };
}

export function anyActive(jobs: Job[]): boolean {
  return jobs.some((j) => j.status === "queued" || j.status === "running");
}

export interface LineageEntry {
  model: ModelRecord;
  /** parent model_id, null for the initially trained model */
  parent: string | null;
  depth: number;
}

/** Parent-ordered lineage; each round's model descends from the previous. */
export function lineage(models: ModelRecord[]): LineageEntry[] {
  return models.map((m, i) => ({ model: m, parent: m.parent, depth: i }));
}

export function lineageLabel(e: LineageEntry): string {
  const policy = e.model.policy ? ` (${e.model.policy})` : "";
  const from = e.parent ? ` ← ${e.parent}` : "";
  return `${e.model.model_id}${policy}${from}`;
}

export interface CountBar {
  model_id: string;
  patch_count: number;
  labeled_px: number;
  /** relative to the largest round, for drawing */
  fraction: number;
}

/** Per-round training-set size bars (patches and labeled pixels). */
export function countBars(models: ModelRecord[]): CountBar[] {
  const totals = models.map((m) => m.counts.reduce((a, b) => a + b, 0));
  const top = Math.max(1, ...totals);
  return models.map((m, i) => ({
    model_id: m.model_id,
    patch_count: m.patch_count,
    labeled_px: totals[i] ?? 0,
    fraction: (totals[i] ?? 0) / top,
  }));
}

/** Calls `tick` immediately and then at a fixed interval until stopped. */
export class Poller {
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly tick: () => void,
    private readonly intervalMs = 1000,
  ) {}

  start(): void {
    if (this.timer !== null) return;
    this.tick();
    this.timer = setInterval(this.tick, this.intervalMs);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  get running(): boolean {
    return this.timer !== null;
  }
}
