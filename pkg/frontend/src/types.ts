/** Payload shapes of the workbench HTTP API, as served. */

export interface SlideListEntry {
  slide_id: string;
  case_id: string;
  split: "train" | "test";
}

export interface LevelMeta {
  level: number;
  /** downsampling factor relative to full resolution: 1, 2 or 4 */
  factor: number;
  width: number;
  height: number;
}

export interface SlideMeta {
  slide_id: string;
  case_id: string;
  /** full-resolution (world-space) dimensions */
  width: number;
  height: number;
  tile_size: number;
  levels: LevelMeta[];
  stroke_version: number;
}

export interface ModelRecord {
  model_id: string;
  round_index: number;
  parent: string | null;
  policy: "single" | "double" | null;
  checkpoint_hash: string;
  patch_count: number;
  /** labeled pixels per class in this round's training patches */
  counts: number[];
  weights: number[];
  val_miou: number;
}

export interface RoundsCurrent {
  status: "awaiting_training" | "training" | "awaiting_correction" | "satisfied";
  round_index: number;
  pending_round: number | null;
  next_round: number;
  corrections: Record<string, unknown>;
  /** slide_id -> acknowledged stroke-event count for the upcoming round */
  stroke_counts: Record<string, number>;
  models: ModelRecord[];
  classes: string[];
  palette: [number, number, number][];
}

export type JobStatus = "queued" | "running" | "done" | "failed";

export interface Job {
  job_id: string;
  kind: "train" | "finetune" | "segment" | "assess" | "generate";
  status: JobStatus;
  progress: number;
  log: string[];
  error: string | null;
}

export interface StrokeAck {
  accepted: number;
  round: number;
  stroke_version: number;
}

export interface CaseRow {
  case_id: string;
  p_vt: number;
  p_nt: number;
  r_dl: number | null;
  r_path: number | null;
  no_tumor_detected: boolean;
  per_slide: Record<string, { p_vt: number; p_nt: number }>;
}

export interface ReportModelRow {
  model_id: string;
  error_rate: number;
  best: boolean;
  cases: CaseRow[];
}

export interface AssessReport {
  models: ReportModelRow[];
}
