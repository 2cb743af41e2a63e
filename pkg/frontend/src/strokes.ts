/** Stroke construction and batching for the correction brush.
 *
 * Stroke coordinates are always world-space (20x) pixels, whatever the
 * current zoom -- the viewer converts pointer events before they get here.
 * The wire format matches the server's rasterizer: brush polylines stamped
 * with a disk, polygons filled even-odd, later strokes winning on replay.
 */

export const MAX_POINTS_PER_REQUEST = 25;

export type Point = [number, number];

export interface BrushStroke {
  class_id: number;
  kind: "brush";
  points: Point[];
  radius: number;
}

export interface PolygonStroke {
  class_id: number;
  kind: "polygon";
  points: Point[];
}

export type Stroke = BrushStroke | PolygonStroke;

export type StrokeEvent = Stroke | { op: "undo" };

export const UNDO: StrokeEvent = { op: "undo" };

/** Split an over-long freehand polyline into request-sized strokes.
 *
 * Chunks are consecutive, non-overlapping and order-preserving, so a
 * 100-point line costs ceil(100/25) = 4 requests.  Each chunk stands alone
 * as a stroke; while drawing, consecutive samples sit well inside the brush
 * radius, so the seam between chunks is covered by the end stamps.
 * Polygons are never split -- cutting a ring changes its fill.
 */
export function batchStroke(stroke: Stroke): Stroke[] {
  if (stroke.kind === "polygon" || stroke.points.length <= MAX_POINTS_PER_REQUEST) {
    return [stroke];
  }
  const out: Stroke[] = [];
  for (let i = 0; i < stroke.points.length; i += MAX_POINTS_PER_REQUEST) {
    out.push({ ...stroke, points: stroke.points.slice(i, i + MAX_POINTS_PER_REQUEST) });
  }
  return out;
}

/** Accumulates one freehand brush stroke from pointer samples. */
export class BrushRecorder {
  private points: Point[] = [];

  constructor(
    public readonly classId: number,
    public readonly radius: number,
    /** drop samples closer than this to the previous one (world px) */
    private readonly minSpacing = 2,
  ) {}

  add(p: Point): void {
    const last = this.points[this.points.length - 1];
    if (last && Math.hypot(p[0] - last[0], p[1] - last[1]) < this.minSpacing) return;
    this.points.push(p);
  }

  get size(): number {
    return this.points.length;
  }

  /** Finish the stroke and emit its request-sized parts (empty if no points). */
  finish(): Stroke[] {
    if (this.points.length === 0) return [];
    const stroke: BrushStroke = {
      class_id: this.classId,
      kind: "brush",
      points: this.points,
      radius: this.radius,
    };
    this.points = [];
    return batchStroke(stroke);
  }
}

/** Client-side ledger of acknowledged stroke events for one slide.
 *
 * The server's journal is the source of truth; this mirror only drives
 * optimistic UI (pending-stroke counter, undo button state).
 */
export class StrokeLedger {
  private acked = 0;

  get pendingStrokes(): number {
    return this.acked;
  }

  acknowledge(events: StrokeEvent[]): void {
    for (const ev of events) {
      if ("op" in ev) this.acked = Math.max(0, this.acked - 1);
      else this.acked += 1;
    }
  }

  get canUndo(): boolean {
    return this.acked > 0;
  }

  reset(): void {
    this.acked = 0;
  }
}
