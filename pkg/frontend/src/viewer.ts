/** Canvas tile viewer with overlay and brush input.
 *
 * Rendering is pull-based: `render()` draws whatever tiles are cached and
 * queues loads for the rest; each arrival triggers one more render.  Tiles
 * come pre-blended from the overlay endpoint when an overlay is active, so
 * the client never composites label colors itself.
 */
import { DialApi } from "./api.js";
import {
  TILE_SIZE,
  Viewport,
  clampCenter,
  levelOf,
  panBy,
  screenToWorld,
  tileScreenOrigin,
  visibleTiles,
  zoomTo,
} from "./tiles.js";
import { BrushRecorder, Point, Stroke } from "./strokes.js";
import type { SlideMeta } from "./types.js";

export type OverlayMode = "off" | "round" | "pred";

const RETRY_MS = 2000;

interface CacheEntry {
  img: HTMLImageElement;
  ok: boolean;
  failedAt?: number;
}

export class TileViewer {
  viewport: Viewport;
  overlay: OverlayMode = "round";
  alpha = 0.5;
  activeClass = 1;
  brushRadius = 12;
  /** bumped on every acknowledged stroke so overlay tiles re-fetch */
  private version = 0;
  private cache = new Map<string, CacheEntry>();
  private recorder: BrushRecorder | null = null;
  private trail: Point[] = [];

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly api: DialApi,
    readonly meta: SlideMeta,
    private readonly onStrokes: (strokes: Stroke[]) => void,
  ) {
    this.viewport = {
      centerX: meta.width / 2,
      centerY: meta.height / 2,
      level: meta.levels.length - 1,
      width: canvas.width,
      height: canvas.height,
    };
    canvas.addEventListener("pointerdown", (e) => this.penDown(e));
    canvas.addEventListener("pointermove", (e) => this.penMove(e));
    canvas.addEventListener("pointerup", () => this.penUp());
    canvas.addEventListener("pointerleave", () => this.penUp());
  }

  setLevel(level: number): void {
    this.viewport = zoomTo(this.viewport, level, this.meta.levels);
    this.render();
  }

  pan(dx: number, dy: number): void {
    this.viewport = panBy(this.viewport, dx, dy, this.meta.levels);
    this.render();
  }

  setOverlay(mode: OverlayMode, alpha?: number): void {
    this.overlay = mode;
    if (alpha !== undefined) this.alpha = alpha;
    this.render();
  }

  /** Call after the server acknowledges strokes or a round changes. */
  invalidateOverlay(): void {
    this.version += 1;
    for (const key of [...this.cache.keys()]) {
      if (key.startsWith("overlay:")) this.cache.delete(key);
    }
    this.render();
  }

  private tileSource(level: number, row: number, col: number): string {
    if (this.overlay === "off") return this.api.tilePath(this.meta.slide_id, level, row, col);
    return this.api.overlayPath(this.meta.slide_id, this.overlay, level, row, col, this.alpha);
  }

  private entryFor(path: string, kind: "tile" | "overlay"): CacheEntry {
    const key = `${kind}:${this.version}:${path}`;
    let entry = this.cache.get(key);
    const now = Date.now();
    if (entry && !entry.ok && entry.failedAt !== undefined && now - entry.failedAt > RETRY_MS) {
      this.cache.delete(key);
      entry = undefined;
    }
    if (!entry) {
      const img = new Image();
      entry = { img, ok: false };
      img.onload = () => {
        entry!.ok = true;
        this.render();
      };
      img.onerror = () => {
        entry!.failedAt = Date.now();
      };
      img.src = this.api.url(path);
      this.cache.set(key, entry);
    }
    return entry;
  }

  render(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const lv = levelOf(this.meta.levels, this.viewport.level);
    ctx.fillStyle = "#202020";
    ctx.fillRect(0, 0, this.viewport.width, this.viewport.height);
    for (const tile of visibleTiles(this.viewport, this.meta.levels)) {
      const { x, y } = tileScreenOrigin(this.viewport, lv, tile);
      const kind = this.overlay === "off" ? "tile" : "overlay";
      const entry = this.entryFor(this.tileSource(tile.level, tile.row, tile.col), kind);
      if (entry.ok) {
        ctx.drawImage(entry.img, x, y);
      } else {
        ctx.fillStyle = "#333333";
        ctx.fillRect(x, y, TILE_SIZE, TILE_SIZE);
      }
    }
    this.drawTrail(ctx, lv.factor);
  }

  /** Optimistic ink for the in-progress stroke, before the server acks. */
  private drawTrail(ctx: CanvasRenderingContext2D, factor: number): void {
    if (this.trail.length === 0) return;
    ctx.strokeStyle = "#ffffff";
    ctx.lineWidth = Math.max(1, (this.brushRadius * 2) / factor);
    ctx.lineCap = "round";
    ctx.beginPath();
    for (const [wx, wy] of this.trail) {
      const sx = (wx - this.viewport.centerX) / factor + this.viewport.width / 2;
      const sy = (wy - this.viewport.centerY) / factor + this.viewport.height / 2;
      ctx.lineTo(sx, sy);
    }
    ctx.stroke();
  }

  paintEnabled = false;

  private penDown(e: PointerEvent): void {
    if (!this.paintEnabled) return;
    this.recorder = new BrushRecorder(this.activeClass, this.brushRadius);
    this.trail = [];
    this.penMove(e);
  }

  private penMove(e: PointerEvent): void {
    if (!this.recorder) return;
    const rect = this.canvas.getBoundingClientRect();
    const p = screenToWorld(
      this.viewport,
      this.meta.levels,
      e.clientX - rect.left,
      e.clientY - rect.top,
    );
    this.recorder.add(p);
    this.trail.push(p);
    this.render();
  }

  private penUp(): void {
    if (!this.recorder) return;
    const strokes = this.recorder.finish();
    this.recorder = null;
    this.trail = [];
    if (strokes.length > 0) this.onStrokes(strokes);
    this.render();
  }
}
