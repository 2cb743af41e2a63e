/** Viewport and tile-address math for the pyramid viewer.
 *
 * All persistent coordinates live in world space: full-resolution (20x)
 * pixels.  A viewport renders one pyramid level 1:1, so a screen pixel is
 * one level pixel and `factor` converts between the two spaces.  Tiles are
 * fixed 256 px squares addressed by (level, row, col), mirroring the
 * server's on-disk layout -- the client never asks for arbitrary crops.
 */
import type { LevelMeta } from "./types.js";

export const TILE_SIZE = 256;

export interface Viewport {
  /** world-space coordinates of the screen center */
  centerX: number;
  centerY: number;
  /** pyramid level index: 0 = 20x, 1 = 10x, 2 = 5x */
  level: number;
  /** canvas size in screen (= level) pixels */
  width: number;
  height: number;
}

export interface TileAddress {
  level: number;
  row: number;
  col: number;
}

export function tileKey(t: TileAddress): string {
  return `${t.level}/${t.row}/${t.col}`;
}

export function levelOf(levels: LevelMeta[], index: number): LevelMeta {
  const lv = levels[index];
  if (!lv) throw new RangeError(`no pyramid level ${index}`);
  return lv;
}

/** Tiles intersecting the viewport, clamped to the slide, row-major. */
export function visibleTiles(vp: Viewport, levels: LevelMeta[]): TileAddress[] {
  const lv = levelOf(levels, vp.level);
  const x0 = vp.centerX / lv.factor - vp.width / 2;
  const y0 = vp.centerY / lv.factor - vp.height / 2;
  const colEnd = Math.min(Math.ceil((x0 + vp.width) / TILE_SIZE), Math.ceil(lv.width / TILE_SIZE));
  const rowEnd = Math.min(Math.ceil((y0 + vp.height) / TILE_SIZE), Math.ceil(lv.height / TILE_SIZE));
  const colStart = Math.max(0, Math.floor(x0 / TILE_SIZE));
  const rowStart = Math.max(0, Math.floor(y0 / TILE_SIZE));
  const out: TileAddress[] = [];
  for (let row = rowStart; row < rowEnd; row++) {
    for (let col = colStart; col < colEnd; col++) {
      out.push({ level: vp.level, row, col });
    }
  }
  return out;
}

/** Where to draw a tile on the canvas, in screen pixels (may be off-screen). */
export function tileScreenOrigin(vp: Viewport, lv: LevelMeta, t: TileAddress): { x: number; y: number } {
  return {
    x: t.col * TILE_SIZE - (vp.centerX / lv.factor - vp.width / 2),
    y: t.row * TILE_SIZE - (vp.centerY / lv.factor - vp.height / 2),
  };
}

/** Change zoom level; the world point under the screen center stays put. */
export function zoomTo(vp: Viewport, level: number, levels: LevelMeta[]): Viewport {
  levelOf(levels, level);
  return { ...vp, level };
}

/** Pan by a screen-pixel delta (drag), which scales with the level factor. */
export function panBy(vp: Viewport, dx: number, dy: number, levels: LevelMeta[]): Viewport {
  const lv = levelOf(levels, vp.level);
  return clampCenter(
    { ...vp, centerX: vp.centerX + dx * lv.factor, centerY: vp.centerY + dy * lv.factor },
    levels,
  );
}

/** Keep the center inside the slide so panning can't lose the image. */
export function clampCenter(vp: Viewport, levels: LevelMeta[]): Viewport {
  const world = levelOf(levels, 0);
  return {
    ...vp,
    centerX: Math.min(Math.max(vp.centerX, 0), world.width),
    centerY: Math.min(Math.max(vp.centerY, 0), world.height),
  };
}

/** Screen position -> world-space (20x) coordinates. */
export function screenToWorld(vp: Viewport, levels: LevelMeta[], sx: number, sy: number): [number, number] {
  const lv = levelOf(levels, vp.level);
  return [
    (sx - vp.width / 2) * lv.factor + vp.centerX,
    (sy - vp.height / 2) * lv.factor + vp.centerY,
  ];
}

/** World tile address containing a world point at a given level. */
export function tileAt(levels: LevelMeta[], level: number, wx: number, wy: number): TileAddress {
  const lv = levelOf(levels, level);
  return {
    level,
    row: Math.floor(wy / lv.factor / TILE_SIZE),
    col: Math.floor(wx / lv.factor / TILE_SIZE),
  };
}
