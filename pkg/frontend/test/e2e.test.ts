/** End-to-end round-trip against a real workbench server.
 *
 * Builds a tiny corpus, trains the initial model through the HTTP API,
 * paints a polygon with the client, finetunes with double weighting, and
 * checks the three observable effects: painted pixels in the round overlay,
 * the new checkpoint in the lineage, and the doubled patch counter.
 */
import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { PNG } from "pngjs";
import { afterAll, beforeAll, describe, expect, test } from "vitest";
import { DialApi } from "../src/api.js";
import { buttonStates } from "../src/dashboard.js";
import type { PolygonStroke } from "../src/strokes.js";
import type { Job } from "../src/types.js";

const PORT = 18100 + (process.pid % 800);
const BASE = `http://127.0.0.1:${PORT}`;

let root: string;
let server: ChildProcess | null = null;

function cli(...args: string[]): void {
  execFileSync("python3", ["-m", "dialbench", ...args], {
    stdio: ["ignore", "pipe", "pipe"],
    timeout: 300_000,
  });
}

async function serverUp(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const r = await fetch(`${BASE}/slides`);
      if (r.ok) return;
    } catch {
      // not listening yet
    }
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
  throw new Error("server did not come up");
}

async function waitForJob(api: DialApi, job: Job, timeoutMs = 300_000): Promise<void> {
  const t0 = Date.now();
  for (;;) {
    const j = await api.job(job.job_id);
    if (j.status === "done") return;
    if (j.status === "failed") {
      throw new Error(`job ${j.kind} failed: ${j.error}\n${j.log.join("\n")}`);
    }
    if (Date.now() - t0 > timeoutMs) throw new Error(`job ${j.kind} timed out`);
    await new Promise((resolve) => setTimeout(resolve, 500));
  }
}

function pixelAt(png: ArrayBuffer, x: number, y: number): [number, number, number] {
  const img = PNG.sync.read(Buffer.from(png));
  const i = (img.width * y + x) * 4;
  return [img.data[i]!, img.data[i + 1]!, img.data[i + 2]!];
}

// a 50x50 square at world (300..349, 300..349): inside tile (0, row 1, col 1)
const SQUARE: PolygonStroke = {
  class_id: 2,
  kind: "polygon",
  points: [
    [300, 300],
    [349, 300],
    [349, 349],
    [300, 349],
  ],
};

beforeAll(() => {
  root = mkdtempSync(join(tmpdir(), "dialui-"));
  cli(
    "generate", "--out", join(root, "corpus"),
    "--train", "2", "--test", "1", "--size", "1024", "--seed", "11", "--fraction", "0.08",
  );
  cli(
    "init", "--root", root,
    "--patch-size", "32", "--base-channels", "2", "--depth", "2",
    "--batch-size", "4", "--epochs", "2", "--finetune-epochs", "1", "--seed", "11",
  );
  server = spawn("python3", ["-m", "dialbench", "serve", "--root", root, "--port", String(PORT)], {
    stdio: ["ignore", "inherit", "inherit"],
  });
  return serverUp();
}, 240_000);

afterAll(() => {
  if (server) {
    server.kill("SIGTERM");
    setTimeout(() => server?.kill("SIGKILL"), 3000).unref();
  }
  if (root) rmSync(root, { recursive: true, force: true });
});

describe("correction round-trip", () => {
  test("paint, finetune(double), and observe overlay + lineage + 2x patches", async () => {
    const api = new DialApi(BASE);

    // fresh workbench: only Train is available
    let rc = await api.roundsCurrent();
    expect(rc.status).toBe("awaiting_training");
    expect(buttonStates(rc, false)).toMatchObject({ train: true, finetuneDouble: false });

    await waitForJob(api, await api.train());
    rc = await api.roundsCurrent();
    expect(rc.status).toBe("awaiting_correction");
    expect(rc.models.map((m) => m.model_id)).toEqual(["model1"]);

    const slides = await api.slides();
    const sid = slides.find((s) => s.split === "train")!.slide_id;
    const meta = await api.slideMeta(sid);
    expect(meta.tile_size).toBe(256);
    expect(meta.levels.map((lv) => lv.factor)).toEqual([1, 2, 4]);

    // (i) stroke pixels appear in the round overlay
    const ack = await api.postStrokes(sid, [SQUARE]);
    expect(ack).toMatchObject({ accepted: 1, round: 1 });
    rc = await api.roundsCurrent();
    expect(rc.stroke_counts[sid]).toBe(1);
    const overlayPath = api.overlayPath(sid, "round", 0, 1, 1, 1.0);
    const painted = await api.fetchPng(overlayPath);
    expect(pixelAt(painted, 320 - 256, 320 - 256)).toEqual(rc.palette[2]);

    // paint elsewhere, then undo: the overlay returns to the exact bytes
    const second: PolygonStroke = {
      class_id: 4,
      kind: "polygon",
      points: [[400, 300], [429, 300], [429, 329], [400, 329]],
    };
    await api.postStrokes(sid, [second]);
    const withSecond = await api.fetchPng(overlayPath);
    expect(Buffer.compare(Buffer.from(withSecond), Buffer.from(painted))).not.toBe(0);
    await api.postStrokes(sid, [{ op: "undo" }]);
    const undone = await api.fetchPng(overlayPath);
    expect(Buffer.compare(Buffer.from(undone), Buffer.from(painted))).toBe(0);

    // finetune single for the baseline patch count
    await waitForJob(api, await api.finetune("single"));
    rc = await api.roundsCurrent();
    expect(rc.models).toHaveLength(2);
    const single = rc.models[1]!;
    expect(single.parent).toBe("model1");
    expect(single.policy).toBe("single");
    expect(single.patch_count).toBeGreaterThan(0);

    // same square again, finetuned double this round
    await api.postStrokes(sid, [SQUARE]);
    await waitForJob(api, await api.finetune("double"));
    rc = await api.roundsCurrent();
    expect(rc.models).toHaveLength(3);
    const doubled = rc.models[2]!;

    // (ii) dashboard lineage shows the new child checkpoint
    expect(doubled.parent).toBe(single.model_id);
    expect(doubled.policy).toBe("double");
    expect(doubled.checkpoint_hash).not.toBe(single.checkpoint_hash);

    // (iii) double weighting doubles the round's patch counter
    expect(doubled.patch_count).toBe(2 * single.patch_count);

    // the client only used documented endpoints throughout
    expect(api.logClean).toBe(true);
  }, 480_000);
});
