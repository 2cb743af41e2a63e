/** Page bootstrap: wires the API client, tile viewer, and round dashboard.
 *
 * Single-operator tool: one slide on screen, the round state machine in a
 * sidebar, jobs polled at 1 Hz.  The server owns all state; everything here
 * re-renders from `GET /rounds/current` + `GET /jobs`.
 */
import { ApiError, DialApi } from "./api.js";
import {
  ButtonStates,
  Poller,
  anyActive,
  buttonStates,
  countBars,
  lineage,
  lineageLabel,
} from "./dashboard.js";
import { UNDO } from "./strokes.js";
import { StrokeLedger } from "./strokes.js";
import { OverlayMode, TileViewer } from "./viewer.js";
import type { RoundsCurrent } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

async function boot(): Promise<void> {
  const api = new DialApi("");
  const banner = el<HTMLDivElement>("banner");
  const slides = await api.slides();
  const trainSlides = slides.filter((s) => s.split === "train");
  const picker = el<HTMLSelectElement>("slide-picker");
  for (const s of slides) {
    const opt = document.createElement("option");
    opt.value = s.slide_id;
    opt.textContent = `${s.slide_id} (${s.split})`;
    picker.appendChild(opt);
  }
  picker.value = trainSlides[0]?.slide_id ?? slides[0]?.slide_id ?? "";

  let rc: RoundsCurrent | null = null;
  let viewer: TileViewer | null = null;
  const ledger = new StrokeLedger();

  async function openSlide(slideId: string): Promise<void> {
    const meta = await api.slideMeta(slideId);
    const canvas = el<HTMLCanvasElement>("viewer");
    ledger.reset();
    viewer = new TileViewer(canvas, api, meta, (strokes) => {
      void (async () => {
        try {
          const ack = await api.postStrokes(meta.slide_id, strokes);
          ledger.acknowledge(strokes);
          banner.textContent = `round ${ack.round}: ${ack.accepted} stroke(s) saved`;
          viewer?.invalidateOverlay();
          await refresh();
        } catch (err) {
          banner.textContent = err instanceof ApiError ? err.message : String(err);
        }
      })();
    });
    viewer.render();
  }

  function applyButtons(states: ButtonStates): void {
    el<HTMLButtonElement>("btn-train").disabled = !states.train;
    el<HTMLButtonElement>("btn-ft-single").disabled = !states.finetuneSingle;
    el<HTMLButtonElement>("btn-ft-double").disabled = !states.finetuneDouble;
    el<HTMLButtonElement>("btn-satisfy").disabled = !states.satisfy;
    el<HTMLButtonElement>("btn-undo").disabled = !(states.paint && ledger.canUndo);
    if (viewer) viewer.paintEnabled = states.paint;
  }

  function renderDashboard(jobsActive: boolean): void {
    if (!rc) return;
    el<HTMLSpanElement>("status").textContent = rc.status + (jobsActive ? " (job running)" : "");
    const tree = el<HTMLUListElement>("lineage");
    tree.replaceChildren();
    for (const entry of lineage(rc.models)) {
      const li = document.createElement("li");
      li.textContent = `${lineageLabel(entry)} — ${entry.model.patch_count} patches, val mIOU ${entry.model.val_miou.toFixed(3)}`;
      li.style.marginLeft = `${entry.depth}em`;
      tree.appendChild(li);
    }
    const bars = el<HTMLDivElement>("count-bars");
    bars.replaceChildren();
    for (const bar of countBars(rc.models)) {
      const row = document.createElement("div");
      row.className = "bar-row";
      const fill = document.createElement("div");
      fill.className = "bar-fill";
      fill.style.width = `${Math.round(bar.fraction * 100)}%`;
      const label = document.createElement("span");
      label.textContent = `${bar.model_id}: ${bar.labeled_px.toLocaleString()} px / ${bar.patch_count} patches`;
      row.append(fill, label);
      bars.appendChild(row);
    }
    applyButtons(buttonStates(rc, jobsActive));
  }

  async function refresh(): Promise<void> {
    rc = await api.roundsCurrent();
    const jobs = await api.jobs();
    renderDashboard(anyActive(jobs));
    const running = jobs.filter((j) => j.status === "running");
    el<HTMLSpanElement>("job-line").textContent = running
      .map((j) => `${j.kind} ${(j.progress * 100).toFixed(0)}% ${j.log[j.log.length - 1] ?? ""}`)
      .join(" | ");
  }

  async function post(action: () => Promise<unknown>): Promise<void> {
    try {
      await action();
      banner.textContent = "";
    } catch (err) {
      banner.textContent = err instanceof ApiError ? err.message : String(err);
    }
    await refresh();
  }

  el<HTMLButtonElement>("btn-train").onclick = () => void post(() => api.train());
  el<HTMLButtonElement>("btn-ft-single").onclick = () => void post(() => api.finetune("single"));
  el<HTMLButtonElement>("btn-ft-double").onclick = () => void post(() => api.finetune("double"));
  el<HTMLButtonElement>("btn-satisfy").onclick = () => void post(() => api.satisfy());
  el<HTMLButtonElement>("btn-undo").onclick = () =>
    void post(async () => {
      await api.postStrokes(picker.value, [UNDO]);
      ledger.acknowledge([UNDO]);
      viewer?.invalidateOverlay();
    });
  el<HTMLSelectElement>("overlay-mode").onchange = (e) => {
    const mode = (e.target as HTMLSelectElement).value as OverlayMode;
    viewer?.setOverlay(mode);
  };
  el<HTMLInputElement>("alpha").oninput = (e) => {
    viewer?.setOverlay(viewer.overlay, Number((e.target as HTMLInputElement).value));
  };
  el<HTMLSelectElement>("class-picker").onchange = (e) => {
    if (viewer) viewer.activeClass = Number((e.target as HTMLSelectElement).value);
  };
  el<HTMLSelectElement>("level-picker").onchange = (e) => {
    viewer?.setLevel(Number((e.target as HTMLSelectElement).value));
  };
  picker.onchange = () => void openSlide(picker.value);

  rc = await api.roundsCurrent();
  const classPicker = el<HTMLSelectElement>("class-picker");
  rc.classes.forEach((name, i) => {
    const opt = document.createElement("option");
    opt.value = String(i);
    const [r, g, b] = rc!.palette[i] ?? [0, 0, 0];
    opt.textContent = `${i}: ${name}`;
    opt.style.background = `rgb(${r},${g},${b})`;
    classPicker.appendChild(opt);
  });

  if (picker.value) await openSlide(picker.value);
  new Poller(() => void refresh(), 1000).start();
}

void boot();
