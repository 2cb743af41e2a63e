"""HTTP facade over the workbench: tiles, overlays, strokes, rounds, jobs.

The service wraps one :class:`~dialbench.rounds.Workbench`.  Mutating
endpoints are serialized by a lock and rejected with 409 while a job is
queued or running, so no endpoint sequence can ever produce two concurrent
training jobs.  Correction strokes are appended to a per-slide write-ahead
log (JSONL, fsynced before the request is acknowledged) and rasterized only
when a finetune round consumes them; a crash between acknowledgement and
consumption therefore never loses strokes.

Job execution: a single FIFO worker thread runs train/finetune/assess
bodies.  ``eager_jobs=True`` executes jobs synchronously inside the request
(used by tests and scripted drivers where background progress is noise).
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from queue import Queue

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Response

from .assess import model_comparison, write_report
from .classes import CLASS_NAMES, DEFAULT_PALETTE, UNLABELED
from .inference import _blend
from .rounds import (
    AWAITING_CORRECTION,
    AWAITING_TRAINING,
    CorrectionPolicy,
    RoundStateError,
    Workbench,
    finetune_round,
    run_initial_round,
    submit_corrections,
)
from .strokes import Stroke, StrokeError, rasterize_strokes
from .wsi import TILE_SIZE, LabelMask, LEVEL_FACTORS

QUEUED, RUNNING, DONE, FAILED = "queued", "running", "done", "failed"
_TERMINAL = (DONE, FAILED)
JOB_KINDS = ("train", "finetune", "segment", "assess", "generate")


class JobStateError(RuntimeError):
    pass


@dataclass
class Job:
    job_id: str
    kind: str
    status: str = QUEUED
    progress: float = 0.0
    log: list[str] = field(default_factory=list)
    error: str | None = None

    def _mutable(self) -> None:
        if self.status in _TERMINAL:
            raise JobStateError(f"job {self.job_id} is terminal ({self.status})")

    def start(self) -> None:
        self._mutable()
        self.status = RUNNING

    def set_progress(self, fraction: float, message: str | None = None) -> None:
        self._mutable()
        # progress is monotone by construction: lower values are ignored
        self.progress = max(self.progress, min(1.0, float(fraction)))
        if message:
            self.log.append(message)
            del self.log[:-50]

    def finish(self) -> None:
        self._mutable()
        self.progress = 1.0
        self.status = DONE

    def fail(self, error: str) -> None:
        self._mutable()
        self.error = error
        self.status = FAILED

    def as_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "status": self.status,
            "progress": self.progress,
            "log": self.log[-10:],
            "error": self.error,
        }


class JobManager:
    def __init__(self, eager: bool = False):
        self.eager = eager
        self._jobs: dict[str, Job] = {}
        self._order: list[str] = []
        self._lock = threading.Lock()
        self._queue: Queue | None = None
        self._worker: threading.Thread | None = None
        if not eager:
            self._queue = Queue()
            self._worker = threading.Thread(target=self._drain, daemon=True)
            self._worker.start()

    def _drain(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            self._run(*item)

    def stop(self) -> None:
        if self._queue is not None:
            self._queue.put(None)
            self._worker.join(timeout=10)

    @staticmethod
    def _run(job: Job, fn) -> None:
        job.start()
        try:
            fn(job)
            job.finish()
        except Exception as exc:  # noqa: BLE001 - job boundary
            job.fail(f"{type(exc).__name__}: {exc}")

    def submit(self, kind: str, fn) -> Job:
        if kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {kind!r}")
        job = Job(job_id=uuid.uuid4().hex[:12], kind=kind)
        with self._lock:
            self._jobs[job.job_id] = job
            self._order.append(job.job_id)
        if self.eager:
            self._run(job, fn)
        else:
            self._queue.put((job, fn))
        return job

    def get(self, job_id: str) -> Job | None:
        return self._jobs.get(job_id)

    def all(self) -> list[Job]:
        return [self._jobs[j] for j in self._order]

    def active(self) -> bool:
        return any(j.status in (QUEUED, RUNNING) for j in self._jobs.values())


@dataclass(frozen=True)
class ServiceConfig:
    root: str
    host: str = "127.0.0.1"
    port: int = 8008
    eager_jobs: bool = False

    @classmethod
    def load(cls, path: str | Path) -> "ServiceConfig":
        cfg = cls(**json.loads(Path(path).read_text()))
        port = os.environ.get("DIAL_PORT")
        if port is not None:
            cfg = ServiceConfig(cfg.root, cfg.host, int(port), cfg.eager_jobs)
        return cfg


class StrokeLog:
    """Append-only per-slide stroke journal for the upcoming round."""

    def __init__(self, state_dir: Path):
        self.dir = state_dir / "strokes"
        self.dir.mkdir(exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, round_index: int, slide_id: str) -> Path:
        d = self.dir / f"round_{round_index:03d}"
        d.mkdir(exist_ok=True)
        return d / f"{slide_id}.jsonl"

    def append(self, round_index: int, slide_id: str, events: list[dict]) -> int:
        with self._lock:
            path = self._path(round_index, slide_id)
            with open(path, "a") as fh:
                for event in events:
                    fh.write(json.dumps(event) + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            return sum(1 for _ in open(path))

    def replay(self, round_index: int, slide_id: str) -> list[Stroke]:
        path = self._path(round_index, slide_id)
        if not path.exists():
            return []
        strokes: list[Stroke] = []
        for line in path.read_text().splitlines():
            event = json.loads(line)
            if event.get("op") == "undo":
                if strokes:
                    strokes.pop()
            else:
                strokes.append(Stroke.from_dict(event["stroke"]))
        return strokes

    def slides_with_strokes(self, round_index: int) -> list[str]:
        d = self.dir / f"round_{round_index:03d}"
        if not d.is_dir():
            return []
        return sorted(
            p.stem for p in d.glob("*.jsonl") if self.replay(round_index, p.stem)
        )

    def version(self, round_index: int, slide_id: str) -> int:
        path = self._path(round_index, slide_id)
        if not path.exists():
            return 0
        return sum(1 for _ in open(path))


def _png(arr: np.ndarray) -> bytes:
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def create_app(bench: Workbench, eager_jobs: bool = False) -> FastAPI:
    from contextlib import asynccontextmanager

    jobs = JobManager(eager=eager_jobs)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        jobs.stop()

    app = FastAPI(title="interactive segmentation workbench", lifespan=lifespan)
    stroke_log = StrokeLog(bench.state_dir)
    mutate = threading.Lock()
    app.state.bench = bench
    app.state.jobs = jobs

    # ------------------------------------------------------------ helpers
    def _slide(slide_id: str):
        try:
            bench.case_of(slide_id)
        except KeyError:
            raise HTTPException(404, f"unknown slide {slide_id!r}")
        return bench.load_slide(slide_id)

    def _guard_idle() -> None:
        if jobs.active():
            raise HTTPException(409, "another job is queued or running")

    def _state():
        return bench.load_state()

    def _check_level(slide, level: int, row: int, col: int) -> tuple[int, int]:
        if not 0 <= level < len(slide.levels):
            raise HTTPException(404, "no such pyramid level")
        h, w = slide.levels[level].shape[:2]
        rows = -(-h // TILE_SIZE)
        cols = -(-w // TILE_SIZE)
        if not (0 <= row < rows and 0 <= col < cols):
            raise HTTPException(404, "tile outside slide bounds")
        return h, w

    def _pending_round(state) -> int:
        return state.round_index + 1 if state.rounds else 0

    def _round_canvas(slide_id: str, state) -> np.ndarray:
        """Cumulative annotation plus any pending strokes, full resolution."""
        slide = bench.load_slide(slide_id)
        through = state.round_index if state.rounds else 0
        cum = bench.cumulative_mask(slide_id, through)
        canvas = (
            cum.data.copy()
            if cum is not None
            else LabelMask.empty(slide_id, (slide.height, slide.width), 0).data
        )
        pending = stroke_log.replay(_pending_round(state), slide_id)
        if pending:
            painted = rasterize_strokes(pending, canvas.shape)
            labeled = painted != UNLABELED
            canvas[labeled] = painted[labeled]
        return canvas

    # ------------------------------------------------------------- slides
    @app.get("/slides")
    def slides():
        out = []
        for info in sorted(bench.cases().values(), key=lambda c: c.case_id):
            for sid in info.slides:
                out.append({"slide_id": sid, "case_id": info.case_id, "split": info.split})
        return out

    @app.get("/slides/{slide_id}/meta")
    def slide_meta(slide_id: str):
        slide = _slide(slide_id)
        state = _state()
        return {
            "slide_id": slide_id,
            "case_id": slide.case_id,
            "width": slide.width,
            "height": slide.height,
            "tile_size": TILE_SIZE,
            "levels": [
                {
                    "level": i,
                    "factor": LEVEL_FACTORS[i],
                    "width": lvl.shape[1],
                    "height": lvl.shape[0],
                }
                for i, lvl in enumerate(slide.levels)
            ],
            "stroke_version": stroke_log.version(_pending_round(state), slide_id),
        }

    @app.get("/slides/{slide_id}/tile/{level}/{row}/{col}")
    def tile(slide_id: str, level: int, row: int, col: int):
        slide = _slide(slide_id)
        _check_level(slide, level, row, col)
        arr = slide.levels[level][
            row * TILE_SIZE : (row + 1) * TILE_SIZE,
            col * TILE_SIZE : (col + 1) * TILE_SIZE,
        ]
        return Response(content=_png(arr), media_type="image/png")

    @app.get("/slides/{slide_id}/overlay/{layer}/{level}/{row}/{col}")
    def overlay_tile(
        slide_id: str, layer: str, level: int, row: int, col: int, alpha: float = 0.5
    ):
        if layer not in ("round", "pred"):
            raise HTTPException(404, "overlay layer must be 'round' or 'pred'")
        if not 0.0 <= alpha <= 1.0:
            raise HTTPException(422, "alpha must be in [0,1]")
        slide = _slide(slide_id)
        _check_level(slide, level, row, col)
        state = _state()
        if layer == "pred":
            model_id = state.current_model
            if model_id is None or not bench.prediction_path(model_id, slide_id).exists():
                raise HTTPException(404, "no prediction available for this slide")
            full = bench.load_prediction(model_id, slide_id).data
            version = model_id
        else:
            full = _round_canvas(slide_id, state)
            version = f"r{_pending_round(state)}.{stroke_log.version(_pending_round(state), slide_id)}.{state.round_index}"
        etag = hashlib.sha1(
            f"{slide_id}:{layer}:{version}:{level}:{row}:{col}:{alpha}".encode()
        ).hexdigest()
        f = LEVEL_FACTORS[level]
        r0, c0 = row * TILE_SIZE, col * TILE_SIZE
        img = slide.levels[level][r0 : r0 + TILE_SIZE, c0 : c0 + TILE_SIZE]
        cls = full[r0 * f : (r0 + img.shape[0]) * f : f, c0 * f : (c0 + img.shape[1]) * f : f]
        labeled = cls != UNLABELED
        safe = np.where(labeled, cls, 0)
        out = img.copy()
        out[labeled] = _blend(img, DEFAULT_PALETTE[safe], alpha)[labeled]
        return Response(
            content=_png(out), media_type="image/png", headers={"ETag": etag}
        )

    # ------------------------------------------------------------- rounds
    @app.get("/rounds/current")
    def rounds_current():
        state = _state()
        pending = _pending_round(state)
        stroke_counts = {
            sid: len(stroke_log.replay(pending, sid))
            for sid in stroke_log.slides_with_strokes(pending)
        }
        models = []
        for i, rec in enumerate(state.rounds):
            models.append(
                {
                    "model_id": rec.model_id,
                    "round_index": rec.round_index,
                    "parent": state.rounds[i - 1].model_id if i else None,
                    "policy": rec.policy,
                    "checkpoint_hash": rec.checkpoint_hash,
                    "patch_count": rec.patch_count,
                    "counts": rec.counts,
                    "weights": rec.weights,
                    "val_miou": rec.val_miou,
                }
            )
        return {
            "status": state.status,
            "round_index": state.round_index,
            "pending_round": state.pending_round,
            "next_round": pending,
            "corrections": state.corrections,
            "stroke_counts": stroke_counts,
            "models": models,
            "classes": [CLASS_NAMES[c] for c in sorted(CLASS_NAMES)],
            "palette": DEFAULT_PALETTE.tolist(),
        }

    @app.post("/rounds/train")
    def rounds_train():
        with mutate:
            _guard_idle()
            state = _state()
            if state.status != AWAITING_TRAINING or state.rounds:
                raise HTTPException(409, f"cannot train while {state.status}")

            def body(job: Job) -> None:
                def progress(stats, total):
                    job.set_progress(
                        0.9 * stats.epoch / total,
                        f"epoch {stats.epoch}/{total} loss {stats.train_loss:.4f} "
                        f"miou {stats.val_miou:.4f}",
                    )

                run_initial_round(bench, progress=progress)

            return jobs.submit("train", body).as_dict()

    @app.post("/rounds/finetune")
    def rounds_finetune(payload: dict = Body(...)):
        weighting = payload.get("weighting")
        if weighting not in ("single", "double"):
            raise HTTPException(422, "weighting must be 'single' or 'double'")
        with mutate:
            _guard_idle()
            state = _state()
            if state.status != AWAITING_CORRECTION:
                raise HTTPException(409, f"cannot finetune while {state.status}")
            pending = _pending_round(state)
            stroked = stroke_log.slides_with_strokes(pending)
            if state.pending_round is None and not stroked:
                raise HTTPException(409, "no corrections to finetune on")

            def body(job: Job) -> None:
                st = bench.load_state()
                if st.pending_round is None:
                    masks = []
                    for sid in stroked:
                        slide = bench.load_slide(sid)
                        data = rasterize_strokes(
                            stroke_log.replay(pending, sid), (slide.height, slide.width)
                        )
                        masks.append(LabelMask(slide_id=sid, round=pending, data=data))
                    submit_corrections(bench, masks)
                job.set_progress(0.05, "corrections submitted")

                def progress(stats, total):
                    job.set_progress(
                        0.05 + 0.85 * stats.epoch / total,
                        f"epoch {stats.epoch}/{total} miou {stats.val_miou:.4f}",
                    )

                finetune_round(bench, CorrectionPolicy(weighting), progress=progress)

            return jobs.submit("finetune", body).as_dict()

    @app.post("/rounds/satisfy")
    def rounds_satisfy():
        with mutate:
            _guard_idle()
            state = _state()
            if state.status != AWAITING_CORRECTION:
                raise HTTPException(409, f"cannot declare satisfaction while {state.status}")
            if state.pending_round is not None:
                raise HTTPException(409, "corrections already submitted; finetune instead")
            if stroke_log.slides_with_strokes(_pending_round(state)):
                raise HTTPException(409, "pending strokes exist; finetune or discard them")
            return submit_corrections(bench, [], satisfy=True).as_dict()

    # -------------------------------------------------------- corrections
    @app.post("/corrections/{slide_id}")
    def corrections(slide_id: str, payload: dict = Body(...)):
        with mutate:
            _guard_idle()
            try:
                case_id = bench.case_of(slide_id)
            except KeyError:
                raise HTTPException(404, f"unknown slide {slide_id!r}")
            if bench.cases()[case_id].split != "train":
                raise HTTPException(409, "corrections are only accepted on training slides")
            state = _state()
            if state.status != AWAITING_CORRECTION:
                raise HTTPException(409, f"cannot accept corrections while {state.status}")
            if state.pending_round is not None:
                raise HTTPException(409, "corrections for this round already submitted")
            events = []
            raw = payload.get("strokes")
            if not isinstance(raw, list) or not raw:
                raise HTTPException(422, "body must contain a non-empty 'strokes' list")
            try:
                for entry in raw:
                    if isinstance(entry, dict) and entry.get("op") == "undo":
                        events.append({"op": "undo"})
                    else:
                        events.append({"op": "paint", "stroke": Stroke.from_dict(entry).as_dict()})
            except StrokeError as exc:
                raise HTTPException(422, str(exc))
            pending = _pending_round(state)
            version = stroke_log.append(pending, slide_id, events)
            return {
                "accepted": len(events),
                "round": pending,
                "stroke_version": version,
            }

    # ---------------------------------------------------------- jobs etc.
    @app.get("/jobs")
    def all_jobs():
        return [j.as_dict() for j in jobs.all()]

    @app.get("/jobs/{job_id}")
    def one_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return job.as_dict()

    @app.post("/assess")
    def assess_now():
        with mutate:
            _guard_idle()
            state = _state()
            if not state.rounds:
                raise HTTPException(409, "no trained model to assess")

            def body(job: Job) -> None:
                models = [
                    (rec.model_id, bench.load_model(rec.model_id))
                    for rec in bench.load_state().rounds
                ]
                cases = bench.cases()
                test_cases = {
                    cid: [bench.load_slide(s) for s in info.slides]
                    for cid, info in cases.items()
                    if info.split == "test"
                }
                refs = {
                    cid: info.r_path
                    for cid, info in cases.items()
                    if info.split == "test" and info.r_path is not None
                }
                if len(models) == 1:
                    models = models * 2  # comparison table needs two rows
                rows = model_comparison(
                    models, test_cases, refs, bench.config.inference_batch
                )
                write_report(bench.root / "reports", rows)
                job.set_progress(1.0, "report written")

            return jobs.submit("assess", body).as_dict()

    @app.get("/assess/report")
    def assess_report():
        path = bench.root / "reports" / "report.json"
        if not path.exists():
            raise HTTPException(404, "no assessment report computed yet")
        return json.loads(path.read_text())

    # round-state errors raised by the engine inside request handlers
    @app.exception_handler(RoundStateError)
    def _round_state(_, exc):
        from fastapi.responses import JSONResponse

        return JSONResponse(status_code=409, content={"detail": str(exc)})

    return app


def run_server(config: ServiceConfig) -> None:
    import uvicorn

    bench = Workbench(config.root)
    app = create_app(bench, eager_jobs=config.eager_jobs)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
