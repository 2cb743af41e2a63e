"""Interactive-learning round engine: train, segment, correct, finetune.

A :class:`Workbench` owns a corpus directory (slides, case table, initial
annotations, optional ground truth) and a state directory (round state,
correction masks, patch stores, checkpoints, per-model predictions).  The
module-level operations drive the loop:

    run_initial_round   extract/balance/split/train 30 epochs @ 5e-5,
                        checkpoint, segment the training slides
    submit_corrections  persist round-(k+1) masks (or declare satisfaction)
    finetune_round      extract correction patches, apply single/double
                        weighting, refresh loss weights from cumulative
                        counts, finetune 10 epochs @ 5e-6, re-segment
    oracle_correct      scripted annotator: fixes the largest mislabeled
                        connected components against synthetic ground truth

Branching experiments (one parent, several finetunes) use
``Workbench.fork``: the state directory is copied while the corpus is
shared, so sibling models keep independent lineages over the same data.
"""
from __future__ import annotations

import json
import shutil
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .checkpoints import file_sha256, load_checkpoint, save_checkpoint
from .classes import N_CLASSES, UNLABELED
from .dmmn import DmmnConfig, DmmnModel
from .inference import SegmentationMap, segment_slide
from .patches import (
    DEFAULT_DEFORM_ALPHA,
    DEFAULT_KMAX,
    LossWeights,
    PatchRecord,
    balance_by_deformation,
    compute_weights,
    elastic_deform,
    extract_patches,
    split_by_case,
    stable_seed,
)
from .patch_store import read_patches, write_patches
from .training import TrainConfig, train
from .wsi import LabelMask, WsiPyramid, class_pixel_counts, load_slide, merge_masks

AWAITING_TRAINING = "awaiting_training"
AWAITING_CORRECTION = "awaiting_correction"
SATISFIED = "satisfied"

SINGLE = "single"
DOUBLE = "double"


class RoundStateError(RuntimeError):
    """An operation was attempted in the wrong protocol state."""


@dataclass(frozen=True)
class CorrectionPolicy:
    """single: correction patches only; double: plus one elastic-deformed
    copy of each correction patch."""

    weighting: str

    def __post_init__(self):
        if self.weighting not in (SINGLE, DOUBLE):
            raise ValueError(f"unknown weighting {self.weighting!r}")

    @property
    def duplicates(self) -> int:
        return 1 if self.weighting == DOUBLE else 0


@dataclass(frozen=True)
class LoopConfig:
    patch_size: int = 256
    base_channels: int = 16
    depth: int = 4
    batch_size: int = 8
    epochs: int = 30
    finetune_epochs: int = 10
    learning_rate: float = 5e-5
    finetune_lr: float = 5e-6
    momentum: float = 0.99
    weight_decay: float = 1e-4
    validation_fraction: float = 0.2
    kmax: int = DEFAULT_KMAX
    deform_alpha: float = DEFAULT_DEFORM_ALPHA
    inference_batch: int = 32
    rng_seed: int = 0

    def model_config(self) -> DmmnConfig:
        return DmmnConfig(
            patch_size=self.patch_size,
            base_channels=self.base_channels,
            depth=self.depth,
            rng_seed=stable_seed(self.rng_seed, "init"),
        )


@dataclass
class RoundRecord:
    """Bookkeeping for one completed training (initial or finetune)."""

    round_index: int
    model_id: str
    checkpoint_hash: str
    policy: str | None
    counts: list[int]
    weights: list[float]
    patch_count: int
    val_cases: list[str]
    val_miou: float
    history: dict


@dataclass
class RoundState:
    status: str = AWAITING_TRAINING
    round_index: int = 0
    rounds: list[RoundRecord] = field(default_factory=list)
    pending_round: int | None = None
    corrections: dict[str, list[str]] = field(default_factory=dict)

    @property
    def lineage(self) -> list[str]:
        return [r.checkpoint_hash for r in self.rounds]

    @property
    def current_model(self) -> str | None:
        return self.rounds[-1].model_id if self.rounds else None

    def cumulative_counts(self) -> np.ndarray:
        total = np.zeros(N_CLASSES, dtype=np.int64)
        for r in self.rounds:
            total += np.asarray(r.counts, dtype=np.int64)
        return total

    def as_dict(self) -> dict:
        return {
            "status": self.status,
            "round_index": self.round_index,
            "pending_round": self.pending_round,
            "corrections": self.corrections,
            "rounds": [asdict(r) for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RoundState":
        return cls(
            status=payload["status"],
            round_index=payload["round_index"],
            pending_round=payload.get("pending_round"),
            corrections=payload.get("corrections", {}),
            rounds=[RoundRecord(**r) for r in payload.get("rounds", [])],
        )


@dataclass(frozen=True)
class CaseInfo:
    case_id: str
    slides: tuple[str, ...]
    split: str  # "train" | "test"
    r_path: float | None = None


def model_name(round_index: int, policy: str | None) -> str:
    """model1 for the initial round; the first correction round keeps the
    a/b suffix distinguishing single from double weighting (matching the
    usual Model2a/Model2b comparison); later rounds drop the suffix."""
    if round_index == 0:
        return "model1"
    if round_index == 1:
        return f"model2{'a' if policy == SINGLE else 'b'}"
    return f"model{round_index + 1}"


class Workbench:
    """Filesystem-backed corpus + round state, shared by CLI and service."""

    def __init__(
        self,
        root: str | Path,
        config: LoopConfig | None = None,
        corpus_dir: str | Path | None = None,
    ):
        self.root = Path(root)
        self.corpus_dir = Path(corpus_dir) if corpus_dir else self.root / "corpus"
        self.state_dir = self.root / "state"
        for sub in ("checkpoints", "patches", "predictions", "masks"):
            (self.state_dir / sub).mkdir(parents=True, exist_ok=True)
        cfg_path = self.state_dir / "config.json"
        if config is not None:
            cfg_path.write_text(json.dumps(asdict(config), indent=1))
            self.config = config
        elif cfg_path.exists():
            self.config = LoopConfig(**json.loads(cfg_path.read_text()))
        else:
            self.config = LoopConfig()
            cfg_path.write_text(json.dumps(asdict(self.config), indent=1))
        self._slide_cache: OrderedDict[str, WsiPyramid] = OrderedDict()
        self._cases: dict[str, CaseInfo] | None = None

    # ------------------------------------------------------------- corpus
    def cases(self) -> dict[str, CaseInfo]:
        if self._cases is None:
            table = json.loads((self.corpus_dir / "cases.json").read_text())
            self._cases = {
                cid: CaseInfo(
                    case_id=cid,
                    slides=tuple(info["slides"]),
                    split=info["split"],
                    r_path=info.get("r_path"),
                )
                for cid, info in table["cases"].items()
            }
        return self._cases

    def case_of(self, slide_id: str) -> str:
        for cid, info in self.cases().items():
            if slide_id in info.slides:
                return cid
        raise KeyError(f"slide {slide_id!r} not in corpus")

    def slide_ids(self, split: str | None = None) -> list[str]:
        out = []
        for info in sorted(self.cases().values(), key=lambda c: c.case_id):
            if split is None or info.split == split:
                out.extend(info.slides)
        return out

    def load_slide(self, slide_id: str) -> WsiPyramid:
        if slide_id in self._slide_cache:
            self._slide_cache.move_to_end(slide_id)
            return self._slide_cache[slide_id]
        slide = load_slide(self.corpus_dir / "slides" / slide_id)
        self._slide_cache[slide_id] = slide
        while len(self._slide_cache) > 16:
            self._slide_cache.popitem(last=False)
        return slide

    def truth_mask(self, slide_id: str) -> LabelMask:
        return LabelMask.load(self.corpus_dir / "truth" / f"{slide_id}.mask", slide_id)

    def has_truth(self) -> bool:
        return (self.corpus_dir / "truth").is_dir()

    # -------------------------------------------------------------- masks
    def mask_dir(self, round_index: int) -> Path:
        if round_index == 0:
            return self.corpus_dir / "masks" / "round_000"
        return self.state_dir / "masks" / f"round_{round_index:03d}"

    def load_round_masks(self, round_index: int) -> dict[str, LabelMask]:
        d = self.mask_dir(round_index)
        if not d.is_dir():
            return {}
        out = {}
        for path in sorted(d.glob("*.mask")):
            sid = path.stem
            out[sid] = LabelMask.load(path, sid)
        return out

    def cumulative_mask(self, slide_id: str, through_round: int) -> LabelMask | None:
        stack = []
        for k in range(through_round + 1):
            path = self.mask_dir(k) / f"{slide_id}.mask"
            if path.exists():
                stack.append(LabelMask.load(path, slide_id))
        return merge_masks(stack) if stack else None

    # -------------------------------------------------------------- state
    @property
    def state_path(self) -> Path:
        return self.state_dir / "round_state.json"

    def load_state(self) -> RoundState:
        if not self.state_path.exists():
            return RoundState()
        return RoundState.from_dict(json.loads(self.state_path.read_text()))

    def save_state(self, state: RoundState) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state.as_dict(), indent=1))
        tmp.replace(self.state_path)

    # ------------------------------------------------------------ patches
    def patch_store_path(self, round_index: int) -> Path:
        return self.state_dir / "patches" / f"round_{round_index:03d}.pats"

    def save_round_patches(self, round_index: int, patches: list[PatchRecord]) -> None:
        write_patches(self.patch_store_path(round_index), patches, self.config.patch_size)

    def load_round_patches(self, round_index: int) -> list[PatchRecord]:
        return read_patches(self.patch_store_path(round_index))

    def cumulative_patches(self, through_round: int) -> list[PatchRecord]:
        out: list[PatchRecord] = []
        for k in range(through_round + 1):
            if self.patch_store_path(k).exists():
                out.extend(self.load_round_patches(k))
        return out

    # ------------------------------------------- checkpoints, predictions
    def checkpoint_path(self, model_id: str) -> Path:
        return self.state_dir / "checkpoints" / f"{model_id}.ckpt"

    def load_model(self, model_id: str) -> DmmnModel:
        model, _ = load_checkpoint(self.checkpoint_path(model_id))
        model.eval()
        return model

    def prediction_path(self, model_id: str, slide_id: str) -> Path:
        return self.state_dir / "predictions" / model_id / f"{slide_id}.seg"

    def load_prediction(self, model_id: str, slide_id: str) -> SegmentationMap:
        return SegmentationMap.load(
            self.prediction_path(model_id, slide_id), slide_id, model_id
        )

    # --------------------------------------------------------------- misc
    def fork(self, name: str) -> "Workbench":
        """Copy round state into a sibling root sharing the same corpus."""
        target = self.root.parent / name
        if target.exists():
            raise FileExistsError(f"fork target {target} already exists")
        target.mkdir(parents=True)
        shutil.copytree(self.state_dir, target / "state")
        return Workbench(target, corpus_dir=self.corpus_dir)


# ---------------------------------------------------------------- helpers
def _patch_label_counts(patches: list[PatchRecord]) -> np.ndarray:
    counts = np.zeros(N_CLASSES, dtype=np.int64)
    for p in patches:
        labeled = p.target[p.target != UNLABELED]
        counts += np.bincount(labeled.ravel(), minlength=N_CLASSES)[:N_CLASSES]
    return counts


def _segment_training_slides(bench: Workbench, model: DmmnModel, model_id: str,
                             progress=None) -> None:
    out_dir = bench.state_dir / "predictions" / model_id
    out_dir.mkdir(parents=True, exist_ok=True)
    sids = bench.slide_ids("train")
    for i, sid in enumerate(sids):
        seg = segment_slide(model, bench.load_slide(sid), bench.config.inference_batch)
        seg.save(out_dir / f"{sid}.seg")
        if progress is not None:
            progress(i + 1, len(sids))


def _train_and_record(
    bench: Workbench,
    state: RoundState,
    patches: list[PatchRecord],
    round_counts: np.ndarray,
    policy: str | None,
    parent_model: DmmnModel | None,
    parent_hash: str | None,
    pinned_train: set[str] | None,
    progress=None,
    segment: bool = True,
) -> RoundState:
    cfg = bench.config
    k = len(state.rounds)  # round being trained
    cumulative = state.cumulative_counts() + round_counts
    weights = compute_weights(cumulative)

    case_of = {sid: bench.case_of(sid) for sid in bench.slide_ids("train")}
    # corrections are added to the cumulative training set: finetuning on the
    # fresh patches alone would skew the data toward whatever classes were
    # just corrected, while the earlier rounds' patches anchor the rest
    pool = bench.cumulative_patches(k - 1) + patches
    split = split_by_case(
        pool, case_of, target_fraction=cfg.validation_fraction, pinned_train=pinned_train
    )
    if not split.train_patches:
        raise RoundStateError("no training patches on the training side of the split")

    train_cfg = TrainConfig(
        learning_rate=cfg.learning_rate if k == 0 else cfg.finetune_lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        epochs=cfg.epochs if k == 0 else cfg.finetune_epochs,
        batch_size=cfg.batch_size,
        loss_weights=weights,
        rng_seed=stable_seed(cfg.rng_seed, "train", k),
    )
    model = parent_model if parent_model is not None else DmmnModel(cfg.model_config())
    best, history = train(model, split, train_cfg, progress=progress)

    mid = model_name(k, policy)
    ckpt_hash = save_checkpoint(
        bench.checkpoint_path(mid),
        best,
        parent_hash=parent_hash,
        meta={
            "model_id": mid,
            "round_index": k,
            "policy": policy,
            "weights": list(weights.w),
            "counts": [int(c) for c in round_counts],
            "history": history.as_dict(),
        },
    )
    bench.save_round_patches(k, patches)
    if segment:
        _segment_training_slides(bench, best, mid)

    state.rounds.append(
        RoundRecord(
            round_index=k,
            model_id=mid,
            checkpoint_hash=ckpt_hash,
            policy=policy,
            counts=[int(c) for c in round_counts],
            weights=list(weights.w),
            patch_count=len(patches),
            val_cases=sorted(split.val_cases),
            val_miou=max(s.val_miou for s in history.stats),
            history=history.as_dict(),
        )
    )
    state.round_index = k
    state.status = AWAITING_CORRECTION
    state.pending_round = None
    bench.save_state(state)
    return state


# ------------------------------------------------------------- operations
def run_initial_round(bench: Workbench, progress=None) -> RoundState:
    """Extract, balance, split, train Model1, segment the training slides."""
    state = bench.load_state()
    if state.rounds or state.status != AWAITING_TRAINING:
        raise RoundStateError(f"initial round already ran (status {state.status})")
    cfg = bench.config
    masks = bench.load_round_masks(0)
    train_ids = [sid for sid in bench.slide_ids("train") if sid in masks]
    if not train_ids or not any(masks[s].labeled_count for s in train_ids):
        raise RoundStateError("no initial annotations found")

    extracted: list[PatchRecord] = []
    for sid in train_ids:
        extracted.extend(
            extract_patches(bench.load_slide(sid), masks[sid], patch_size=cfg.patch_size)
        )
    if not extracted:
        raise RoundStateError("initial annotations too sparse: no patch cleared the 1% rule")
    balanced = balance_by_deformation(
        extracted,
        seed=stable_seed(cfg.rng_seed, "round", 0),
        k_max=cfg.kmax,
        alpha=cfg.deform_alpha,
    )
    duplicates = balanced[len(extracted):]
    counts = class_pixel_counts([masks[s] for s in train_ids])
    counts = counts + _patch_label_counts(duplicates)
    return _train_and_record(
        bench, state, balanced, counts,
        policy=None, parent_model=None, parent_hash=None,
        pinned_train=None, progress=progress,
    )


def submit_corrections(
    bench: Workbench, masks: list[LabelMask], satisfy: bool = False
) -> RoundState:
    """Persist round-(k+1) correction masks, or finalize with ``satisfy``."""
    state = bench.load_state()
    if state.status != AWAITING_CORRECTION:
        raise RoundStateError(f"cannot accept corrections while {state.status}")
    if satisfy:
        if masks:
            raise RoundStateError("satisfy must be submitted without corrections")
        state.status = SATISFIED
        bench.save_state(state)
        return state
    if not masks:
        raise RoundStateError("empty correction set (use satisfy to finish)")
    k1 = state.round_index + 1
    if state.pending_round is not None:
        raise RoundStateError(f"corrections for round {k1} already submitted")
    train_ids = set(bench.slide_ids("train"))
    seen = set()
    for m in masks:
        if m.round != k1:
            raise ValueError(f"mask for slide {m.slide_id} has round {m.round}, expected {k1}")
        if m.slide_id not in train_ids:
            raise ValueError(f"slide {m.slide_id} is not a training slide")
        if m.slide_id in seen:
            raise ValueError(f"duplicate correction mask for slide {m.slide_id}")
        if m.labeled_count == 0:
            raise ValueError(f"correction mask for slide {m.slide_id} labels no pixels")
        seen.add(m.slide_id)
    out_dir = bench.mask_dir(k1)
    out_dir.mkdir(parents=True, exist_ok=True)
    for m in masks:
        m.save(out_dir / f"{m.slide_id}.mask")
    state.pending_round = k1
    state.corrections[str(k1)] = sorted(seen)
    bench.save_state(state)
    return state


def finetune_round(
    bench: Workbench,
    policy: CorrectionPolicy,
    parent_model_id: str | None = None,
    progress=None,
    segment: bool = True,
) -> RoundState:
    """Finetune the designated parent on the pending round's corrections.

    ``segment=False`` skips the post-training sweep over the training slides;
    callers that will never correct this model again (terminal forks in a
    scripted experiment) use it to avoid paying for predictions nobody reads.
    """
    state = bench.load_state()
    k1 = state.round_index + 1
    if state.status != AWAITING_CORRECTION or state.pending_round != k1:
        raise RoundStateError("no pending corrections to finetune on")
    cfg = bench.config
    corr = bench.load_round_masks(k1)
    patches: list[PatchRecord] = []
    for sid in sorted(corr):
        target = bench.cumulative_mask(sid, k1)
        patches.extend(
            extract_patches(
                bench.load_slide(sid), corr[sid],
                patch_size=cfg.patch_size, target_mask=target,
            )
        )
    if not patches:
        raise RoundStateError("corrections too sparse: no patch cleared the 1% rule")
    duplicates = [
        elastic_deform(
            p, seed=stable_seed(cfg.rng_seed, "double", k1, i), alpha=cfg.deform_alpha
        )
        for _ in range(policy.duplicates)
        for i, p in enumerate(patches)
    ]
    counts = class_pixel_counts(list(corr.values())) + _patch_label_counts(duplicates)

    parent_id = parent_model_id or state.current_model
    parent, _ = load_checkpoint(bench.checkpoint_path(parent_id))
    parent_hash = file_sha256(bench.checkpoint_path(parent_id))
    corrected_cases = {bench.case_of(sid) for sid in corr}
    return _train_and_record(
        bench, state, patches + duplicates, counts,
        policy=policy.weighting, parent_model=parent, parent_hash=parent_hash,
        pinned_train=corrected_cases, progress=progress, segment=segment,
    )


def oracle_correct(
    bench: Workbench, budget_pixels: int | None = None, margin: int = 0
) -> list[LabelMask]:
    """Scripted annotator: label mislabeled 8-connected regions with ground
    truth, largest first within each slide, balancing corrected pixels across
    slides until the pixel budget is met or errors run out.

    ``margin`` grows each corrected region by that many pixels before
    labeling, the way a human repainting a region also covers its rim.  The
    rim pixels mostly carry labels the model already agrees with, which
    matters for finetuning: corrections drawn only from disagreement push
    every gradient step in the same direction, while the rim supplies the
    counterexamples that stop the model from overshooting.  The budget counts
    disagreeing pixels only; the rim rides along for free."""
    state = bench.load_state()
    if state.status != AWAITING_CORRECTION:
        raise RoundStateError(f"cannot correct while {state.status}")
    model_id = state.current_model
    k1 = state.round_index + 1
    eight = np.ones((3, 3), dtype=int)
    queues: dict[str, list[tuple[int, int]]] = {}  # sid -> [(size, comp)]
    label_arrays: dict[str, np.ndarray] = {}
    for sid in bench.slide_ids("train"):
        truth = bench.truth_mask(sid)
        pred = bench.load_prediction(model_id, sid)
        diff = pred.data != truth.data
        labels, n = ndimage.label(diff, structure=eight)
        if n == 0:
            continue
        label_arrays[sid] = labels
        sizes = np.bincount(labels.ravel())
        queues[sid] = sorted(
            ((int(sizes[comp]), comp) for comp in range(1, n + 1)),
            key=lambda c: (-c[0], c[1]),
        )

    # Always take the next-largest component from whichever slide has the
    # fewest corrected pixels so far.  Spending the whole budget on the one
    # slide with the biggest blobs starves the finetune pool of context
    # diversity; balancing across slides is also how several annotators
    # splitting the work would behave.
    selected: dict[str, list[int]] = {}
    taken = {sid: 0 for sid in queues}
    cursor = {sid: 0 for sid in queues}
    total = 0
    while not (budget_pixels is not None and total >= budget_pixels):
        live = [sid for sid in queues if cursor[sid] < len(queues[sid])]
        if not live:
            break
        sid = min(live, key=lambda s: (taken[s], s))
        size, comp = queues[sid][cursor[sid]]
        cursor[sid] += 1
        selected.setdefault(sid, []).append(comp)
        taken[sid] += size
        total += size
    masks = []
    for sid in sorted(selected):
        truth = bench.truth_mask(sid)
        keep = np.isin(label_arrays[sid], selected[sid])
        if margin > 0:
            keep = ndimage.distance_transform_edt(~keep) <= margin
        data = np.where(keep, truth.data, UNLABELED).astype(np.uint8)
        masks.append(LabelMask(slide_id=sid, round=k1, data=data))
    return masks
