"""SGD training/finetuning loop with epoch-level validation selection.

Augmentation (train split only): rotations by multiples of 90 degrees,
horizontal/vertical flips, and per-channel brightness/contrast jitter of up
to +-10%.  Spatial transforms are applied identically to all three
magnifications and the target; color jitter touches only the imagery.  All
randomness comes from one numpy generator seeded by the config, so runs are
bit-reproducible in single-threaded mode.

After every epoch the model is scored by mean IOU on the validation patches
and the best-scoring weights are returned (ties resolved to the earliest
epoch).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch

from .dmmn import DmmnModel, IouAccumulator, masked_weighted_ce
from .patches import DatasetSplit, LossWeights, PatchRecord


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes NaN/inf during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    momentum: float = 0.99
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 8
    loss_weights: LossWeights = field(default_factory=lambda: LossWeights((1.0,) * 7))
    rotation: bool = True
    flips: bool = True
    color_jitter: bool = True
    # Guard against momentum blow-ups on tiny batches; typical step norms sit
    # well below this, so only pathological spikes are rescaled.
    max_grad_norm: float = 20.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be > 0")


FINETUNE_LR = 5e-6
FINETUNE_EPOCHS = 10


def finetune_config(base: TrainConfig, **overrides) -> TrainConfig:
    """Derive the finetuning schedule (10x lower rate, 10 epochs)."""
    return replace(
        base, learning_rate=FINETUNE_LR, epochs=FINETUNE_EPOCHS, **overrides
    )


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_miou: float


@dataclass
class TrainHistory:
    learning_rate: float
    momentum: float
    weight_decay: float
    epochs: int
    batch_size: int
    stats: list[EpochStats]
    best_epoch: int = -1

    def as_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "best_epoch": self.best_epoch,
            "stats": [vars(s) for s in self.stats],
        }


def _spatial(arr: np.ndarray, k: int, hflip: bool, vflip: bool) -> np.ndarray:
    out = np.rot90(arr, k, axes=(0, 1))
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment_patch(
    patch: PatchRecord,
    rng: np.random.Generator,
    *,
    rotation: bool = True,
    flips: bool = True,
    color_jitter: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns float32 HWC imagery in [0,1] (all three magnifications
    co-transformed) and the matching uint8 target."""
    k = int(rng.integers(0, 4)) if rotation else 0
    hf = bool(rng.integers(0, 2)) if flips else False
    vf = bool(rng.integers(0, 2)) if flips else False
    if color_jitter:
        contrast = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
        brightness = rng.uniform(0.9, 1.1, size=3).astype(np.float32)
    else:
        contrast = brightness = np.ones(3, dtype=np.float32)
    imgs = []
    for img in (patch.img20, patch.img10, patch.img5):
        arr = _spatial(img, k, hf, vf).astype(np.float32) / 255.0
        arr = np.clip(((arr - 0.5) * contrast + 0.5) * brightness, 0.0, 1.0)
        imgs.append(arr)
    return imgs[0], imgs[1], imgs[2], _spatial(patch.target, k, hf, vf)


def _to_batch(samples: list[tuple[np.ndarray, ...]]) -> tuple[torch.Tensor, ...]:
    x20 = torch.from_numpy(np.stack([s[0] for s in samples])).permute(0, 3, 1, 2)
    x10 = torch.from_numpy(np.stack([s[1] for s in samples])).permute(0, 3, 1, 2)
    x5 = torch.from_numpy(np.stack([s[2] for s in samples])).permute(0, 3, 1, 2)
    t = torch.from_numpy(np.stack([s[3] for s in samples]).astype(np.int64))
    return x20, x10, x5, t


def evaluate_miou(model: DmmnModel, patches: list[PatchRecord], batch_size: int = 8) -> float:
    if not patches:
        raise ValueError("no validation patches")
    acc = IouAccumulator(model.config.n_classes)
    model.eval()
    with torch.no_grad():
        for i in range(0, len(patches), batch_size):
            chunk = patches[i : i + batch_size]
            samples = [
                (
                    p.img20.astype(np.float32) / 255.0,
                    p.img10.astype(np.float32) / 255.0,
                    p.img5.astype(np.float32) / 255.0,
                    p.target,
                )
                for p in chunk
            ]
            x20, x10, x5, t = _to_batch(samples)
            pred = model(x20, x10, x5).argmax(dim=1).numpy().astype(np.uint8)
            acc.update(pred, t.numpy().astype(np.uint8))
    return acc.miou()


def train(
    model: DmmnModel,
    split: DatasetSplit,
    config: TrainConfig,
    progress: Callable[[EpochStats, int], None] | None = None,
) -> tuple[DmmnModel, TrainHistory]:
    """Optimize ``model`` in place and return a fresh model carrying the
    best-validation-epoch weights, plus the per-epoch history."""
    if not split.train_patches:
        raise ValueError("empty training split")
    if not split.val_patches:
        raise ValueError("empty validation split")
    rng = np.random.default_rng(config.rng_seed)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    w = torch.from_numpy(config.loss_weights.as_array())
    history = TrainHistory(
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        epochs=config.epochs,
        batch_size=config.batch_size,
        stats=[],
    )
    best_miou = -1.0
    best_state: dict[str, torch.Tensor] = {}
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = rng.permutation(len(split.train_patches))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            samples = [
                augment_patch(
                    split.train_patches[j],
                    rng,
                    rotation=config.rotation,
                    flips=config.flips,
                    color_jitter=config.color_jitter,
                )
                for j in idx
            ]
            x20, x10, x5, t = _to_batch(samples)
            loss = masked_weighted_ce(model(x20, x10, x5), t, w)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            opt.step()
            losses.append(float(loss.detach()))
        val = evaluate_miou(model, split.val_patches, config.batch_size)
        stats = EpochStats(epoch=epoch, train_loss=float(np.mean(losses)), val_miou=val)
        history.stats.append(stats)
        if val > best_miou:
            best_miou = val
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.best_epoch = epoch
        if progress is not None:
            progress(stats, config.epochs)
    best = DmmnModel(model.config)
    best.load_state_dict(best_state)
    best.eval()
    return best, history
