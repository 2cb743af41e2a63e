"""Closed-loop protocol experiment on synthetic corpora.

For each seed: generate a fresh corpus (training cases with sparse, biased
initial annotation + fully-referenced test cases), run the interactive
loop — Model1 (initial training), Model2a (single-weighted finetune),
Model2b (double-weighted finetune), Model3 (double-weighted finetune of
Model2b on a second correction round) — and score every model's case-level
necrosis-ratio error on the held-out test cases.

The initial annotation deliberately under-labels the necrotic classes, so
Model1 maps those textures onto their lookalikes (viable tumor and normal
bone) and underestimates the ratio; the oracle's corrections then inject
exactly the missing evidence, which is what the protocol claims to exploit.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .assess import model_comparison, write_report
from .patches import stable_seed
from .rounds import (
    CorrectionPolicy,
    LoopConfig,
    Workbench,
    finetune_round,
    oracle_correct,
    run_initial_round,
    submit_corrections,
)
from .synthetic import SyntheticCaseSpec, generate_synthetic_case, sparse_annotation
from .wsi import save_slide

# classes the simulated annotator (initially) neglects: the necrotic
# classes and cartilage get far less than their share of round-0 labels, so
# the first model systematically misreads necrotic regions; the corrections
# later supply exactly that evidence.  Necrosis-without-bone may receive no
# round-0 labels at all (validation mIoU only scores classes present in the
# target, so an absent class is tolerated).
DEFAULT_ANNOTATION_BIAS: dict[int, float] = {
    0: 1.0, 1: 0.12, 2: 0.02, 3: 1.0, 4: 1.0, 5: 0.4, 6: 1.0,
}


@dataclass(frozen=True)
class ExperimentConfig:
    n_train_cases: int = 6
    n_test_cases: int = 8
    slide_size: int = 2048
    patch_size: int = 64
    base_channels: int = 4
    depth: int = 3
    batch_size: int = 4
    epochs: int = 30
    finetune_epochs: int = 10
    annotation_fraction: float = 0.10
    correction_budget: int = 1_200_000
    correction_margin: int = 32
    validation_fraction: float = 0.2
    inference_batch: int = 64
    seeds: tuple[int, ...] = (0, 1, 2)

    def loop_config(self, seed: int) -> LoopConfig:
        return LoopConfig(
            patch_size=self.patch_size,
            base_channels=self.base_channels,
            depth=self.depth,
            batch_size=self.batch_size,
            epochs=self.epochs,
            finetune_epochs=self.finetune_epochs,
            validation_fraction=self.validation_fraction,
            inference_batch=self.inference_batch,
            rng_seed=seed,
        )


def build_corpus(
    corpus_dir: str | Path,
    n_train: int,
    n_test: int,
    slide_size: int,
    seed: int,
    annotation_fraction: float = 0.10,
    annotation_bias: dict[int, float] | None = None,
) -> dict:
    """Generate slides, ground truth, sparse round-0 annotation and the case
    table; returns the cases.json payload."""
    corpus = Path(corpus_dir)
    (corpus / "slides").mkdir(parents=True, exist_ok=True)
    (corpus / "truth").mkdir(exist_ok=True)
    (corpus / "masks" / "round_000").mkdir(parents=True, exist_ok=True)
    bias = DEFAULT_ANNOTATION_BIAS if annotation_bias is None else annotation_bias

    cases: dict[str, dict] = {}
    train_ratios = np.linspace(0.2, 0.8, n_train)
    test_ratios = np.linspace(0.15, 0.85, n_test)
    specs = [("train", i, float(train_ratios[i])) for i in range(n_train)]
    specs += [("test", i, float(test_ratios[i])) for i in range(n_test)]
    for split, i, ratio in specs:
        case_id = f"{split}{i:02d}"
        spec = SyntheticCaseSpec(
            case_id=case_id,
            n_slides=1,
            target_necrosis_ratio=ratio,
            rng_seed=stable_seed(seed, "case", case_id),
            slide_size=(slide_size, slide_size),
        )
        slides, truths, achieved = generate_synthetic_case(spec)
        for slide, truth in zip(slides, truths):
            save_slide(slide, corpus / "slides" / slide.slide_id)
            truth.save(corpus / "truth" / f"{slide.slide_id}.mask")
            if split == "train":
                rng = np.random.default_rng(stable_seed(seed, "annotate", slide.slide_id))
                sparse = sparse_annotation(
                    truth, annotation_fraction, rng, class_weights=bias,
                    radius_range=(80, 160),
                )
                sparse.save(corpus / "masks" / "round_000" / f"{slide.slide_id}.mask")
        cases[case_id] = {
            "slides": [s.slide_id for s in slides],
            "split": split,
            "r_path": achieved,
        }
    payload = {"cases": cases}
    (corpus / "cases.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
    return payload


@dataclass
class SeedResult:
    seed: int
    errors: dict[str, float]
    wall_seconds: float
    check_a: bool = False
    check_b: bool = False

    def evaluate(self) -> None:
        e1, e2a, e2b = self.errors["model1"], self.errors["model2a"], self.errors["model2b"]
        self.check_a = (e2b <= e2a) or (e2b <= e1 - 0.02)
        self.check_b = e2b <= e1


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list[SeedResult] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def mean_errors(self) -> dict[str, float]:
        keys = self.seeds[0].errors.keys()
        return {
            k: float(np.mean([s.errors[k] for s in self.seeds])) for k in keys
        }

    @property
    def all_a(self) -> bool:
        return all(s.check_a for s in self.seeds)

    @property
    def majority_b(self) -> bool:
        return sum(s.check_b for s in self.seeds) * 2 > len(self.seeds)

    @property
    def final_error_ok(self) -> bool:
        return self.mean_errors["model2b"] <= 0.10

    def passed(self) -> bool:
        return self.all_a and self.majority_b and self.final_error_ok

    def as_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "wall_seconds": self.wall_seconds,
            "mean_errors": self.mean_errors,
            "checks": {
                "per_seed_improvement": self.all_a,
                "majority_not_worse_than_model1": self.majority_b,
                "mean_model2b_error_at_most_0.10": self.final_error_ok,
                "passed": self.passed(),
            },
            "seeds": [
                {
                    "seed": s.seed,
                    "errors": s.errors,
                    "wall_seconds": s.wall_seconds,
                    "check_a": s.check_a,
                    "check_b": s.check_b,
                }
                for s in self.seeds
            ],
        }


def run_seed(work_dir: str | Path, seed: int, cfg: ExperimentConfig) -> SeedResult:
    """One full protocol run; returns per-model test error rates."""
    torch.set_num_threads(1)
    t0 = time.time()
    work = Path(work_dir)
    corpus_dir = work / "corpus"
    build_corpus(
        corpus_dir,
        cfg.n_train_cases,
        cfg.n_test_cases,
        cfg.slide_size,
        seed=stable_seed(seed, "corpus"),
        annotation_fraction=cfg.annotation_fraction,
    )
    main = Workbench(work / "main", cfg.loop_config(seed), corpus_dir=corpus_dir)
    run_initial_round(main)
    corrections = oracle_correct(main, cfg.correction_budget, margin=cfg.correction_margin)
    submit_corrections(main, corrections)

    # terminal models (2a, model3) are never corrected again, so their
    # train-slide segmentation sweeps are skipped; 2b's predictions feed the
    # second oracle round and must be produced
    fork_a = main.fork("2a")
    finetune_round(fork_a, CorrectionPolicy("single"), segment=False)
    fork_b = main.fork("2b")
    finetune_round(fork_b, CorrectionPolicy("double"))

    second = oracle_correct(fork_b, cfg.correction_budget, margin=cfg.correction_margin)
    if second:  # on synthetic corpora the second round always finds errors
        submit_corrections(fork_b, second)
        finetune_round(fork_b, CorrectionPolicy("double"), segment=False)
    model3_id = fork_b.load_state().rounds[-1].model_id
    models = [
        ("model1", main.load_model("model1")),
        ("model2a", fork_a.load_model("model2a")),
        ("model2b", fork_b.load_model("model2b")),
        ("model3", fork_b.load_model(model3_id)),
    ]
    cases = main.cases()
    test_slides = {
        cid: [main.load_slide(s) for s in info.slides]
        for cid, info in cases.items()
        if info.split == "test"
    }
    refs = {cid: info.r_path for cid, info in cases.items() if info.split == "test"}
    rows = model_comparison(models, test_slides, refs, cfg.inference_batch)
    write_report(work / "reports", rows)
    result = SeedResult(
        seed=seed,
        errors={r.model_id: r.error for r in rows},
        wall_seconds=time.time() - t0,
    )
    result.evaluate()
    return result


def run_experiment(
    out_dir: str | Path, cfg: ExperimentConfig | None = None, progress=None
) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(config=cfg)
    t0 = time.time()
    for seed in cfg.seeds:
        seed_result = run_seed(out / f"seed{seed}", seed, cfg)
        result.seeds.append(seed_result)
        if progress is not None:
            progress(seed_result)
    result.wall_seconds = time.time() - t0
    (out / "summary.json").write_text(json.dumps(result.as_dict(), indent=1, sort_keys=True))
    return result
