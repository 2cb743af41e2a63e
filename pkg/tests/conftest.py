"""Shared fixtures: tiny synthetic corpora and a pre-trained workbench.

Heavy artifacts (corpus, initial training) are built once per session; tests
that mutate round state work on per-test copies of the trained state
directory so ordering never matters.
"""
from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from dialbench.experiment import build_corpus
from dialbench.rounds import LoopConfig, Workbench, run_initial_round
from dialbench.synthetic import SyntheticCaseSpec, generate_synthetic_case

torch.set_num_threads(1)

TINY_LOOP = dict(
    patch_size=32,
    base_channels=2,
    depth=2,
    batch_size=4,
    epochs=2,
    finetune_epochs=1,
    inference_batch=64,
    rng_seed=11,
)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(out, n_train=2, n_test=1, slide_size=1024, seed=11,
                 annotation_fraction=0.08)
    return out


@pytest.fixture(scope="session")
def trained_root(tiny_corpus, tmp_path_factory) -> Path:
    """A workbench whose initial round has been trained (kept pristine)."""
    root = tmp_path_factory.mktemp("bench") / "main"
    bench = Workbench(root, LoopConfig(**TINY_LOOP), corpus_dir=tiny_corpus)
    run_initial_round(bench)
    return root


@pytest.fixture
def bench(trained_root, tiny_corpus, tmp_path) -> Workbench:
    """Per-test mutable copy of the trained workbench."""
    root = tmp_path / "bench"
    root.mkdir()
    shutil.copytree(trained_root / "state", root / "state")
    return Workbench(root, corpus_dir=tiny_corpus)


@pytest.fixture(scope="session")
def micro_slide():
    """One deterministic 1024x1024 slide plus its full ground truth."""
    spec = SyntheticCaseSpec(
        case_id="micro", n_slides=1, target_necrosis_ratio=0.5,
        rng_seed=5, slide_size=(1024, 1024),
    )
    slides, truths, ratio = generate_synthetic_case(spec)
    return slides[0], truths[0], ratio


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
