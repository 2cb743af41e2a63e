"""Network architecture, loss/metric formulas, and gradient correctness.

The loss and mIOU oracles here are deliberately naive re-implementations
(per-pixel Python/numpy arithmetic) so agreement is meaningful.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dialbench.classes import UNLABELED
from dialbench.dmmn import (
    DmmnConfig,
    DmmnModel,
    IouAccumulator,
    center_crop_upsample,
    grad_check,
    masked_weighted_ce,
    miou,
    model_digest,
    normalize_images,
    parameter_count,
)

TINY = DmmnConfig(patch_size=16, base_channels=2, depth=2, rng_seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        DmmnConfig(patch_size=12, depth=3)  # not divisible by 2**depth
    with pytest.raises(ValueError):
        DmmnConfig(patch_size=60, depth=2)  # context crop misaligned
    with pytest.raises(ValueError):
        DmmnConfig(patch_size=2, depth=1)  # too small for context crops
    with pytest.raises(ValueError):
        DmmnConfig(patch_size=64, depth=0)
    with pytest.raises(ValueError):
        DmmnConfig(patch_size=64, base_channels=0)


def test_forward_shape_and_input_checks():
    model = DmmnModel(TINY)
    x = torch.rand(3, 3, 16, 16)
    out = model(x, x, x)
    assert out.shape == (3, 7, 16, 16)
    with pytest.raises(ValueError):
        model(torch.rand(3, 3, 8, 8), x, x)
    with pytest.raises(ValueError):
        model(x, x, torch.rand(3, 1, 16, 16))


@pytest.mark.parametrize(
    "kw",
    [
        dict(patch_size=16, base_channels=2, depth=2),
        dict(patch_size=64, base_channels=4, depth=2),
        dict(patch_size=64, base_channels=4, depth=3),
    ],
)
def test_parameter_count_matches_live_model(kw):
    cfg = DmmnConfig(**kw)
    live = sum(p.numel() for p in DmmnModel(cfg).parameters())
    assert parameter_count(cfg) == live


def test_parameter_count_hand_tally_p64_b4_d2():
    """Layer-by-layer tally for (P=64, B=4, D=2), worked out by hand.

    One stream (widths 4, 8; bottleneck 16), double conv = two 3x3 convs
    with bias plus two GroupNorm(1) affine pairs:
      enc0  3->4:   (108+4) + 8 + (144+4) + 8       = 276
      enc1  4->8:   (288+8) + 16 + (576+8) + 16     = 912
      botl  8->16:  (1152+16) + 32 + (2304+16) + 32 = 3552
      up1  16->8:   4*16*8 + 8                      = 520
      dec1 16->8 (+extra): see below
      up0   8->4:   4*8*4 + 4                       = 132
      dec0  8->4 (+extra): see below
    Context streams (extra=0):
      dec1 16->8:  (1152+8) + 16 + (576+8) + 16     = 1776
      dec0  8->4:  (288+4) + 8 + (144+4) + 8        = 456
      stream total  276+912+3552+520+1776+132+456   = 7624
    Fused stream extras are 8 and 16 channels at levels 0 and 1:
      dec1 32->8:  (2304+8) + 16 + (576+8) + 16     = 2928
      dec0 16->4:  (576+4) + 8 + (144+4) + 8        = 744
      fused total   276+912+3552+520+2928+132+744   = 9064
    Head reads 3B=12 fused channels: 12*7 + 7       = 91
    Total: 2*7624 + 9064 + 91                       = 24403
    """
    cfg = DmmnConfig(patch_size=64, base_channels=4, depth=2)
    assert parameter_count(cfg) == 24403
    assert sum(p.numel() for p in DmmnModel(cfg).parameters()) == 24403


def test_initialization_deterministic():
    a = DmmnModel(TINY)
    b = DmmnModel(TINY)
    c = DmmnModel(DmmnConfig(patch_size=16, base_channels=2, depth=2, rng_seed=1))
    assert model_digest(a) == model_digest(b)
    assert model_digest(a) != model_digest(c)


def test_forward_batch_independent():
    # GroupNorm statistics are per sample: running one sample alone or in a
    # batch must give identical logits.
    model = DmmnModel(TINY).eval()
    gen = torch.Generator().manual_seed(3)
    xs = [torch.rand(4, 3, 16, 16, generator=gen) for _ in range(3)]
    with torch.no_grad():
        full = model(*xs)
        solo = model(xs[0][:1], xs[1][:1], xs[2][:1])
    assert torch.allclose(full[:1], solo, atol=1e-6)


def test_center_crop_upsample_oracle():
    feat = torch.arange(64, dtype=torch.float32).reshape(1, 1, 8, 8)
    out = center_crop_upsample(feat, 2)
    assert out.shape == (1, 1, 8, 8)
    crop = feat[:, :, 2:6, 2:6]
    manual = crop.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    assert torch.equal(out, manual)
    out4 = center_crop_upsample(feat, 4)
    crop4 = feat[:, :, 3:5, 3:5]
    manual4 = crop4.repeat_interleave(4, dim=2).repeat_interleave(4, dim=3)
    assert torch.equal(out4, manual4)
    with pytest.raises(ValueError):
        center_crop_upsample(torch.zeros(1, 1, 6, 6), 4)


def test_normalize_images_layout():
    img = np.zeros((4, 6, 3), dtype=np.uint8)
    img[0, 0] = (255, 0, 51)
    (t,) = normalize_images(img)
    assert t.shape == (3, 4, 6)
    assert t.dtype == torch.float32
    assert t[0, 0, 0] == pytest.approx(1.0)
    assert t[2, 0, 0] == pytest.approx(51 / 255)


def brute_masked_ce(logits: np.ndarray, target: np.ndarray, weights: np.ndarray) -> float:
    """Reference loss: per-pixel softmax in float64, sum w[t]*nll / n_labeled."""
    n, c, h, w_ = logits.shape
    total = 0.0
    labeled = 0
    for i in range(n):
        for y in range(h):
            for x in range(w_):
                t = target[i, y, x]
                if t == UNLABELED:
                    continue
                z = logits[i, :, y, x].astype(np.float64)
                z = z - z.max()
                logp = z - math.log(np.exp(z).sum())
                total += weights[t] * (-logp[t])
                labeled += 1
    return total / labeled


def test_loss_matches_bruteforce_random():
    rng = np.random.default_rng(0)
    for _ in range(25):
        n, h, w_ = 2, 5, 4
        logits = rng.normal(0, 3, (n, 7, h, w_))
        target = rng.choice(
            np.array(list(range(7)) + [UNLABELED] * 3, dtype=np.uint8), (n, h, w_)
        )
        if np.all(target == UNLABELED):
            target[0, 0, 0] = 2
        weights = rng.uniform(0, 1, 7)
        got = masked_weighted_ce(
            torch.from_numpy(logits), torch.from_numpy(target.astype(np.int64)),
            torch.from_numpy(weights),
        )
        want = brute_masked_ce(logits, target, weights)
        assert float(got) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_loss_uniform_logits_is_ln7():
    # Uniform logits give softmax 1/7 everywhere; with unit weights and all
    # pixels labeled the loss must be exactly ln 7.
    logits = torch.zeros(1, 7, 4, 4, dtype=torch.float64)
    target = torch.full((1, 4, 4), 3, dtype=torch.int64)
    loss = masked_weighted_ce(logits, target, torch.ones(7, dtype=torch.float64))
    assert float(loss) == pytest.approx(math.log(7), rel=1e-12)


def test_loss_denominator_is_pixel_count_not_weight_sum():
    # Two labeled pixels with weights 0.5 and 0.0: denominator must be 2
    # (labeled pixels), so the zero-weight pixel still dilutes the mean.
    logits = torch.zeros(1, 7, 1, 2, dtype=torch.float64)
    target = torch.tensor([[[1, 2]]], dtype=torch.int64)
    weights = torch.zeros(7, dtype=torch.float64)
    weights[1] = 0.5
    loss = masked_weighted_ce(logits, target, weights)
    assert float(loss) == pytest.approx(0.5 * math.log(7) / 2, rel=1e-12)


def test_loss_ignores_unlabeled_and_requires_some_label():
    logits = torch.randn(1, 7, 2, 2, dtype=torch.float64)
    target = torch.full((1, 2, 2), UNLABELED, dtype=torch.int64)
    with pytest.raises(ValueError):
        masked_weighted_ce(logits, target, torch.ones(7, dtype=torch.float64))
    target[0, 0, 0] = 9  # invalid class id
    with pytest.raises(ValueError):
        masked_weighted_ce(logits, target, torch.ones(7, dtype=torch.float64))


def test_loss_flip_consistency():
    # Flipping inputs and target together is pure data relabeling: the same
    # pixels paired with the same labels, so the loss value is unchanged.
    rng = np.random.default_rng(5)
    logits = rng.normal(0, 1, (1, 7, 6, 6))
    target = rng.integers(0, 7, (1, 6, 6)).astype(np.int64)
    w = torch.ones(7, dtype=torch.float64)
    a = masked_weighted_ce(torch.from_numpy(logits), torch.from_numpy(target), w)
    b = masked_weighted_ce(
        torch.from_numpy(logits[:, :, :, ::-1].copy()),
        torch.from_numpy(target[:, :, ::-1].copy()),
        w,
    )
    assert float(a) == pytest.approx(float(b), rel=1e-12)


def brute_miou(pred: np.ndarray, target: np.ndarray) -> float:
    """Reference mIOU via per-class set arithmetic over labeled pixels."""
    labeled = target != UNLABELED
    classes = sorted(set(target[labeled].tolist()))
    ious = []
    for c in classes:
        p = set(zip(*np.nonzero((pred == c) & labeled)))
        t = set(zip(*np.nonzero(target == c)))
        ious.append(len(p & t) / len(p | t))
    return float(np.mean(ious))


def test_miou_matches_bruteforce_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        pred = rng.integers(0, 7, (8, 8)).astype(np.uint8)
        target = rng.choice(
            np.array(list(range(7)) + [UNLABELED] * 2, dtype=np.uint8), (8, 8)
        )
        if np.all(target == UNLABELED):
            target[0, 0] = 1
        assert miou(pred, target) == pytest.approx(brute_miou(pred, target), rel=1e-12)


def test_miou_only_counts_classes_present_in_target():
    target = np.zeros((4, 4), dtype=np.uint8)
    pred = np.zeros((4, 4), dtype=np.uint8)
    pred[0, 0] = 5  # predicting an absent class hurts class 0, adds no term
    assert miou(pred, target) == pytest.approx(15 / 16)


def test_miou_ignores_unlabeled_predictions():
    target = np.full((2, 2), UNLABELED, dtype=np.uint8)
    target[0, 0] = 2
    pred = np.full((2, 2), 6, dtype=np.uint8)
    pred[0, 0] = 2
    # The three unlabeled pixels contribute nothing despite wrong-ish preds.
    assert miou(pred, target) == pytest.approx(1.0)


def test_iou_accumulator_equals_pooled_miou():
    rng = np.random.default_rng(2)
    acc = IouAccumulator(7)
    preds, targets = [], []
    for _ in range(6):
        p = rng.integers(0, 7, (5, 5)).astype(np.uint8)
        t = rng.choice(np.array(list(range(7)) + [UNLABELED], dtype=np.uint8), (5, 5))
        preds.append(p)
        targets.append(t)
        acc.update(p, t)
    pooled_pred = np.concatenate([p.ravel() for p in preds]).reshape(1, -1)
    pooled_tgt = np.concatenate([t.ravel() for t in targets]).reshape(1, -1)
    assert acc.miou() == pytest.approx(brute_miou(pooled_pred, pooled_tgt), rel=1e-12)


def _grad_sample(rng):
    p = TINY.patch_size
    imgs = tuple(rng.integers(0, 256, (p, p, 3), dtype=np.uint8) for _ in range(3))
    target = rng.choice(
        np.array(list(range(7)) + [UNLABELED], dtype=np.uint8), (p, p)
    )
    target[0, 0] = 0  # ensure at least one labeled pixel
    return imgs + (target,)


def test_grad_check_passes_tiny_config(rng):
    model = DmmnModel(TINY)
    weights = np.linspace(0.2, 1.0, 7)
    err = grad_check(model, _grad_sample(rng), weights, n_params=120, seed=0)
    assert err < 1e-4


def test_grad_check_catches_corruption(rng):
    model = DmmnModel(TINY)
    weights = np.linspace(0.2, 1.0, 7)
    err = grad_check(model, _grad_sample(rng), weights, n_params=60, seed=0,
                     corrupt=True)
    assert err > 1e-2


def test_grad_check_zero_weights_trivial(rng):
    model = DmmnModel(TINY)
    sample = _grad_sample(rng)
    err = grad_check(model, sample, np.zeros(7), n_params=20, seed=0)
    assert err == 0.0
