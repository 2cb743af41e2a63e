"""Multi-magnification encoder-decoder network and its training losses.

Three U-Net style streams process the co-centered full / half / quarter
resolution patches.  The half and quarter streams see 2x and 4x the physical
extent of the full-resolution patch, so at every decoder level their feature
maps are center-cropped to the central 1/2 and 1/4 (the physically matching
region), nearest-neighbour upsampled to the level's spatial size, and
concatenated into the full-resolution stream's decoder before that level's
convolution pair.  The 1x1 classifier reads the top-level fused
concatenation (the full-resolution decoder output alongside both upsampled
context features, 3B channels) so the per-class logits see all three
magnifications directly; at small widths this keeps seven classes linearly
separable where the reduced B-channel features alone are too tight a
bottleneck.

Layer schedule for depth ``D`` and base width ``B`` (per stream):

    encoder i in 0..D-1:  DoubleConv(ch_in -> B * 2**i), 2x2 max pool
    bottleneck:           DoubleConv(B * 2**(D-1) -> B * 2**D)
    decoder i in D-1..0:  2x2 transposed conv (halves channels), concat
                          skip [+ fused context], DoubleConv(-> B * 2**i)

DoubleConv is (3x3 conv, GroupNorm(1), ReLU) twice.  GroupNorm with a single
group is used instead of batch statistics so that the forward pass is
independent of batch composition and bit-reproducible in eval and train mode
alike.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .classes import N_CLASSES, UNLABELED


@dataclass(frozen=True)
class DmmnConfig:
    patch_size: int = 256
    base_channels: int = 16
    depth: int = 4
    n_classes: int = N_CLASSES
    rng_seed: int = 0

    def __post_init__(self):
        p, d = self.patch_size, self.depth
        if d < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if p % (1 << d) != 0:
            raise ValueError(f"patch_size {p} not divisible by 2**depth")
        if (p >> (d - 1)) % 4 != 0:
            # the quarter-extent center crop at the deepest decoder level
            # must land on whole feature cells
            raise ValueError(f"patch_size {p} too small for depth {d} context crops")


class _DoubleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.GroupNorm(1, c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.GroupNorm(1, c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class _Stream(nn.Module):
    """One U-Net stream.  ``extra[i]`` channels are concatenated into the
    decoder at level ``i`` (0 = full resolution) ahead of its DoubleConv."""

    def __init__(self, base: int, depth: int, extra: list[int]):
        super().__init__()
        self.depth = depth
        widths = [base << i for i in range(depth + 1)]
        self.encoders = nn.ModuleList(
            [_DoubleConv(3 if i == 0 else widths[i - 1], widths[i]) for i in range(depth)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(widths[depth - 1], widths[depth])
        self.upconvs = nn.ModuleList(
            [nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2) for i in range(depth)]
        )
        self.decoders = nn.ModuleList(
            [_DoubleConv(2 * widths[i] + extra[i], widths[i]) for i in range(depth)]
        )

    def forward(
        self, x: torch.Tensor, extras: list[torch.Tensor] | None = None
    ) -> list[torch.Tensor]:
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        feats: list[torch.Tensor | None] = [None] * self.depth
        for i in range(self.depth - 1, -1, -1):
            x = self.upconvs[i](x)
            pieces = [x, skips[i]]
            if extras is not None:
                pieces.append(extras[i])
            x = self.decoders[i](torch.cat(pieces, dim=1))
            feats[i] = x
        return feats  # type: ignore[return-value]


def center_crop_upsample(feat: torch.Tensor, factor: int) -> torch.Tensor:
    """Crop the central 1/factor of a (N,C,S,S) map and nearest-upsample back
    to S.  The result is aligned with the physical extent of a co-centered
    patch ``factor`` times smaller in field of view."""
    s = feat.shape[-1]
    c = s // factor
    if c * factor != s or (s - c) % 2 != 0:
        raise ValueError(f"feature size {s} not croppable by {factor}")
    a = (s - c) // 2
    crop = feat[..., a : a + c, a : a + c]
    return F.interpolate(crop, scale_factor=factor, mode="nearest")


class DmmnModel(nn.Module):
    def __init__(self, config: DmmnConfig):
        super().__init__()
        self.config = config
        b, d = config.base_channels, config.depth
        no_extra = [0] * d
        self.stream10 = _Stream(b, d, no_extra)
        self.stream5 = _Stream(b, d, no_extra)
        # the full-resolution decoder receives one cropped/upsampled feature
        # map from each context stream at every level
        self.stream20 = _Stream(b, d, [2 * (b << i) for i in range(d)])
        self.head = nn.Conv2d(3 * b, config.n_classes, 1)
        self._reset_parameters(config.rng_seed)

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.xavier_uniform_(module.weight, generator=gen)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.GroupNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)

    def forward(
        self, img20: torch.Tensor, img10: torch.Tensor, img5: torch.Tensor
    ) -> torch.Tensor:
        p = self.config.patch_size
        for name, t in (("img20", img20), ("img10", img10), ("img5", img5)):
            if t.shape[-3:] != (3, p, p):
                raise ValueError(f"{name} must be (N,3,{p},{p}), got {tuple(t.shape)}")
        feats10 = self.stream10(img10)
        feats5 = self.stream5(img5)
        extras = [
            torch.cat(
                [center_crop_upsample(feats10[i], 2), center_crop_upsample(feats5[i], 4)],
                dim=1,
            )
            for i in range(self.config.depth)
        ]
        feats20 = self.stream20(img20, extras)
        return self.head(torch.cat([feats20[0], extras[0]], dim=1))


def parameter_count(config: DmmnConfig) -> int:
    """Closed-form parameter tally; must equal the live module's count."""
    b, d, c = config.base_channels, config.depth, config.n_classes

    def dconv(c_in: int, c_out: int) -> int:
        return (9 * c_in * c_out + c_out) + 2 * c_out + (9 * c_out * c_out + c_out) + 2 * c_out

    def stream(extra: list[int]) -> int:
        widths = [b << i for i in range(d + 1)]
        total = 0
        for i in range(d):
            total += dconv(3 if i == 0 else widths[i - 1], widths[i])
        total += dconv(widths[d - 1], widths[d])
        for i in range(d):
            total += 4 * widths[i + 1] * widths[i] + widths[i]  # 2x2 up-conv
            total += dconv(2 * widths[i] + extra[i], widths[i])
        return total

    none = [0] * d
    fused = [2 * (b << i) for i in range(d)]
    return 2 * stream(none) + stream(fused) + (3 * b * c + c)


def normalize_images(*imgs: np.ndarray) -> list[torch.Tensor]:
    """uint8 HWC (or NHWC) rasters -> float32 CHW tensors scaled to [0,1]."""
    out = []
    for img in imgs:
        arr = np.asarray(img, dtype=np.float32) / 255.0
        t = torch.from_numpy(arr)
        out.append(t.permute(2, 0, 1) if t.ndim == 3 else t.permute(0, 3, 1, 2))
    return out


def masked_weighted_ce(
    logits: torch.Tensor, target: torch.Tensor, weights: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy over labeled pixels only, scaled by per-class weights
    and divided by the *number* of labeled pixels (not the weight sum)."""
    if logits.ndim == 3:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    n_classes = logits.shape[1]
    target = target.long()
    labeled = target != UNLABELED
    n_labeled = labeled.sum()
    if n_labeled == 0:
        raise ValueError("no labeled pixels in target")
    if int(target[labeled].max()) >= n_classes:
        raise ValueError("target contains class ids outside the model's range")
    logp = F.log_softmax(logits, dim=1)
    safe = target.clamp(max=n_classes - 1)
    nll = -logp.gather(1, safe.unsqueeze(1)).squeeze(1)
    w = weights.to(logits.dtype)[safe]
    return (nll * w * labeled).sum() / n_labeled


def miou(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean IOU over the classes present in the target, counting labeled
    pixels only."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    labeled = target != UNLABELED
    if not labeled.any():
        raise ValueError("no labeled pixels in target")
    p, t = pred[labeled], target[labeled]
    scores = []
    for c in np.unique(t):
        inter = int(((p == c) & (t == c)).sum())
        union = int(((p == c) | (t == c)).sum())
        scores.append(inter / union)
    return float(np.mean(scores))


class IouAccumulator:
    """Streaming IOU over many patches; final mean covers classes that
    appear in at least one target."""

    def __init__(self, n_classes: int = N_CLASSES):
        self.inter = np.zeros(n_classes, dtype=np.int64)
        self.union = np.zeros(n_classes, dtype=np.int64)
        self.t_count = np.zeros(n_classes, dtype=np.int64)

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        labeled = target != UNLABELED
        p, t = pred[labeled], target[labeled]
        for c in range(len(self.inter)):
            pc, tc = p == c, t == c
            self.inter[c] += int((pc & tc).sum())
            self.union[c] += int((pc | tc).sum())
            self.t_count[c] += int(tc.sum())

    def miou(self) -> float:
        present = self.t_count > 0
        if not present.any():
            raise ValueError("accumulator saw no labeled pixels")
        return float(np.mean(self.inter[present] / self.union[present]))


def model_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        arr = tensor.detach().cpu().numpy().astype("<f4")
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def grad_check(
    model: DmmnModel,
    sample: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    weights: np.ndarray,
    n_params: int = 120,
    step: float = 1e-3,
    seed: int = 0,
    corrupt: bool = False,
) -> float:
    """Compare autograd against central finite differences on a float64 copy
    of the model.  Returns the max relative error over ``n_params`` randomly
    chosen parameter coordinates.  ``corrupt=True`` injects a deliberate 5%
    scale + 0.1 shift into the analytic gradients (the check must then fail,
    proving it can detect broken gradients)."""
    img20, img10, img5, target = sample
    m = copy.deepcopy(model).double()
    m.eval()
    x20, x10, x5 = [t.double() for t in normalize_images(img20, img10, img5)]
    if x20.ndim == 3:
        x20, x10, x5 = x20.unsqueeze(0), x10.unsqueeze(0), x5.unsqueeze(0)
        target = target[None]
    t = torch.from_numpy(np.ascontiguousarray(target))
    w = torch.from_numpy(np.asarray(weights, dtype=np.float64))

    def loss_value() -> torch.Tensor:
        return masked_weighted_ce(m(x20, x10, x5), t, w)

    loss = loss_value()
    m.zero_grad()
    loss.backward()
    l0 = float(loss.detach())
    params = [p for p in m.parameters()]
    grads = [p.grad.detach().clone() for p in params]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    # Central differences assume the loss is smooth over [w-h, w+h].  A probe
    # that pushes a ReLU or max-pool unit across its corner violates that
    # premise, so each probe is validated by step halving: for smooth f the
    # central difference error is c*h^2, so fd(h) and fd(h/2) agree to
    # 0.75*c*h^2 and their gap bounds the fd(h) error itself.  Probes failing
    # the consistency test (kinks, excessive curvature) are inadmissible and
    # replaced.  Oversample so n_params admissible probes remain.
    want = min(n_params, total)
    flat_ids = rng.choice(total, size=min(8 * want, total), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    checked = 0
    with torch.no_grad():
        for fid in flat_ids:
            if checked >= want:
                break
            pi = int(np.searchsorted(bounds, fid, side="right"))
            local = int(fid - (bounds[pi - 1] if pi else 0))
            flat = params[pi].view(-1)
            orig = flat[local].item()

            def probe(delta: float) -> float:
                flat[local] = orig + delta
                return loss_value().item()

            fd = (probe(step) - probe(-step)) / (2 * step)
            fd_half = (probe(step / 2) - probe(-step / 2)) / step
            flat[local] = orig
            if abs(fd - fd_half) > 2e-5 * max(abs(fd), abs(fd_half), 1e-6):
                continue  # non-smooth neighbourhood; probe is inadmissible
            g = grads[pi].view(-1)[local].item()
            if corrupt:
                g = g * 1.05 + 0.1
            rel = abs(g - fd) / max(abs(g), abs(fd), 1e-6)
            worst = max(worst, rel)
            checked += 1
    if checked < want:
        raise RuntimeError(
            f"only {checked} of {want} requested probes were smooth; "
            "choose a different sample or seed"
        )
    return worst
