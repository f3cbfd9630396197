"""U-Net mapping the fused RGB image to a single-channel ridge map.

Training is supervised by the aligned flash luminance plus a Gabor ridge
reference; the objective also subtracts a patch-contrast reward weighted
toward the blue and green channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import DegenerateInput, InvalidArgument
from .imaging import GaborParams, RIDGE_WEIGHTS, block_view, gabor_bank, to_weighted_grayscale
from .tensor_ops import masked_mean, sobel, ssim_map, to_image, to_tensor, whiten
from .training import (BestState, accumulate, batches, check_finite, log, seed_everything,
                       split_indices, stack)

TAG = "enhancer"
LOGIT_CLAMP = 15.0  # keeps the float32 sigmoid strictly inside (0, 1)


@dataclass
class EnhancerConfig:
    image_size: int = 512
    channels: tuple = (32, 64, 128, 256)
    w_l1: float = 1.0
    w_contrast: float = 0.1
    w_ssim: float = 0.5
    w_gabor: float = 0.5
    w_edge: float = 0.3
    channel_weights: tuple = RIDGE_WEIGHTS   # (w_R, w_G, w_B)
    patch: int = 16
    noise_sigma: float = 0.02
    lr: float = 1e-4
    weight_decay: float = 0.0
    epochs: int = 30
    batch_size: int = 4
    split: tuple = (0.7, 0.15, 0.15)
    gabor_wavelength: float = 8.0
    gabor_sigma: float = 4.0
    gabor_kernel: int = 21
    gabor_orientations: int = 8
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.channel_weights = tuple(float(w) for w in self.channel_weights)
        self.split = tuple(float(s) for s in self.split)
        wr, wg, wb = self.channel_weights
        if min(self.channel_weights) < 0 or min(self.loss_weights) < 0:
            raise InvalidArgument("weights must be >= 0")
        if not wb > wg > wr:
            raise InvalidArgument("channel weights must satisfy w_B > w_G > w_R")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise InvalidArgument("split fractions must sum to 1")

    @property
    def loss_weights(self) -> tuple:
        return (self.w_l1, self.w_contrast, self.w_ssim, self.w_gabor, self.w_edge)

    @property
    def gabor(self) -> GaborParams:
        return GaborParams(self.gabor_orientations, self.gabor_wavelength, self.gabor_sigma, self.gabor_kernel)

    def to_meta(self) -> dict:
        d = asdict(self)
        for k in ("channels", "channel_weights", "split"):
            d[k] = list(d[k])
        return d


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False, padding_mode="replicate"),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False, padding_mode="replicate"),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class EnhancerModel(nn.Module):
    def __init__(self, cfg: EnhancerConfig | None = None):
        super().__init__()
        self.cfg = cfg or EnhancerConfig()
        ch = self.cfg.channels
        self.down = nn.ModuleList()
        cin = 3
        for c in ch:
            self.down.append(DoubleConv(cin, c))
            cin = c
        self.up = nn.ModuleList()
        for i in range(len(ch) - 1, 0, -1):
            self.up.append(DoubleConv(ch[i] + ch[i - 1], ch[i - 1]))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        for block, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x).clamp(-LOGIT_CLAMP, LOGIT_CLAMP))


@torch.no_grad()
def enhancer_forward(model: EnhancerModel, fuse) -> np.ndarray:
    s = model.cfg.image_size
    shape = np.shape(fuse)
    if len(shape) != 3 or shape[2] != 3 or shape[:2] != (s, s):
        raise InvalidArgument(f"enhancer expects a {s}x{s}x3 image, got {shape}")
    model.eval()
    return to_image(model(to_tensor(fuse)))


def patch_weight_map(fuse, channel_weights=RIDGE_WEIGHTS) -> np.ndarray:
    """Per-pixel ``wR R + wG G + wB B`` contribution map of the fused image."""
    return to_weighted_grayscale(fuse, channel_weights)


def _patches(x: torch.Tensor, p: int) -> torch.Tensor:
    """``(B, 1, H, W)`` to ``(B, n_patches, p * p)``; remainder rows/cols dropped."""
    b, _, h, w = x.shape
    ny, nx = h // p, w // p
    x = x[:, 0, : ny * p, : nx * p].reshape(b, ny, p, nx, p).permute(0, 1, 3, 2, 4)
    return x.reshape(b, ny * nx, p * p)


def contrast_reward(enh: torch.Tensor, patch: int, weight_map: torch.Tensor | None = None,
                    mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over patches of (patch std of ``enh``) x (mean patch weight), per batch element.

    With a mask the std and the patch weight are taken over in-mask pixels
    only, and patches with no masked pixel are skipped.
    """
    x = _patches(enh, patch)
    m = torch.ones_like(x) if mask is None else _patches(mask.to(enh.dtype), patch)
    cnt = m.sum(dim=2)
    used = (cnt > 0).to(enh.dtype)
    safe = cnt.clamp_min(1.0)
    mu = (x * m).sum(dim=2) / safe
    var = (((x - mu.unsqueeze(2)) ** 2) * m).sum(dim=2) / safe
    var = var.clamp_min(0.0)
    # var / sqrt(var + tiny): equals the std to ~1e-11 yet stays differentiable at 0
    std = var * torch.rsqrt(var + 1e-12) * used
    if weight_map is None:
        wp = torch.ones_like(std)
    else:
        wp = (_patches(weight_map.to(enh.dtype), patch) * m).sum(dim=2) / safe
    n = used.sum(dim=1).clamp_min(1.0)
    return (std * wp).sum(dim=1) / n


def contrast_reward_np(enh, patch: int, weights=None) -> float:
    """Numpy form for unmasked images; ``weights`` is a per-pixel map or None."""
    b = block_view(enh, patch)
    std = b.std(axis=(2, 3))
    wp = np.ones_like(std) if weights is None else block_view(weights, patch).mean(axis=(2, 3))
    return float((std * wp).mean()) if std.size else 0.0


def ridge_reference(flash_gray, params: GaborParams = GaborParams()) -> np.ndarray:
    return gabor_bank(flash_gray, params)


def ridge_valley_weight(g_ref):
    """Confidence weight ``1 + |2 G_ref - 1|``: strongest on clear ridges and valleys."""
    return 1.0 + (2.0 * g_ref - 1.0).abs() if isinstance(g_ref, torch.Tensor) else 1.0 + np.abs(2.0 * g_ref - 1.0)


def gabor_ridge_loss(enh: torch.Tensor, g_ref: torch.Tensor, mask: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    m = mask.to(enh.dtype)
    if m.sum(dim=(1, 2, 3)).min() <= 0:
        raise DegenerateInput("empty mask")
    w = ridge_valley_weight(g_ref)
    return ((enh - g_ref).abs() * w * m).sum(dim=(1, 2, 3)) / (m.sum(dim=(1, 2, 3)) + eps)


def enhancer_loss(enh: torch.Tensor, flash_gray: torch.Tensor, mask: torch.Tensor, cfg: EnhancerConfig,
                  g_ref: torch.Tensor, weight_map: torch.Tensor | None = None, eps: float = 1e-8):
    """``a L1 - b R + c SSIM + d Gabor + e edge``, batch-averaged; returns ``(total, components)``.

    The reward is unbounded below in its weight, so the total may go negative.
    """
    m = mask.to(enh.dtype)
    msum = m.sum(dim=(1, 2, 3))
    if msum.min() <= 0:
        raise DegenerateInput("empty mask")
    l1 = ((enh - flash_gray).abs() * m).sum(dim=(1, 2, 3)) / (msum + eps)
    reward = contrast_reward(enh, cfg.patch, weight_map, m)
    ew, fw = whiten(enh, m), whiten(flash_gray, m)
    l_ssim = 1.0 - masked_mean(ssim_map(ew, fw), m)
    l_gabor = gabor_ridge_loss(enh, g_ref, m, eps)
    (egx, egy), (fgx, fgy) = sobel(ew), sobel(fw)
    l_edge = masked_mean((egx - fgx).abs() + (egy - fgy).abs(), m)
    comps = {"l1": l1.mean(), "contrast": reward.mean(), "ssim": l_ssim.mean(),
             "gabor": l_gabor.mean(), "edge": l_edge.mean()}
    a, b, c, d, e = cfg.loss_weights
    total = a * comps["l1"] - b * comps["contrast"] + c * comps["ssim"] + d * comps["gabor"] + e * comps["edge"]
    return total, comps


def channel_local_contrast(img, block: int = 16) -> tuple[float, float, float]:
    """Mean block-wise population std for each of R, G, B."""
    if block < 2:
        raise InvalidArgument("block must be >= 2")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidArgument("channel contrast needs an RGB image")
    return tuple(float(block_view(img[..., c], block).std(axis=(2, 3)).mean()) for c in range(3))


def prepare_sample(fuse, flash_gray, mask, cfg: EnhancerConfig):
    """Attach the Gabor reference and patch weight map to one training sample."""
    return (fuse, flash_gray, mask, ridge_reference(flash_gray, cfg.gabor),
            patch_weight_map(fuse, cfg.channel_weights))


def train_enhancer(samples, cfg: EnhancerConfig | None = None):
    """Train on ``(fuse, flash_gray, mask)`` tuples; returns ``(model, log)``."""
    cfg = cfg or EnhancerConfig()
    samples = [s if len(s) == 5 else prepare_sample(*s, cfg) for s in samples]
    if not samples:
        raise InvalidArgument("no training samples")
    rng = seed_everything(cfg.seed)
    fuse = stack([s[0] for s in samples])
    gray = stack([s[1] for s in samples])
    mask = stack([np.asarray(s[2], dtype=np.float64) for s in samples])
    gref = stack([s[3] for s in samples])
    wmap = stack([s[4] for s in samples])
    if fuse.shape[-1] != cfg.image_size or fuse.shape[-2] != cfg.image_size:
        raise InvalidArgument(f"training images must be {cfg.image_size}x{cfg.image_size}")
    train_idx, val_idx, _ = split_indices(len(samples), cfg.split, cfg.seed)
    noise_gen = torch.Generator().manual_seed(cfg.seed + 1)

    model = EnhancerModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    best = BestState()
    history = []

    def run(idx, train: bool):
        sums, n = {}, 0
        model.train(train)
        for b in batches(idx, cfg.batch_size, rng if train else None):
            x = fuse[b]
            if train and cfg.noise_sigma > 0:
                x = (x + cfg.noise_sigma * torch.randn(x.shape, generator=noise_gen)).clamp(0.0, 1.0)
            with torch.set_grad_enabled(train):
                total, comps = enhancer_loss(model(x), gray[b], mask[b], cfg, gref[b], wmap[b])
            if train:
                opt.zero_grad()
                total.backward()
                opt.step()
            accumulate(sums, {"total": total.item(), **{k: v.item() for k, v in comps.items()}}, len(b))
            n += len(b)
        return {k: v / n for k, v in sums.items()}

    for epoch in range(1, cfg.epochs + 1):
        tr = run(train_idx, True)
        check_finite(tr["total"], epoch)
        va = run(val_idx, False)
        check_finite(va["total"], epoch, "validation loss")
        best.update(model, va["total"], epoch)
        row = {"epoch": epoch}
        row.update({f"train_{k}": v for k, v in tr.items()})
        row.update({f"val_{k}": v for k, v in va.items()})
        history.append(row)
        log.info("enhancer epoch %d train %.5f val %.5f", epoch, tr["total"], va["total"])
    best.restore(model)
    model.eval()
    return model, history


def save_enhancer(path, model: EnhancerModel) -> None:
    checkpoint.save_module(path, TAG, model, model.cfg.to_meta())


def load_enhancer(path) -> EnhancerModel:
    meta, tensors = checkpoint.load(path, TAG)
    model = EnhancerModel(EnhancerConfig(**meta))
    checkpoint.load_state(model, tensors)
    return model.eval()
