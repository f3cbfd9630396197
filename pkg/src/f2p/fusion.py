"""Dual-encoder attention fusion of flash / non-flash pairs.

Two convolutional encoders see the flash and non-flash RGB images; their
bottleneck features are blended by a learned spatial weight map ``W1``
(``W2 = 1 - W1``).  The decoder reuses the flash encoder's skip features,
its output is amplified by a high-frequency magnitude term and finished by
a residual edge convolution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import DegenerateInput, InvalidArgument
from .tensor_ops import (high_freq_energy, high_pass_magnitude, masked_mean, sobel, ssim_map,
                         to_image, to_tensor, whiten)
from .training import (BestState, accumulate, batches, check_finite, log, seed_everything,
                       split_indices, stack)

TAG = "fusion"


@dataclass
class FusionConfig:
    image_size: int = 512
    encoder_channels: tuple = (32, 64, 128)
    amp_gain: float = 0.5          # lambda in the amplification factor
    amp_cutoff: float = 0.0        # bins of radius <= this are excluded from the magnitude map
    edge_gain: float = 0.1         # residual edge-convolution gain
    eps: float = 1e-6              # floor in the amplification denominator
    w_l1: float = 1.0
    w_ssim: float = 0.5
    w_fourier: float = 0.3
    w_edge: float = 0.5
    w_perceptual: float = 0.1
    fourier_cutoff_frac: float = 1 / 16
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 30
    batch_size: int = 4
    split: tuple = (0.7, 0.15, 0.15)
    plateau_patience: int = 3
    plateau_factor: float = 0.5
    seed: int = 0
    feature_seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.split = tuple(float(s) for s in self.split)
        if self.amp_gain < 0:
            raise InvalidArgument("amplification gain must be >= 0")
        if min(self.loss_weights) < 0:
            raise InvalidArgument("loss weights must be >= 0")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise InvalidArgument("split fractions must sum to 1")

    @property
    def loss_weights(self) -> tuple:
        return (self.w_l1, self.w_ssim, self.w_fourier, self.w_edge, self.w_perceptual)

    @property
    def fourier_cutoff(self) -> float:
        return max(1.0, round(self.fourier_cutoff_frac * self.image_size))

    def to_meta(self) -> dict:
        d = asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        d["split"] = list(self.split)
        return d


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, padding_mode="replicate"),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, channels, cin: int = 3):
        super().__init__()
        layers = []
        for i, c in enumerate(channels):
            layers.append(conv_bn_relu(cin, c, stride=1 if i == 0 else 2))
            cin = c
        self.levels = nn.ModuleList(layers)

    def forward(self, x):
        feats = []
        for level in self.levels:
            x = level(x)
            feats.append(x)
        return feats


def freq_amplify(x: torch.Tensor, gain: float, eps: float = 1e-6, cutoff: float = 0.0) -> torch.Tensor:
    """``x * (1 + gain * log(1 + M) / (max M + eps))``.

    ``M`` is the per-pixel magnitude of ``x`` with the spectral bins of radius
    ``<= cutoff`` removed (by default only DC), taken per image and channel.
    """
    if gain < 0:
        raise InvalidArgument("amplification gain must be >= 0")
    if gain == 0:
        return x
    mag = high_pass_magnitude(x, cutoff)
    peak = mag.amax(dim=(2, 3), keepdim=True)
    return x * (1.0 + gain * torch.log1p(mag) / (peak + eps))


class FusionModel(nn.Module):
    def __init__(self, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg or FusionConfig()
        ch = self.cfg.encoder_channels
        self.enc_flash = Encoder(ch)
        self.enc_nonflash = Encoder(ch)
        self.attention = nn.Conv2d(2 * ch[-1], 1, 3, padding=1, padding_mode="replicate")
        dec = []
        for i in range(len(ch) - 1, 0, -1):
            dec.append(conv_bn_relu(ch[i] + ch[i - 1], ch[i - 1]))
        self.decoder = nn.ModuleList(dec)
        self.head = nn.Conv2d(ch[0], 3, 1)
        self.edge = nn.Conv2d(3, 3, 3, padding=1, padding_mode="replicate")

    def attention_weights(self, f_flash: torch.Tensor, f_nonflash: torch.Tensor):
        if f_flash.shape != f_nonflash.shape:
            raise InvalidArgument(f"feature shapes differ: {tuple(f_flash.shape)} vs {tuple(f_nonflash.shape)}")
        w1 = torch.sigmoid(self.attention(torch.cat([f_flash, f_nonflash], dim=1)))
        return w1, 1.0 - w1

    def decode(self, fused: torch.Tensor, skips) -> torch.Tensor:
        x = fused
        for block, skip in zip(self.decoder, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return torch.sigmoid(self.head(x))

    def raw_decode(self, flash: torch.Tensor, nonflash: torch.Tensor):
        ff = self.enc_flash(flash)
        fn = self.enc_nonflash(nonflash)
        w1, w2 = self.attention_weights(ff[-1], fn[-1])
        fused = w1 * ff[-1] + w2 * fn[-1]
        return self.decode(fused, ff), w1

    def forward(self, flash: torch.Tensor, nonflash: torch.Tensor):
        d, w1 = self.raw_decode(flash, nonflash)
        amp = freq_amplify(d, self.cfg.amp_gain, self.cfg.eps, self.cfg.amp_cutoff)
        out = amp + self.cfg.edge_gain * self.edge(amp) if self.cfg.edge_gain else amp
        return out.clamp(0.0, 1.0), w1


def _check_pair(model: FusionModel, flash, nonflash) -> None:
    s = model.cfg.image_size
    for name, img in (("flash", flash), ("nonflash", nonflash)):
        shape = np.shape(img)
        if len(shape) != 3 or shape[2] != 3:
            raise InvalidArgument(f"{name} must be an RGB image, got shape {shape}")
        if shape[:2] != (s, s):
            raise InvalidArgument(f"{name} must be {s}x{s} (use pad_to_square), got {shape[:2]}")


@torch.no_grad()
def fusion_forward(model: FusionModel, flash, nonflash) -> tuple[np.ndarray, np.ndarray]:
    """Fused RGB image and the bottleneck attention map ``W1``."""
    _check_pair(model, flash, nonflash)
    model.eval()
    out, w1 = model(to_tensor(flash), to_tensor(nonflash))
    return to_image(out), to_image(w1)


class FeatureNet(nn.Module):
    """Frozen convolutional feature extractor for the perceptual term.

    Default weights are drawn from a seeded generator; ``taps`` lists the
    layer indices whose activations are compared.  GELU keeps the term
    smooth, so finite-difference checks are not disturbed by kinks.
    """

    widths = (16, 32, 32, 64)
    strides = (1, 2, 1, 2)

    def __init__(self, seed: int = 0, in_channels: int = 3, taps=(1, 3)):
        super().__init__()
        self.seed = seed
        self.taps = tuple(taps)
        layers, cin = [], in_channels
        for c, s in zip(self.widths, self.strides):
            layers.append(nn.Conv2d(cin, c, 3, stride=s, padding=1, padding_mode="replicate"))
            cin = c
        self.layers = nn.ModuleList(layers)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.layers:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def forward(self, x):
        out = []
        for i, conv in enumerate(self.layers):
            x = F.gelu(conv(x))
            if i in self.taps:
                out.append(x)
        return out

    def train(self, mode: bool = True):
        return super().train(False)

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureNet":
        meta, tensors = checkpoint.load(path, "features")
        net = cls(meta.get("seed", 0), meta.get("in_channels", 3), meta.get("taps", (1, 3)))
        checkpoint.load_state(net, tensors)
        net.requires_grad_(False)
        return net

    def save(self, path) -> None:
        checkpoint.save_module(path, "features", self,
                               {"seed": self.seed, "in_channels": self.layers[0].in_channels,
                                "taps": list(self.taps)})


def fusion_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, phi: FeatureNet,
                cfg: FusionConfig, f_c: float | None = None):
    """Weighted five-term loss, batch-averaged; returns ``(total, components)``.

    Every term only sees pixels inside ``mask``: pointwise terms average over
    masked pixels, windowed terms (SSIM, edges, spectrum, features) run on
    background-whitened copies of both images.
    """
    if mask.sum(dim=(1, 2, 3)).min() <= 0:
        raise DegenerateInput("empty mask")
    f_c = cfg.fourier_cutoff if f_c is None else f_c
    pw, tw = whiten(pred, mask), whiten(target, mask)
    l1 = masked_mean((pred - target).abs(), mask)
    l_ssim = 1.0 - masked_mean(ssim_map(pw, tw), mask)
    l_fourier = torch.relu(high_freq_energy(tw, f_c) - high_freq_energy(pw, f_c))
    (pgx, pgy), (tgx, tgy) = sobel(pw), sobel(tw)
    l_edge = masked_mean((pgx - tgx).abs() + (pgy - tgy).abs(), mask)
    fp, ft = phi(pw), phi(tw)
    l_perc = sum((a - b).abs().mean(dim=(1, 2, 3)) for a, b in zip(fp, ft)) / len(fp)
    comps = {"l1": l1.mean(), "ssim": l_ssim.mean(), "fourier": l_fourier.mean(),
             "edge": l_edge.mean(), "perceptual": l_perc.mean()}
    w = cfg.loss_weights
    total = sum(wi * c for wi, c in zip(w, comps.values()))
    return total, comps


def train_fusion(samples, cfg: FusionConfig | None = None, phi: FeatureNet | None = None):
    """Train on ``(flash, nonflash, diff, mask)`` tuples of ``image_size`` squares.

    Returns ``(model, log)`` with the best-validation parameters restored;
    ``log`` holds one dict of train/val components per epoch.
    """
    cfg = cfg or FusionConfig()
    samples = list(samples)
    if not samples:
        raise InvalidArgument("no training pairs")
    rng = seed_everything(cfg.seed)
    phi = phi or FeatureNet(cfg.feature_seed)
    flash = stack([s[0] for s in samples])
    nonflash = stack([s[1] for s in samples])
    target = stack([s[2] for s in samples])
    mask = stack([np.asarray(s[3], dtype=np.float64) for s in samples])
    if flash.shape[-1] != cfg.image_size or flash.shape[-2] != cfg.image_size:
        raise InvalidArgument(f"training images must be {cfg.image_size}x{cfg.image_size}")
    train_idx, val_idx, _ = split_indices(len(samples), cfg.split, cfg.seed)

    model = FusionModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ReduceLROnPlateau(
        opt, mode="min", factor=cfg.plateau_factor, patience=cfg.plateau_patience)
    best = BestState()
    history = []

    def run(idx, train: bool):
        sums, n = {}, 0
        model.train(train)
        for b in batches(idx, cfg.batch_size, rng if train else None):
            with torch.set_grad_enabled(train):
                out, _ = model(flash[b], nonflash[b])
                total, comps = fusion_loss(out, target[b], mask[b], phi, cfg)
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
        sched.step(va["total"])
        best.update(model, va["total"], epoch)
        row = {"epoch": epoch, "lr": opt.param_groups[0]["lr"]}
        row.update({f"train_{k}": v for k, v in tr.items()})
        row.update({f"val_{k}": v for k, v in va.items()})
        history.append(row)
        log.info("fusion epoch %d train %.5f val %.5f", epoch, tr["total"], va["total"])
    best.restore(model)
    model.eval()
    return model, history


def save_fusion(path, model: FusionModel) -> None:
    checkpoint.save_module(path, TAG, model, model.cfg.to_meta())


def load_fusion(path) -> FusionModel:
    meta, tensors = checkpoint.load(path, TAG)
    model = FusionModel(FusionConfig(**meta))
    checkpoint.load_state(model, tensors)
    return model.eval()
