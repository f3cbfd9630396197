"""Differentiable counterparts of the raster ops, for ``(B, C, H, W)`` tensors.

These mirror ``imaging`` (same windows, same replicate borders) so losses
computed on tensors agree with the numpy reference implementations.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from . import imaging


def _kernel(k, x: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(k), dtype=x.dtype, device=x.device)


def depthwise(x: torch.Tensor, kernel) -> torch.Tensor:
    """Same-size correlation of every channel with ``kernel``, replicate border."""
    k = _kernel(kernel, x)
    kh, kw = k.shape
    c = x.shape[1]
    xp = F.pad(x, (kw // 2, kw // 2, kh // 2, kh // 2), mode="replicate")
    w = k.expand(c, 1, kh, kw)
    return F.conv2d(xp, w, groups=c)


def sobel(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return depthwise(x, imaging.SOBEL_X), depthwise(x, imaging.SOBEL_Y)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
             data_range: float = 1.0) -> torch.Tensor:
    g = imaging.gaussian_window(window, sigma)
    c1 = (imaging.SSIM_K1 * data_range) ** 2
    c2 = (imaging.SSIM_K2 * data_range) ** 2
    mu_a, mu_b = depthwise(a, g), depthwise(b, g)
    saa = depthwise(a * a, g) - mu_a**2
    sbb = depthwise(b * b, g) - mu_b**2
    sab = depthwise(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def whiten(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Background (mask == 0) forced to white; ``mask`` is ``(B, 1, H, W)``."""
    return x * mask + (1.0 - mask)


def masked_mean(v: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean of ``v`` over masked pixels and all channels, per batch element."""
    m = mask.expand_as(v)
    return (v * m).sum(dim=(1, 2, 3)) / m.sum(dim=(1, 2, 3))


def high_freq_energy(x: torch.Tensor, f_c: float) -> torch.Tensor:
    """Orthonormal spectral energy above radius ``f_c``, per pixel, averaged over channels."""
    h, w = x.shape[-2:]
    spec = torch.fft.fft2(x, norm="ortho")
    r = np.fft.ifftshift(imaging.radius_grid((h, w)))
    keep = torch.as_tensor(r > f_c, dtype=x.dtype, device=x.device)
    e = (spec.real**2 + spec.imag**2) * keep
    return e.sum(dim=(2, 3)).mean(dim=1) / (h * w)


def high_pass_magnitude(x: torch.Tensor, f_c: float = 0.0) -> torch.Tensor:
    """Per-pixel magnitude of the signal with all bins of radius <= f_c removed."""
    h, w = x.shape[-2:]
    spec = torch.fft.fft2(x, norm="ortho")
    r = np.fft.ifftshift(imaging.radius_grid((h, w)))
    keep = torch.as_tensor(r > f_c, dtype=x.dtype, device=x.device)
    band = torch.fft.ifft2(spec * keep, norm="ortho")
    return band.abs()


def to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    """``(H, W)`` or ``(H, W, C)`` array to a ``(1, C, H, W)`` tensor."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    return torch.as_tensor(np.ascontiguousarray(a.transpose(2, 0, 1)[None]), dtype=dtype)


def to_image(t: torch.Tensor) -> np.ndarray:
    """``(1, C, H, W)`` tensor back to ``(H, W)`` or ``(H, W, C)`` float64 array."""
    a = t.detach().cpu().double().numpy()[0].transpose(1, 2, 0)
    return a[:, :, 0] if a.shape[2] == 1 else a


def mask_tensor(mask, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(mask, dtype=np.float64)[None, None], dtype=dtype)


def gabor_bank(x: torch.Tensor, p: imaging.GaborParams = imaging.GaborParams(), eps: float = 1e-9) -> torch.Tensor:
    """Per-pixel max Gabor response over the bank, min-max rescaled per image (flat -> 0.5)."""
    resp = torch.stack([depthwise(x, imaging.gabor_kernel(t, p)) for t in imaging.gabor_angles(p)]).amax(dim=0)
    lo = resp.amin(dim=(1, 2, 3), keepdim=True)
    hi = resp.amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    flat = span <= eps
    return torch.where(flat, torch.full_like(resp, 0.5), (resp - lo) / torch.where(flat, torch.ones_like(span), span))
