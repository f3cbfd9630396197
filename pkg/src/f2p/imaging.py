"""Deterministic raster operations shared by every stage.

Images are plain numpy arrays of floats in [0, 1]: ``(H, W)`` for a single
channel, ``(H, W, 3)`` for RGB.  Spectra are complex ``(H, W)`` arrays with
the DC bin moved to ``(H // 2, W // 2)`` (``np.fft.fftshift`` layout) and
orthonormal scaling, so ``sum(|x|**2) == sum(|S|**2)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import InvalidArgument

LUMA_WEIGHTS = (0.299, 0.587, 0.114)
RIDGE_WEIGHTS = (0.15, 0.35, 0.50)


@dataclass(frozen=True)
class GaborParams:
    orientations: int = 8
    wavelength: float = 8.0
    sigma: float = 4.0
    kernel_size: int = 21

    def __post_init__(self):
        if self.orientations < 1:
            raise InvalidArgument("orientations must be >= 1")
        if self.wavelength <= 0:
            raise InvalidArgument("wavelength must be > 0")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgument("kernel_size must be a positive odd integer")


@dataclass(frozen=True)
class RefineConfig:
    clahe_clip: float = 2.0
    clahe_tiles: int = 8
    block_size: int = 31
    offset: float = 0.02
    smooth_sigma: float = 1.0
    gabor: GaborParams = field(default_factory=GaborParams)


def as_float_image(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    if a.ndim not in (2, 3) or (a.ndim == 3 and a.shape[2] != 3):
        raise InvalidArgument(f"expected (H, W) or (H, W, 3) image, got shape {a.shape}")
    return a


def to_weighted_grayscale(img, weights=RIDGE_WEIGHTS) -> np.ndarray:
    """Weighted channel average ``(wR R + wG G + wB B) / sum(w)``."""
    img = as_float_image(img)
    if img.ndim != 3:
        raise InvalidArgument("weighted grayscale needs a 3-channel image")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0):
        raise InvalidArgument("weights must be three nonnegative numbers")
    total = w.sum()
    if total <= 0:
        raise InvalidArgument("channel weights sum to zero")
    return np.clip(img @ (w / total), 0.0, 1.0)


def luminance(img) -> np.ndarray:
    img = as_float_image(img)
    if img.ndim == 2:
        return img
    return to_weighted_grayscale(img, LUMA_WEIGHTS)


def forward_fft(img) -> np.ndarray:
    return np.fft.fftshift(np.fft.fft2(np.asarray(img, dtype=np.float64), norm="ortho"))


def inverse_fft(spectrum) -> np.ndarray:
    """Real part of the inverse transform; not clamped, so it inverts exactly."""
    return np.real(np.fft.ifft2(np.fft.ifftshift(spectrum), norm="ortho"))


def radius_grid(shape) -> np.ndarray:
    """Distance of every bin from DC, in bins, for the centered layout."""
    h, w = shape
    v = np.arange(h) - h // 2
    u = np.arange(w) - w // 2
    return np.hypot(v[:, None], u[None, :])


def low_pass_filter(img, f_c: float) -> np.ndarray:
    if f_c < 0:
        raise InvalidArgument("cutoff must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    spec = forward_fft(img)
    spec = spec * (radius_grid(img.shape) <= f_c)
    return np.clip(inverse_fft(spec), 0.0, 1.0)


def filter2d(img, kernel) -> np.ndarray:
    """Correlation with replicate-padded borders, same output size."""
    return cv2.filter2D(
        np.asarray(img, dtype=np.float64), cv2.CV_64F,
        np.asarray(kernel, dtype=np.float64), borderType=cv2.BORDER_REPLICATE,
    )


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 8.0
SOBEL_Y = SOBEL_X.T.copy()


def sobel_gradients(img) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel derivatives scaled by 1/8, so a unit-slope ramp gives 1."""
    img = np.asarray(img, dtype=np.float64)
    return filter2d(img, SOBEL_X), filter2d(img, SOBEL_Y)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


SSIM_K1, SSIM_K2 = 0.01, 0.03


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"ssim dimension mismatch: {a.shape} vs {b.shape}")
    g = gaussian_window(window, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filter2d(a, g), filter2d(b, g)
    saa = filter2d(a * a, g) - mu_a**2
    sbb = filter2d(b * b, g) - mu_b**2
    sab = filter2d(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ssim(a, b, **kw) -> float:
    """Mean SSIM, Gaussian 11x11 window (sigma 1.5), K1=0.01, K2=0.03, range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"ssim dimension mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim_map(a[..., c], b[..., c], **kw).mean() for c in range(a.shape[2])]))
    return float(ssim_map(a, b, **kw).mean())


def gabor_kernel(theta: float, p: GaborParams) -> np.ndarray:
    """Even-symmetric, zero-mean Gabor kernel; the carrier varies along ``theta``."""
    half = p.kernel_size // 2
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    xr = x * np.cos(theta) + y * np.sin(theta)
    env = np.exp(-(x**2 + y**2) / (2 * p.sigma**2))
    k = env * np.cos(2 * np.pi * xr / p.wavelength)
    return k - k.mean()


def gabor_angles(p: GaborParams) -> np.ndarray:
    return np.arange(p.orientations) * np.pi / p.orientations


def gabor_response(img, p: GaborParams = GaborParams()) -> np.ndarray:
    """Per-pixel maximum response over the bank, before rescaling."""
    img = np.asarray(img, dtype=np.float64)
    out = None
    for theta in gabor_angles(p):
        r = filter2d(img, gabor_kernel(theta, p))
        out = r if out is None else np.maximum(out, r)
    return out


def rescale01(x, eps: float = 1e-9) -> np.ndarray:
    """Min-max rescale; a flat input (range <= eps) maps to constant 0.5."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= eps:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def gabor_bank(img, p: GaborParams = GaborParams()) -> np.ndarray:
    return rescale01(gabor_response(img, p))


def clahe(img, clip: float = 2.0, tiles: int = 8) -> np.ndarray:
    u8 = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    op = cv2.createCLAHE(clipLimit=clip, tileGridSize=(tiles, tiles))
    return op.apply(u8).astype(np.float64) / 255.0


def adaptive_binarize(img, block_size: int = 31, offset: float = 0.02) -> np.ndarray:
    """1 where the pixel exceeds its Gaussian-weighted neighbourhood mean minus offset."""
    img = np.asarray(img, dtype=np.float64)
    if block_size > min(img.shape[:2]):
        raise InvalidArgument(f"block size {block_size} exceeds image size {img.shape[:2]}")
    if block_size % 2 == 0:
        raise InvalidArgument("block size must be odd")
    local = cv2.GaussianBlur(img, (block_size, block_size), 0, borderType=cv2.BORDER_REPLICATE)
    return (img > local - offset).astype(np.float64)


def gaussian_smooth(img, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64)
    return cv2.GaussianBlur(np.asarray(img, dtype=np.float64), (0, 0), sigma,
                            borderType=cv2.BORDER_REPLICATE)


def ridge_refine(img, mask=None, cfg: RefineConfig = RefineConfig()) -> np.ndarray:
    """CLAHE, adaptive binarization, Gaussian smoothing, Gabor bank; background white."""
    img = as_float_image(img)
    if img.ndim == 3:
        img = luminance(img)
    if cfg.block_size > min(img.shape):
        raise InvalidArgument(f"block size {cfg.block_size} exceeds image size {img.shape}")
    x = clahe(img, cfg.clahe_clip, cfg.clahe_tiles)
    x = adaptive_binarize(x, cfg.block_size, cfg.offset)
    x = gaussian_smooth(x, cfg.smooth_sigma)
    x = gabor_bank(x, cfg.gabor)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise InvalidArgument("mask shape does not match image")
        x = np.where(mask, x, 1.0)
    return np.clip(x, 0.0, 1.0)


def block_view(img, block: int) -> np.ndarray:
    """Non-overlapping full blocks as ``(nby, nbx, block, block)``; remainders dropped."""
    img = np.asarray(img, dtype=np.float64)
    nby, nbx = img.shape[0] // block, img.shape[1] // block
    x = img[: nby * block, : nbx * block]
    return x.reshape(nby, block, nbx, block).swapaxes(1, 2)


def local_contrast(img, block: int, mask=None) -> float:
    """Mean population std over non-overlapping blocks.

    With a mask, only blocks lying entirely inside it are counted.
    """
    if block < 2:
        raise InvalidArgument("block must be >= 2")
    b = block_view(img, block)
    stds = b.std(axis=(2, 3))
    if mask is not None:
        keep = block_view(np.asarray(mask, dtype=np.float64), block).min(axis=(2, 3)) > 0
        stds = stds[keep]
    if stds.size == 0:
        return 0.0
    return float(stds.mean())


def pad_to_square(img, side: int) -> tuple[np.ndarray, np.ndarray]:
    """Aspect-preserving resize so the long edge equals ``side``, black padding centered."""
    if side <= 0:
        raise InvalidArgument("side must be positive")
    img = as_float_image(img)
    h, w = img.shape[:2]
    if (h, w) == (side, side):
        return img.copy(), np.ones((side, side), dtype=bool)
    scale = side / max(h, w)
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
    resized = cv2.resize(img, (nw, nh), interpolation=interp)
    if img.ndim == 3 and resized.ndim == 2:
        resized = resized[:, :, None]
    out = np.zeros((side, side) + img.shape[2:], dtype=np.float64)
    mask = np.zeros((side, side), dtype=bool)
    top, left = (side - nh) // 2, (side - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    mask[top:top + nh, left:left + nw] = True
    return np.clip(out, 0.0, 1.0), mask


def resize(img, shape) -> np.ndarray:
    """Plain resize to ``(H, W)``; area for shrinking, bilinear otherwise."""
    img = np.asarray(img, dtype=np.float64)
    h, w = shape
    if img.shape[:2] == (h, w):
        return img.copy()
    interp = cv2.INTER_AREA if h < img.shape[0] else cv2.INTER_LINEAR
    return cv2.resize(img, (w, h), interpolation=interp)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def write_png(path, img) -> None:
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    m = read_png(path)
    if m.ndim == 3:
        m = m.mean(axis=2)
    return m >= 0.5
