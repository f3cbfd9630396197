"""Finger segmentation by red/green ratio and flash minus low-passed non-flash subtraction."""

from __future__ import annotations

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.morphology import disk

from .errors import DegenerateInput, InvalidArgument, SegmentationFailed
from .imaging import as_float_image, forward_fft, low_pass_filter, luminance, radius_grid

DEFAULT_RG_THRESHOLD = 1.15
DEFAULT_ENERGY_FRACTION = 0.15
RATIO_EPS = 1e-6


def rg_ratio(img) -> np.ndarray:
    img = as_float_image(img)
    if img.ndim != 3:
        raise InvalidArgument("segmentation needs an RGB image")
    return img[..., 0] / (img[..., 1] + RATIO_EPS)


def segment_rg(img, threshold: float | str = DEFAULT_RG_THRESHOLD, closing_radius: int = 5) -> np.ndarray:
    """Finger mask: ``R / (G + eps) > T``, largest component, disk closing.

    ``threshold="auto"`` picks T by Otsu on the ratio histogram.
    """
    ratio = rg_ratio(img)
    if threshold == "auto":
        finite = ratio[np.isfinite(ratio)]
        t = float(threshold_otsu(np.clip(finite, 0, np.percentile(finite, 99.5))))
    else:
        t = float(threshold)
        if t <= 0:
            raise InvalidArgument("ratio threshold must be > 0")
    raw = ratio > t
    labels, n = ndimage.label(raw)
    if n == 0:
        raise SegmentationFailed(f"no pixel has R/G > {t:.3f}")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = labels == int(np.argmax(sizes))
    if closing_radius > 0:
        r = closing_radius
        padded = np.pad(mask, r, mode="edge")
        padded = ndimage.binary_closing(padded, structure=disk(r))
        mask = padded[r:-r, r:-r]
    if not mask.any():
        raise SegmentationFailed("mask empty after cleanup")
    return mask


def whiten_background(img, mask) -> np.ndarray:
    img = as_float_image(img)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise InvalidArgument("mask shape does not match image")
    out = img.copy()
    out[~mask] = 1.0
    return out


def radial_energy_profile(spectrum) -> np.ndarray:
    """Energy ``|S|^2`` summed over bins sharing ``round(radius)``; index 0 is DC."""
    spectrum = np.asarray(spectrum)
    r = np.rint(radius_grid(spectrum.shape)).astype(np.int64)
    return np.bincount(r.ravel(), weights=(np.abs(spectrum) ** 2).ravel())


def select_cutoff(profile, rho: float = DEFAULT_ENERGY_FRACTION) -> int:
    """Smallest radius whose cumulative non-DC energy reaches ``rho`` of the non-DC total."""
    if not 0 < rho < 1:
        raise InvalidArgument("energy fraction must be in (0, 1)")
    p = np.asarray(profile, dtype=np.float64)
    non_dc = p[1:]
    total = non_dc.sum()
    if total <= 0:
        raise DegenerateInput("profile has no non-DC energy")
    cum = np.cumsum(non_dc)
    # relative slack absorbs rounding in rho * total (0.15 * 100 != 15 exactly)
    return int(np.argmax(cum >= rho * total * (1 - 1e-12))) + 1


def cutoff_for(img, rho: float = DEFAULT_ENERGY_FRACTION) -> int:
    """Cutoff from the radial profile of an image's luminance."""
    return select_cutoff(radial_energy_profile(forward_fft(luminance(img))), rho)


def spectral_subtract(flash, nonflash, f_c: float, clamp: bool = True) -> np.ndarray:
    """Per channel ``I_flash - LP(I, f_c)``, clamped to [0, 1] unless ``clamp=False``."""
    flash = as_float_image(flash)
    nonflash = as_float_image(nonflash)
    if flash.shape != nonflash.shape:
        raise InvalidArgument(f"shape mismatch: {flash.shape} vs {nonflash.shape}")
    if flash.ndim == 2:
        diff = flash - low_pass_filter(nonflash, f_c)
    else:
        low = np.stack([low_pass_filter(nonflash[..., c], f_c) for c in range(flash.shape[2])], axis=-1)
        diff = flash - low
    return np.clip(diff, 0.0, 1.0) if clamp else diff
