"""Registration, upright rotation and core-point centering.

Coordinates: ``x`` is the column index, ``y`` the row index (pointing down).
Orientation-field angles are the dominant *gradient* (ridge-normal) direction
in ``[0, pi)``; the ridge direction is that angle plus ``pi / 2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import ndimage
from scipy.signal.windows import tukey

from .errors import CoreNotFound, DegenerateInput, InvalidArgument
from .imaging import as_float_image, luminance, sobel_gradients


@dataclass(frozen=True)
class Translation:
    dx: float
    dy: float

    def __iter__(self):
        return iter((self.dx, self.dy))


@dataclass
class OrientationField:
    block_size: int
    gx: np.ndarray
    gy: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    angle: np.ndarray
    coherence: np.ndarray

    @property
    def shape(self):
        return self.angle.shape


@dataclass(frozen=True)
class CorePoint:
    x: float
    y: float
    coherence: float
    poincare: float


def _taper2d(shape, alpha: float) -> np.ndarray:
    """Separable Tukey window; ``alpha = 1`` is the Hann window."""
    return np.outer(tukey(shape[0], alpha), tukey(shape[1], alpha))


def _parabolic(c_m: float, c_0: float, c_p: float) -> float:
    den = c_m - 2.0 * c_0 + c_p
    if den == 0:
        return 0.0
    off = 0.5 * (c_m - c_p) / den
    return float(np.clip(off, -0.5, 0.5))


def phase_correlate(a, b, window: bool = True, taper: float = 0.25) -> Translation:
    """Shift ``t`` such that ``b`` is ``a`` moved by ``t`` (content of a at p is at p + t in b).

    Normalized cross-power spectrum peak, with a 3-point parabolic sub-pixel
    fit on each axis.  After mean removal both images are multiplied by a
    Tukey window whose cosine edges span ``taper`` of each axis (1.0 gives
    Hann).  The partial taper still suppresses wraparound but keeps the
    finger outline, which flash and non-flash frames share, in play.
    """
    a = luminance(a)
    b = luminance(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0 <= taper <= 1:
        raise InvalidArgument("taper must be in [0, 1]")
    a = a - a.mean()
    b = b - b.mean()
    if not np.any(a) or not np.any(b):
        raise DegenerateInput("phase correlation of a constant image")
    if window:
        w = _taper2d(a.shape, taper)
        a, b = a * w, b * w
    fa, fb = np.fft.fft2(a), np.fft.fft2(b)
    cross = fb * np.conj(fa)
    mag = np.abs(cross)
    if mag.max() <= 1e-300:
        raise DegenerateInput("zero cross-power spectrum")
    cross = cross / np.maximum(mag, 1e-15 * mag.max())
    corr = np.real(np.fft.ifft2(cross))
    h, w_ = corr.shape
    iy, ix = np.unravel_index(int(np.argmax(corr)), corr.shape)
    oy = _parabolic(corr[(iy - 1) % h, ix], corr[iy, ix], corr[(iy + 1) % h, ix])
    ox = _parabolic(corr[iy, (ix - 1) % w_], corr[iy, ix], corr[iy, (ix + 1) % w_])
    dy = iy if iy <= h // 2 else iy - h
    dx = ix if ix <= w_ // 2 else ix - w_
    return Translation(float(dx + ox), float(dy + oy))


def translate(img, t: Translation, order: int = 1, fill: float | None = None) -> np.ndarray:
    """Move content by ``t`` (bilinear by default); borders replicate unless ``fill`` given."""
    img = np.asarray(img, dtype=np.float64)
    shift = (t.dy, t.dx) + (0,) * (img.ndim - 2)
    if fill is None:
        return ndimage.shift(img, shift, order=order, mode="nearest")
    return ndimage.shift(img, shift, order=order, mode="constant", cval=fill)


def crop_border(img, border: int) -> np.ndarray:
    if border < 0:
        raise InvalidArgument("border must be >= 0")
    h, w = np.shape(img)[:2]
    if 2 * border >= h or 2 * border >= w:
        raise InvalidArgument(f"crop of {border} px exceeds image {h}x{w}")
    if border == 0:
        return np.array(img, copy=True)
    return np.array(img[border:h - border, border:w - border], copy=True)


def translate_crop(img, t: Translation, border: int) -> np.ndarray:
    img = as_float_image(img)
    return np.clip(crop_border(translate(img, t), border), 0.0, 1.0)


def boundary_slopes(mask, central: float = 0.6, min_rows: int = 10) -> tuple[float, float]:
    """Lateral drift (columns per row, positive = rightwards going down) of the finger edges."""
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size < min_rows:
        raise DegenerateInput(f"only {rows.size} finger rows; need {min_rows}")
    n = rows.size
    lo = int(np.floor(n * (1 - central) / 2))
    hi = int(np.ceil(n * (1 + central) / 2))
    rows = rows[lo:hi]
    if rows.size < 2:
        raise DegenerateInput("too few rows in the central band")
    left = np.array([np.flatnonzero(mask[r])[0] for r in rows], dtype=np.float64)
    right = np.array([np.flatnonzero(mask[r])[-1] for r in rows], dtype=np.float64)
    y = rows.astype(np.float64)
    m_left = np.polyfit(y, left, 1)[0]
    m_right = np.polyfit(y, right, 1)[0]
    return float(m_left), float(m_right)


def upright_angle(mask) -> float:
    m_left, m_right = boundary_slopes(mask)
    return 0.5 * (np.arctan(m_left) + np.arctan(m_right))


def rotation_matrix(shape, theta: float) -> np.ndarray:
    """Affine map (for ``cv2.warpAffine``) rotating content by ``-theta`` about the center.

    ``theta`` is the finger-axis tilt as returned by ``upright_angle``: an axis
    drifting ``tan(theta)`` columns per row becomes vertical.
    """
    h, w = shape[:2]
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    # cv2 angle > 0 turns content counter-clockwise on screen; a rightward
    # drift going down is a clockwise lean, so undoing it is counter-clockwise.
    return cv2.getRotationMatrix2D(center, -np.degrees(theta), 1.0)


def rotate(img, theta: float, nearest: bool = False) -> np.ndarray:
    img = np.asarray(img)
    mat = rotation_matrix(img.shape, theta)
    h, w = img.shape[:2]
    if img.dtype == bool:
        out = cv2.warpAffine(img.astype(np.uint8), mat, (w, h), flags=cv2.INTER_NEAREST,
                             borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        return out.astype(bool)
    flags = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    out = cv2.warpAffine(img.astype(np.float64), mat, (w, h), flags=flags,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    return np.clip(out, 0.0, 1.0)


def upright_rotate(img, mask) -> tuple[np.ndarray, np.ndarray, float]:
    """Rotate image (bilinear, black fill) and mask (nearest) by ``-theta``."""
    theta = upright_angle(mask)
    return rotate(as_float_image(img), theta), rotate(np.asarray(mask, dtype=bool), theta), theta


def orientation_field(img, block: int = 8) -> OrientationField:
    if block < 4:
        raise InvalidArgument("block must be >= 4")
    gx, gy = sobel_gradients(luminance(img))
    h, w = gx.shape
    nby, nbx = h // block, w // block

    def blocks(a):
        return a[: nby * block, : nbx * block].reshape(nby, block, nbx, block).swapaxes(1, 2)

    bx, by = blocks(gx), blocks(gy)
    vx = (2 * bx * by).sum(axis=(2, 3))
    vy = (bx**2 - by**2).sum(axis=(2, 3))
    energy = (bx**2 + by**2).sum(axis=(2, 3))
    angle = np.mod(0.5 * np.arctan2(vx, vy), np.pi)
    coherence = np.clip(np.hypot(vx, vy) / (energy + 1e-8), 0.0, 1.0)
    return OrientationField(block, bx.mean(axis=(2, 3)), by.mean(axis=(2, 3)), vx, vy, angle, coherence)


def field_from_angles(angle, block: int = 1, coherence=None) -> OrientationField:
    """Wrap an analytic angle map (one angle per block) as an ``OrientationField``."""
    angle = np.mod(np.asarray(angle, dtype=np.float64), np.pi)
    coh = np.ones_like(angle) if coherence is None else np.asarray(coherence, dtype=np.float64)
    vx, vy = coh * np.sin(2 * angle), coh * np.cos(2 * angle)
    gx, gy = np.cos(angle), np.sin(angle)
    return OrientationField(block, gx, gy, vx, vy, angle, coh)


def smooth_field(field: OrientationField, sigma: float = 1.0) -> OrientationField:
    """Gaussian smoothing of the doubled-angle vectors."""
    if sigma <= 0:
        return field
    vx = ndimage.gaussian_filter(field.vx, sigma, mode="nearest")
    vy = ndimage.gaussian_filter(field.vy, sigma, mode="nearest")
    angle = np.mod(0.5 * np.arctan2(vx, vy), np.pi)
    return OrientationField(field.block_size, field.gx, field.gy, vx, vy, angle, field.coherence)


# Closed 8-neighbour loop, clockwise on screen (increasing atan2 with y down).
_LOOP = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)]


def _wrap_half_pi(d: np.ndarray) -> np.ndarray:
    """Wrap orientation differences into (-pi/2, pi/2]."""
    d = np.mod(d + np.pi / 2, np.pi) - np.pi / 2
    return np.where(d == -np.pi / 2, np.pi / 2, d)


def poincare_index(angle) -> np.ndarray:
    """Index for every interior block; border blocks are NaN."""
    a = np.asarray(angle, dtype=np.float64)
    h, w = a.shape
    out = np.full((h, w), np.nan)
    if h < 3 or w < 3:
        return out
    ring = [a[1 + dy:h - 1 + dy, 1 + dx:w - 1 + dx] for dy, dx in _LOOP]
    total = np.zeros((h - 2, w - 2))
    for k in range(8):
        total += _wrap_half_pi(ring[(k + 1) % 8] - ring[k])
    out[1:-1, 1:-1] = total / (2 * np.pi)
    return out


def poincare_core(field: OrientationField, valid=None, tol: float = 0.1) -> CorePoint:
    """Highest-coherence block whose index is ``0.5 +/- tol``.

    ``valid`` optionally restricts candidates to a boolean block map.
    """
    if min(field.shape) < 3:
        raise InvalidArgument("orientation field needs at least 3x3 blocks")
    idx = poincare_index(field.angle)
    cand = np.abs(np.nan_to_num(idx, nan=9.0) - 0.5) <= tol
    if valid is not None:
        cand &= np.asarray(valid, dtype=bool)
    if not cand.any():
        raise CoreNotFound("no block with Poincare index near +0.5")
    coh = np.where(cand, field.coherence, -np.inf)
    i, j = np.unravel_index(int(np.argmax(coh)), coh.shape)
    b = field.block_size
    return CorePoint(float((j + 0.5) * b), float((i + 0.5) * b), float(field.coherence[i, j]), float(idx[i, j]))


def shift_integer(img, dx: int, dy: int, fill=0):
    """Integer translation with constant fill (no wraparound)."""
    img = np.asarray(img)
    out = np.full_like(img, fill)
    h, w = img.shape[:2]
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    if abs(dx) < w and abs(dy) < h:
        out[yd, xd] = img[ys, xs]
    return out


def center_shift(shape, x: float, y: float) -> tuple[int, int]:
    h, w = shape[:2]
    return int(w // 2 - round(x)), int(h // 2 - round(y))


def center_on_core(img, mask, core: CorePoint) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if not (0 <= core.x <= w and 0 <= core.y <= h):
        raise InvalidArgument("core point outside the image")
    dx, dy = center_shift(img.shape, core.x, core.y)
    return shift_integer(img, dx, dy, 0.0), shift_integer(np.asarray(mask, dtype=bool), dx, dy, False)


def mask_centroid(mask) -> tuple[float, float]:
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if xs.size == 0:
        raise DegenerateInput("empty mask has no centroid")
    return float(xs.mean()), float(ys.mean())


def detect_core(img, mask=None, block: int = 8, smooth: float = 1.0, refine: bool = True) -> CorePoint:
    """Orientation field, smoothing, then Poincare core restricted to finger blocks.

    With ``refine`` the position is the centroid of the connected group of
    +0.5 blocks around the chosen one: a singular point lies inside the loops
    of up to four neighbouring blocks, and the highest-coherence block of that
    group is the one farthest from it.
    """
    field = smooth_field(orientation_field(img, block), smooth)
    valid = None
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        nby, nbx = field.shape
        mb = m[: nby * block, : nbx * block].reshape(nby, block, nbx, block).min(axis=(1, 3)) > 0
        # a candidate's whole 8-neighbour loop must sit on the finger
        valid = ndimage.binary_erosion(mb, structure=np.ones((3, 3)), border_value=0)
    core = poincare_core(field, valid)
    if not refine:
        return core
    idx = poincare_index(field.angle)
    cand = np.abs(np.nan_to_num(idx, nan=9.0) - 0.5) <= 0.1
    if valid is not None:
        cand &= valid
    labels, _ = ndimage.label(cand, structure=np.ones((3, 3)))
    ys, xs = np.nonzero(labels == labels[int(core.y // block), int(core.x // block)])
    return CorePoint(float((xs.mean() + 0.5) * block), float((ys.mean() + 0.5) * block), core.coherence,
                     core.poincare)
