"""Seeded synthetic flash / non-flash fingerphoto generator.

Every random draw comes from a Philox (counter-based) stream keyed by the
master seed and a name path, e.g. ``("identity", 7)`` or
``("impression", 7, 2, 13)``, so any single sample can be regenerated in
isolation and corpora are identical across platforms.
"""

from __future__ import annotations

import csv
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np

from .geometry import OrientationField, field_from_angles
from .imaging import filter2d, write_png
from .errors import InvalidArgument

KINDS = ("loop", "whorl", "arch")


def rng_for(seed: int, *names) -> np.random.Generator:
    parts = [int(seed) & 0xFFFFFFFF]
    for n in names:
        parts.append(zlib.crc32(str(n).encode()))
    key = np.random.SeedSequence(parts).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def pattern_angles(kind: str, x, y, core, scale: float, rotation: float = 0.0, arch_amp: float = 0.3) -> np.ndarray:
    """Ridge-normal angle (mod pi) of an analytic pattern at coordinates ``x, y``.

    loop: half the polar angle about the core (index +1/2); whorl: the polar
    angle (index +1); delta: minus half (index -1/2); arch: a gentle hump
    with no singular point.  ``scale`` sets the arch width.
    """
    x0, y0 = core
    dx, dy = np.asarray(x, dtype=np.float64) - x0, np.asarray(y, dtype=np.float64) - y0
    if kind == "loop":
        a = 0.5 * np.arctan2(dy, dx)
    elif kind == "whorl":
        a = np.arctan2(dy, dx)
    elif kind == "delta":
        a = -0.5 * np.arctan2(dy, dx)
    elif kind == "arch":
        s = 0.25 * scale
        slope = arch_amp * (dx / s) * np.exp(-(dx**2) / (2 * s**2)) * np.exp(-(dy**2) / (2 * (1.5 * s) ** 2))
        a = np.pi / 2 + np.arctan(slope)
    else:
        raise InvalidArgument(f"unknown pattern kind {kind!r}")
    return np.mod(a + rotation, np.pi)


def orientation_map(kind: str, core, shape, rotation: float = 0.0, arch_amp: float = 0.3) -> np.ndarray:
    """Per-pixel ridge-normal angle map."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    return pattern_angles(kind, x, y, core, max(h, w), rotation, arch_amp)


def synth_orientation(kind: str, core, shape, block: int = 8, rotation: float = 0.0) -> OrientationField:
    """Analytic field sampled at block centers (coherence 1)."""
    h, w = shape
    c = np.arange(max(h, w) // block + 1) * block + (block - 1) / 2
    yy, xx = np.meshgrid(c[: h // block], c[: w // block], indexing="ij")
    return field_from_angles(pattern_angles(kind, xx, yy, core, max(h, w), rotation), block)


def growth_kernel(theta: float, wavelength: float, across: float = 0.5, along: float = 1.2) -> np.ndarray:
    """Zero-mean Gabor elongated along the ridge; the carrier varies along ``theta``."""
    sa, sl = across * wavelength, along * wavelength
    half = int(np.ceil(2.5 * max(sa, sl)))
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    u = x * np.cos(theta) + y * np.sin(theta)
    v = -x * np.sin(theta) + y * np.cos(theta)
    k = np.exp(-(u**2) / (2 * sa**2) - v**2 / (2 * sl**2)) * np.cos(2 * np.pi * u / wavelength)
    return k - k.mean()


def synth_fingerprint(angle_map, wavelength: float, seed: int, iterations: int = 8, bins: int = 24) -> np.ndarray:
    """Ridge pattern grown from seeded noise by orientation-steered Gabor filtering.

    Each pass filters with the two bank kernels bracketing the local
    ridge-normal angle (linearly blended) and saturates the result; ridges
    settle perpendicular to the normals and the noise seed fixes where
    endings and bifurcations appear.
    """
    if wavelength < 4:
        raise InvalidArgument("wavelength must be >= 4")
    angle_map = np.asarray(angle_map, dtype=np.float64)
    rng = rng_for(seed, "print")
    x = rng.standard_normal(angle_map.shape)
    pos = np.mod(angle_map, np.pi) / np.pi * bins
    lo = np.floor(pos).astype(int) % bins
    frac = pos - np.floor(pos)
    kernels = [growth_kernel(b * np.pi / bins, wavelength) for b in range(bins)]
    used = np.unique(np.concatenate([lo, (lo + 1) % bins]).ravel())
    for _ in range(iterations):
        resp = {b: filter2d(x, kernels[b]) for b in used}
        out = np.zeros_like(x)
        for b in used:
            out += np.where(lo == b, 1 - frac, 0.0) * resp[b]
            out += np.where((lo + 1) % bins == b, frac, 0.0) * resp[b]
        s = out.std()
        x = np.tanh(2.0 * out / (s if s > 0 else 1.0))
    return np.clip(0.5 + 0.5 * x, 0.0, 1.0)


@dataclass
class SynthSpec:
    identity_seed: int
    impression_seed: int
    kind: str = "loop"
    wavelength: float = 7.0
    core_x: float = 0.5            # fractions of the print canvas
    core_y: float = 0.45
    pattern_rotation: float = 0.0  # radians
    size: int = 72
    ellipse_cx: float = 0.5        # fractions of the frame
    ellipse_cy: float = 0.6
    ellipse_ax: float = 0.32
    ellipse_ay: float = 0.55
    tilt_deg: float = 0.0          # finger placement
    place_dx: float = 0.0
    place_dy: float = 0.0
    glow_amp: float = 0.18
    glow_scale: float = 0.35
    glow_x: float = 0.5
    glow_y: float = 0.45
    spec_amp: float = 0.2
    spec_radius: float = 0.04
    spec_x: float = 0.55
    spec_y: float = 0.4
    red_bias: float = 0.08
    jitter_dx: float = 0.0         # non-flash pose offset
    jitter_dy: float = 0.0
    jitter_deg: float = 0.0
    noise_sigma: float = 0.01
    master_seed: int = 0


SKIN = np.array([0.62, 0.40, 0.36])
RIDGE_AMP = np.array([0.05, 0.16, 0.22])
BACKGROUND = np.array([0.45, 0.45, 0.45])


def identity_params(master_seed: int, identity: int) -> dict:
    r = rng_for(master_seed, "identity", identity)
    return {
        "identity_seed": int(r.integers(2**31)),
        "kind": KINDS[int(r.choice(3, p=[0.5, 0.3, 0.2]))],
        "wavelength": float(r.uniform(6.0, 8.0)),
        "core_x": float(r.uniform(0.38, 0.62)),
        "core_y": float(r.uniform(0.32, 0.55)),
        "pattern_rotation": float(r.uniform(-0.35, 0.35)),
    }


def make_spec(master_seed: int, identity: int, session: int, impression: int, size: int = 72,
              jitter_px: float = 6.0, jitter_deg: float = 3.0) -> SynthSpec:
    r = rng_for(master_seed, "impression", identity, session, impression)
    p = identity_params(master_seed, identity)
    return SynthSpec(
        impression_seed=int(r.integers(2**31)), size=size, master_seed=master_seed,
        ellipse_cx=float(r.uniform(0.46, 0.54)), ellipse_cy=float(r.uniform(0.56, 0.64)),
        ellipse_ax=float(r.uniform(0.30, 0.34)), ellipse_ay=float(r.uniform(0.52, 0.58)),
        tilt_deg=float(r.uniform(-8, 8)),
        place_dx=float(r.uniform(-2, 2)), place_dy=float(r.uniform(-2, 2)),
        glow_amp=float(r.uniform(0.12, 0.22)), glow_scale=float(r.uniform(0.3, 0.45)),
        glow_x=float(r.uniform(0.35, 0.65)), glow_y=float(r.uniform(0.3, 0.6)),
        spec_amp=float(r.uniform(0.1, 0.25)), spec_radius=float(r.uniform(0.03, 0.05)),
        spec_x=float(r.uniform(0.4, 0.6)), spec_y=float(r.uniform(0.3, 0.6)),
        red_bias=float(r.uniform(0.05, 0.1)),
        jitter_dx=float(r.uniform(-jitter_px, jitter_px)), jitter_dy=float(r.uniform(-jitter_px, jitter_px)),
        jitter_deg=float(r.uniform(-jitter_deg, jitter_deg)),
        **p,
    )


def print_canvas(spec: SynthSpec) -> np.ndarray:
    """Identity print on a canvas 1.25x the frame so placement never exposes its edge."""
    n = int(round(spec.size * 1.25))
    core = (spec.core_x * n, spec.core_y * n)
    angles = orientation_map(spec.kind, core, (n, n), spec.pattern_rotation)
    return synth_fingerprint(angles, spec.wavelength, spec.identity_seed)


def _place(canvas: np.ndarray, spec: SynthSpec) -> np.ndarray:
    """Rotate the canvas by the finger tilt and crop the frame around its center."""
    n, s = canvas.shape[0], spec.size
    c = (n - 1) / 2.0
    mat = cv2.getRotationMatrix2D((c, c), spec.tilt_deg, 1.0)
    off = (n - s) / 2.0
    mat[0, 2] += spec.place_dx - off
    mat[1, 2] += spec.place_dy - off
    return cv2.warpAffine(canvas, mat, (s, s), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)


def finger_mask(spec: SynthSpec) -> np.ndarray:
    s = spec.size
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    cx = spec.ellipse_cx * s + spec.place_dx
    cy = spec.ellipse_cy * s + spec.place_dy
    t = np.radians(spec.tilt_deg)
    # cv2 positive angle turns content counter-clockwise on screen
    u = (x - cx) * np.cos(t) - (y - cy) * np.sin(t)
    v = (x - cx) * np.sin(t) + (y - cy) * np.cos(t)
    return (u / (spec.ellipse_ax * s)) ** 2 + (v / (spec.ellipse_ay * s)) ** 2 <= 1.0


def _blob(s, cx, cy, sigma):
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    return np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma**2))


def _smooth_field(rng, s, cells=4):
    g = rng.uniform(-1, 1, (cells, cells))
    return cv2.resize(g, (s, s), interpolation=cv2.INTER_CUBIC)


@dataclass
class SynthPair:
    flash: np.ndarray
    nonflash: np.ndarray
    mask: np.ndarray
    true_shift: tuple
    true_angle: float
    ridge: np.ndarray          # placed print in [0, 1], flash frame


def synth_pair(spec: SynthSpec, canvas: np.ndarray | None = None) -> SynthPair:
    """Render a flash / non-flash capture of one impression.

    The flash frame carries the sharp print, a broad glow, a specular spot
    and a smooth red subsurface term.  The non-flash frame is dimmer and
    blurred, with less glow, and displaced by the pose jitter, which is
    returned as ``true_shift`` / ``true_angle`` (degrees).
    """
    s = spec.size
    canvas = print_canvas(spec) if canvas is None else canvas
    ridge = _place(canvas, spec)
    r = rng_for(spec.master_seed, "render", spec.identity_seed, spec.impression_seed)
    mask = finger_mask(spec)
    alpha = cv2.GaussianBlur(mask.astype(np.float64), (0, 0), 0.7)
    rc = ridge - 0.5
    glow = spec.glow_amp * _blob(s, spec.glow_x * s, spec.glow_y * s, spec.glow_scale * s)
    spot = spec.spec_amp * _blob(s, spec.spec_x * s, spec.spec_y * s, spec.spec_radius * s)
    red = spec.red_bias * _smooth_field(r, s)

    skin = SKIN[None, None, :] + RIDGE_AMP[None, None, :] * rc[..., None] + (glow + spot)[..., None]
    skin[..., 0] += red
    bg = BACKGROUND[None, None, :] + 0.3 * glow[..., None]
    flash = alpha[..., None] * skin + (1 - alpha[..., None]) * bg

    blurred = cv2.GaussianBlur(rc, (0, 0), 1.2)
    shade = 0.05 * _smooth_field(r, s, 3)
    skin_nf = 0.55 * SKIN[None, None, :] + 0.3 * RIDGE_AMP[None, None, :] * blurred[..., None] \
        + (0.4 * glow + shade)[..., None]
    skin_nf[..., 0] += 0.5 * red
    bg_nf = 0.6 * BACKGROUND[None, None, :] + (0.12 * glow + shade)[..., None]
    nonflash = alpha[..., None] * skin_nf + (1 - alpha[..., None]) * bg_nf
    c = (s - 1) / 2.0
    mat = cv2.getRotationMatrix2D((c, c), spec.jitter_deg, 1.0)
    mat[:, 2] += (spec.jitter_dx, spec.jitter_dy)
    nonflash = cv2.warpAffine(nonflash, mat, (s, s), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)

    flash = np.clip(flash + r.normal(0, spec.noise_sigma, flash.shape), 0.0, 1.0)
    nonflash = np.clip(nonflash + r.normal(0, spec.noise_sigma, nonflash.shape), 0.0, 1.0)
    return SynthPair(flash, nonflash, mask, (spec.jitter_dx, spec.jitter_dy), spec.jitter_deg, ridge)


def synth_contact(spec: SynthSpec, canvas: np.ndarray | None = None) -> np.ndarray:
    """Contact-sensor style impression: binarized dark ridges on white, pressure-limited area."""
    canvas = print_canvas(spec) if canvas is None else canvas
    ridge = _place(canvas, spec)
    r = rng_for(spec.master_seed, "contact", spec.identity_seed, spec.impression_seed)
    pressure = 0.5 + 0.1 * _smooth_field(r, spec.size)
    ink = (ridge > pressure).astype(np.float64)
    ink = cv2.GaussianBlur(ink, (0, 0), 0.6)
    img = 1.0 - 0.85 * ink
    mask = finger_mask(spec)
    img = np.where(mask, img, 1.0)
    return np.clip(img + r.normal(0, 0.02, img.shape), 0.0, 1.0)


def sample_path(root, identity: int, session: int, impression: int, kind: str) -> Path:
    base = Path(root) / "subjects" / f"{identity:03d}" / f"session{session}"
    if kind == "mask":
        return base / "masks" / f"{impression:02d}_mask.png"
    return base / f"{impression:02d}_{kind}.png"


MANIFEST_FIELDS = ["identity", "session", "impression", "kind", "wavelength", "core_x", "core_y",
                   "true_dx", "true_dy", "true_angle", "identity_seed", "impression_seed"]


def synth_corpus(root, n_ids: int = 20, impressions: int = 4, sessions: int = 2, seed: int = 0,
                 size: int = 72, threads: int = 1) -> list[dict]:
    """Write the dataset tree and ``manifest.csv``; returns the manifest rows."""
    if n_ids < 2:
        raise InvalidArgument("need at least two identities")
    root = Path(root)

    def one_identity(identity: int) -> list[dict]:
        rows = []
        canvas = None
        for session in range(1, sessions + 1):
            for imp in range(1, impressions + 1):
                spec = make_spec(seed, identity, session, imp, size)
                if canvas is None:
                    canvas = print_canvas(spec)
                pair = synth_pair(spec, canvas)
                write_png(sample_path(root, identity, session, imp, "flash"), pair.flash)
                write_png(sample_path(root, identity, session, imp, "nonflash"), pair.nonflash)
                write_png(sample_path(root, identity, session, imp, "mask"), pair.mask)
                rows.append({
                    "identity": identity, "session": session, "impression": imp, "kind": spec.kind,
                    "wavelength": f"{spec.wavelength:.6f}", "core_x": f"{spec.core_x:.6f}",
                    "core_y": f"{spec.core_y:.6f}", "true_dx": f"{spec.jitter_dx:.6f}",
                    "true_dy": f"{spec.jitter_dy:.6f}", "true_angle": f"{spec.jitter_deg:.6f}",
                    "identity_seed": spec.identity_seed, "impression_seed": spec.impression_seed,
                })
        return rows

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_id = list(pool.map(one_identity, range(1, n_ids + 1)))
    rows = [r for group in per_id for r in group]
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def spec_dict(spec: SynthSpec) -> dict:
    return asdict(spec)
