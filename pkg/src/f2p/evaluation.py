"""Ridge-quality metrics and verification statistics (AUC, EER, FAR/FRR, separation)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.feature import canny

from .errors import InvalidArgument
from .imaging import filter2d, local_contrast, luminance

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
CANNY_LOW, CANNY_HIGH = 0.1, 0.3


def sharpness(img, mask=None) -> float:
    """Variance of the 3x3 Laplacian response."""
    lap = filter2d(img, LAPLACIAN)
    if mask is not None:
        lap = lap[np.asarray(mask, dtype=bool)]
    return float(lap.var()) if lap.size else 0.0


def edge_clarity(img, mask=None, sigma: float = 1.0) -> float:
    """Fraction of Canny edge pixels; hysteresis at 10% / 30% of the gradient-magnitude range."""
    img = np.asarray(img, dtype=np.float64)
    smooth = ndimage.gaussian_filter(img, sigma, mode="nearest")
    mag = np.hypot(ndimage.sobel(smooth, axis=0), ndimage.sobel(smooth, axis=1))
    span = float(mag.max() - mag.min())
    if span <= 1e-12:
        return 0.0
    lo = float(mag.min()) + CANNY_LOW * span
    hi = float(mag.min()) + CANNY_HIGH * span
    edges = canny(img, sigma=sigma, low_threshold=lo, high_threshold=hi, mode="nearest")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        return float(edges[m].mean()) if m.any() else 0.0
    return float(edges.mean())


def ridge_quality(img, block: int = 16, mask=None) -> tuple[float, float, float]:
    """``(local_contrast, sharpness, edge_clarity)`` of a grayscale image (RGB is converted)."""
    if block < 2:
        raise InvalidArgument("block must be >= 2")
    g = luminance(img)
    return local_contrast(g, block, mask), sharpness(g, mask), edge_clarity(g, mask)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgument("cosine similarity of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def _unit_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(n == 0):
        raise InvalidArgument("zero embedding vector")
    return x / n


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.all(np.isfinite(self.genuine)) and np.all(np.isfinite(self.impostor))):
            raise InvalidArgument("scores must be finite")


def pair_scores(emb1, ids1, emb2, ids2) -> ScoreSet:
    """Full cross product of session-1 vs session-2 cosine scores split by identity."""
    ids1, ids2 = np.asarray(ids1), np.asarray(ids2)
    if len(ids1) != len(emb1) or len(ids2) != len(emb2):
        raise InvalidArgument("one identity label per embedding required")
    if not np.intersect1d(ids1, ids2).size:
        raise InvalidArgument("sessions share no identity")
    s = _unit_rows(emb1) @ _unit_rows(emb2).T
    same = ids1[:, None] == ids2[None, :]
    return ScoreSet(s[same], s[~same])


def all_pair_scores(emb, ids) -> ScoreSet:
    """Every unordered pair within one set of embeddings."""
    ids = np.asarray(ids)
    s = _unit_rows(emb) @ _unit_rows(emb).T
    iu = np.triu_indices(len(ids), k=1)
    same = (ids[:, None] == ids[None, :])[iu]
    return ScoreSet(s[iu][same], s[iu][~same])


def auc_pairwise(genuine, impostor) -> float:
    """P(genuine > impostor) + 0.5 P(tie), via ranks (exact)."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    less = np.searchsorted(i, g, side="left")          # impostors strictly below each genuine
    leq = np.searchsorted(i, g, side="right")
    wins = less.sum() + 0.5 * (leq - less).sum()
    return float(wins / (g.size * i.size))


def far_frr_curve(genuine, impostor):
    """Rates at every distinct score plus a +inf sentinel; accept when score >= threshold."""
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    i = np.sort(np.asarray(impostor, dtype=np.float64))
    thr = np.append(np.unique(np.concatenate([g, i])), np.inf)
    far = 1.0 - np.searchsorted(i, thr, side="left") / i.size
    frr = np.searchsorted(g, thr, side="left") / g.size
    return thr, far, frr


def auc_trapezoid(far, frr) -> float:
    """Area under the ROC (TPR against FAR) by trapezoids."""
    tpr = 1.0 - np.asarray(frr)
    far = np.asarray(far)
    order = np.lexsort((tpr, far))
    x, y = np.concatenate([[0.0], far[order], [1.0]]), np.concatenate([[0.0], tpr[order], [1.0]])
    return float(np.trapezoid(y, x))


def eer_interpolated(thr, far, frr) -> tuple[float, float]:
    """EER by linear interpolation at the FAR/FRR crossing; for large score sets."""
    diff = np.asarray(far) - np.asarray(frr)
    k = int(np.flatnonzero(diff <= 0)[0])
    if k == 0 or diff[k] == 0:
        return float(far[k] * 100), float(thr[k])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    rate = far[k - 1] + t * (far[k] - far[k - 1])
    th = thr[k - 1] + t * (thr[k] - thr[k - 1]) if np.isfinite(thr[k]) else thr[k - 1]
    return float(rate * 100), float(th)


@dataclass
class VerificationReport:
    auc: float
    eer: float                       # percent
    eer_threshold: float
    thresholds: np.ndarray = field(repr=False)
    far: np.ndarray = field(repr=False)
    frr: np.ndarray = field(repr=False)
    operating_points: dict = field(default_factory=dict)
    n_genuine: int = 0
    n_impostor: int = 0

    def summary(self) -> dict:
        return {"auc": self.auc, "eer_percent": self.eer, "eer_threshold": self.eer_threshold,
                "n_genuine": self.n_genuine, "n_impostor": self.n_impostor,
                "operating_points": self.operating_points}

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        with open(out / "curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "far", "frr", "tpr"])
            for t, a, r in zip(self.thresholds, self.far, self.frr):
                w.writerow([repr(float(t)), repr(float(a)), repr(float(r)), repr(float(1 - r))])


def verification_metrics(s: ScoreSet) -> VerificationReport:
    if s.genuine.size == 0 or s.impostor.size == 0:
        raise InvalidArgument("need both genuine and impostor scores")
    thr, far, frr = far_frr_curve(s.genuine, s.impostor)
    k = int(np.argmin(np.abs(far - frr)))
    ops = {}
    for target in (0.01, 0.001):
        ok = np.flatnonzero(far <= target)
        j = int(ok[0])
        ops[f"frr_at_far_{target:g}"] = float(frr[j])
    return VerificationReport(
        auc=auc_pairwise(s.genuine, s.impostor),
        eer=float((far[k] + frr[k]) / 2 * 100),
        eer_threshold=float(thr[k]),
        thresholds=thr, far=far, frr=frr, operating_points=ops,
        n_genuine=int(s.genuine.size), n_impostor=int(s.impostor.size),
    )


INTRA_FLOOR = 1e-9


def separation_stats(emb, ids) -> dict:
    """Mean intra / inter identity distances and their ratio, Euclidean and cosine."""
    x = np.asarray(emb, dtype=np.float64)
    ids = np.asarray(ids)
    if np.unique(ids).size < 2:
        raise InvalidArgument("need at least two identities")
    iu = np.triu_indices(len(ids), k=1)
    same = (ids[:, None] == ids[None, :])[iu]
    if not same.any():
        raise InvalidArgument("no identity has two samples")
    sq = (x**2).sum(axis=1)
    d_euc = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0))[iu]
    u = _unit_rows(x)
    d_cos = (1.0 - u @ u.T)[iu]
    out = {}
    for name, d in (("euclidean", d_euc), ("cosine", d_cos)):
        intra, inter = float(d[same].mean()), float(d[~same].mean())
        degenerate = intra < INTRA_FLOOR
        out[name] = {"intra": intra, "inter": inter,
                     "sep_ratio": inter / max(intra, INTRA_FLOOR), "degenerate": degenerate}
    return out


def save_plots(report: VerificationReport, out_dir, title: str = "") -> list[Path]:
    """ROC and FAR/FRR-vs-threshold plots as PNG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(report.far, 1 - report.frr, lw=1.5)
    ax.plot([0, 1], [0, 1], "k--", lw=0.5)
    ax.set_xlabel("FAR")
    ax.set_ylabel("TPR")
    ax.set_title(f"{title} ROC (AUC {report.auc:.3f})".strip())
    paths.append(out / "roc.png")
    fig.savefig(paths[-1], dpi=100, metadata={"Software": None})
    plt.close(fig)
    fig, ax = plt.subplots(figsize=(4, 4))
    thr = np.where(np.isfinite(report.thresholds), report.thresholds, np.nan)
    ax.plot(thr, report.far, label="FAR")
    ax.plot(thr, report.frr, label="FRR")
    ax.axvline(report.eer_threshold, color="k", lw=0.5)
    ax.set_xlabel("cosine threshold")
    ax.set_title(f"{title} EER {report.eer:.2f}%".strip())
    ax.legend()
    paths.append(out / "far_frr.png")
    fig.savefig(paths[-1], dpi=100, metadata={"Software": None})
    plt.close(fig)
    return paths
