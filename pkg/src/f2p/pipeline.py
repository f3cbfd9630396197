"""Preprocessing chain, spatial normalization and the composed fusion -> enhancer -> embedder pipeline."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import geometry, spectral
from .embedding import EmbeddingModel, fine_tune_loss, load_embedder, mine_semi_hard
from .enhancer import EnhancerModel, load_enhancer
from .errors import ConfigError, CoreNotFound, DegenerateInput, InvalidArgument
from .evaluation import all_pair_scores, verification_metrics
from .fusion import FusionModel, load_fusion
from .imaging import as_float_image, luminance, pad_to_square
from .tensor_ops import gabor_bank, to_tensor
from .training import check_finite, log, seed_everything, split_indices, stack


@dataclass
class PreprocessConfig:
    border: int = 4                  # pixels cropped from each side after alignment
    rg_threshold: float | str = spectral.DEFAULT_RG_THRESHOLD
    closing_radius: int = 5
    energy_fraction: float = spectral.DEFAULT_ENERGY_FRACTION
    side: int = 64                   # square network input


@dataclass
class Prepared:
    flash: np.ndarray                # whitened, padded
    nonflash: np.ndarray
    diff: np.ndarray
    mask: np.ndarray
    shift: geometry.Translation
    cutoff: int


def align_pair(flash, nonflash, border: int):
    """Register the non-flash frame onto the flash frame and crop both."""
    t = geometry.phase_correlate(luminance(flash), luminance(nonflash))
    back = geometry.Translation(-t.dx, -t.dy)
    return geometry.crop_border(flash, border), geometry.translate_crop(nonflash, back, border), t


def finish_pair(fl, nf, m, cfg: PreprocessConfig | None = None, shift=None) -> Prepared:
    """Whiten, spectral-subtract and pad an aligned, cropped pair with its mask."""
    cfg = cfg or PreprocessConfig()
    m = np.asarray(m, dtype=bool)
    fl_w, nf_w = spectral.whiten_background(fl, m), spectral.whiten_background(nf, m)
    f_c = spectral.cutoff_for(fl_w, cfg.energy_fraction)
    diff = spectral.whiten_background(spectral.spectral_subtract(fl_w, nf_w, f_c), m)
    out = []
    for img in (fl_w, nf_w, diff):
        padded, valid = pad_to_square(img, cfg.side)
        out.append(np.where(valid[..., None], padded, 1.0))
    side_mask, _ = pad_to_square(m.astype(np.float64), cfg.side)
    return Prepared(out[0], out[1], out[2], side_mask > 0.5, shift or geometry.Translation(0.0, 0.0), f_c)


def preprocess_pair(flash, nonflash, cfg: PreprocessConfig | None = None, mask=None) -> Prepared:
    """Align, crop, segment, whiten, spectral-subtract and pad one capture pair.

    ``mask`` (in the uncropped frame) replaces R/G segmentation when given.
    """
    cfg = cfg or PreprocessConfig()
    flash, nonflash = as_float_image(flash), as_float_image(nonflash)
    fl, nf, t = align_pair(flash, nonflash, cfg.border)
    if mask is None:
        m = spectral.segment_rg(fl, cfg.rg_threshold, cfg.closing_radius)
    else:
        m = geometry.crop_border(np.asarray(mask, dtype=bool), cfg.border)
    return finish_pair(fl, nf, m, cfg, t)


def spatial_normalize(images, mask, block: int = 8):
    """Upright-rotate by the mask's boundary slopes, then centre on the core.

    ``images`` share one frame; the core comes from the first image's
    luminance.  Falls back to the mask centroid when no core is found.
    Background is re-whitened after the transform.  Returns
    ``(images, mask, info)``.
    """
    mask = np.asarray(mask, dtype=bool)
    theta = geometry.upright_angle(mask)
    rot = [geometry.rotate(im, theta) for im in images]
    rmask = geometry.rotate(mask, theta, nearest=True)
    info = {"theta": theta, "core": None}
    try:
        core = geometry.detect_core(luminance(rot[0]), rmask, block)
        cx, cy = core.x, core.y
        info["core"] = (cx, cy)
    except (CoreNotFound, DegenerateInput, InvalidArgument):  # no core, or too few blocks
        cx, cy = geometry.mask_centroid(rmask)
        log.info("core not found; centring on mask centroid")
    dx, dy = geometry.center_shift(rmask.shape, cx, cy)
    moved = [geometry.shift_integer(im, dx, dy, 0.0) for im in rot]
    mmask = geometry.shift_integer(rmask, dx, dy, False)
    moved = [np.where(mmask[..., None] if im.ndim == 3 else mmask, im, 1.0) for im in moved]
    return moved, mmask, info


@dataclass
class F2PPipeline:
    fusion: FusionModel
    enhancer: EnhancerModel
    embedder: EmbeddingModel
    spatial_transform: bool = False
    refine: bool = True              # Gabor-bank refinement of the enhancer output

    def modules(self):
        return self.fusion, self.enhancer, self.embedder


def compose(pipe: F2PPipeline, flash: torch.Tensor, nonflash: torch.Tensor) -> torch.Tensor:
    """Batched differentiable forward: fused RGB -> enhanced (refined) gray -> unit embedding."""
    fuse, _ = pipe.fusion(flash, nonflash)
    enh = pipe.enhancer(fuse)
    if pipe.refine:
        enh = gabor_bank(enh, pipe.enhancer.cfg.gabor)
    s = pipe.embedder.cfg.input_size
    if enh.shape[-1] != s or enh.shape[-2] != s:
        enh = F.interpolate(enh, size=(s, s), mode="bilinear", align_corners=False, antialias=True)
    return pipe.embedder(enh)


def _inputs(pipe: F2PPipeline, flash, nonflash, mask):
    s = pipe.fusion.cfg.image_size
    for name, img in (("flash", flash), ("nonflash", nonflash)):
        if np.shape(img) != (s, s, 3):
            raise InvalidArgument(f"{name} must be {s}x{s}x3, got {np.shape(img)}")
    if pipe.spatial_transform:
        (flash, nonflash), mask, _ = spatial_normalize([flash, nonflash], mask)
    return flash, nonflash


@torch.no_grad()
def f2p_forward(pipe: F2PPipeline, flash, nonflash, mask) -> np.ndarray:
    """Embedding of one preprocessed pair."""
    flash, nonflash = _inputs(pipe, flash, nonflash, mask)
    for m in pipe.modules():
        m.eval()
    return compose(pipe, to_tensor(flash), to_tensor(nonflash)).double().numpy()[0]


@torch.no_grad()
def f2p_embed_all(pipe: F2PPipeline, pairs, batch: int = 16) -> np.ndarray:
    """Embeddings for a list of ``(flash, nonflash, mask)``."""
    for m in pipe.modules():
        m.eval()
    fl, nf = [], []
    for f, n, m in pairs:
        a, b = _inputs(pipe, f, n, m)
        fl.append(a)
        nf.append(b)
    out = []
    for i in range(0, len(fl), batch):
        out.append(compose(pipe, stack(fl[i:i + batch]), stack(nf[i:i + batch])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, pipe.embedder.cfg.dim))


# fusion / enhancer decoders and the whole embedder train; encoders stay fixed
FUSION_TRAINABLE = ("decoder", "head", "edge")
ENHANCER_TRAINABLE = ("up", "head")


@dataclass
class FineTuneConfig:
    delta: float = 0.08
    w_t: float = 0.75
    w_i: float = 0.25
    lr: float = 1e-6
    weight_decay: float = 1e-7
    epochs: int = 10
    clip: float = 1.0
    split: tuple = (0.8, 0.2, 0.0)
    batch_size: int = 16
    triplets_per_identity: int = 6
    margin: float = 0.2
    seed: int = 0
    fusion_trainable: tuple = FUSION_TRAINABLE
    enhancer_trainable: tuple = ENHANCER_TRAINABLE

    def __post_init__(self):
        if self.w_t + self.w_i <= 0:
            raise ConfigError("w_t + w_i must be positive")
        if self.delta < 0:
            raise ConfigError("delta must be >= 0")
        if self.clip <= 0:
            raise ConfigError("clip norm must be positive")

    def to_meta(self) -> dict:
        return asdict(self)


def _apply_freeze(module: torch.nn.Module, prefixes) -> None:
    for name, p in module.named_parameters():
        p.requires_grad_(name.startswith(tuple(prefixes)))


def _split_by_identity(labels, fractions, seed):
    ids = np.unique(labels)
    tr, va, _ = split_indices(ids.size, fractions, seed)
    val_ids = set(ids[va].tolist()) if va.size and not np.array_equal(va, tr) else set()
    train = np.flatnonzero([l not in val_ids for l in labels])
    val = np.flatnonzero([l in val_ids for l in labels])
    return train, val


def _val_eer(pipe, pairs, labels, idx) -> float:
    if idx.size < 2 or np.unique(labels[idx]).size < 2:
        return float("nan")
    emb = f2p_embed_all(pipe, [pairs[i] for i in idx])
    s = all_pair_scores(emb, labels[idx])
    if s.genuine.size == 0:
        return float("nan")
    return verification_metrics(s).eer


def fine_tune_f2p(pipe: F2PPipeline, pairs, labels, cfg: FineTuneConfig | None = None):
    """End-to-end fine-tuning of a copy of ``pipe`` with the soft-margin objective.

    ``pairs`` are preprocessed ``(flash, nonflash, mask)``; the split is by
    identity.  Fusion and enhancer run in eval mode (frozen batch-norm
    statistics); only decoder-side parameters and the embedder get updates.
    Records per-step gradient norms after clipping and per-epoch validation EER.
    """
    cfg = cfg or FineTuneConfig()
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        raise InvalidArgument("need at least two identities")
    rng = seed_everything(cfg.seed)
    tuned = copy.deepcopy(pipe)
    _apply_freeze(tuned.fusion, cfg.fusion_trainable)
    _apply_freeze(tuned.enhancer, cfg.enhancer_trainable)
    tuned.embedder.requires_grad_(True)
    params = [p for m in tuned.modules() for p in m.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    prepared = [_inputs(tuned, f, n, m) for f, n, m in pairs]
    fl_all = stack([p[0] for p in prepared])
    nf_all = stack([p[1] for p in prepared])
    train_idx, val_idx = _split_by_identity(labels, cfg.split, cfg.seed)
    eval_pairs = [(p[0], p[1], None) for p in prepared]
    plain = F2PPipeline(tuned.fusion, tuned.enhancer, tuned.embedder, False, tuned.refine)

    history = [{"epoch": 0, "loss": float("nan"), "val_eer": _val_eer(plain, eval_pairs, labels, val_idx),
                "max_grad_norm": 0.0}]
    grad_norms = []
    for epoch in range(1, cfg.epochs + 1):
        emb = f2p_embed_all(plain, [eval_pairs[i] for i in train_idx])
        triplets = mine_semi_hard(emb, labels[train_idx], cfg.margin, cfg.triplets_per_identity,
                                  seed=int(rng.integers(2**31)))
        order = rng.permutation(len(triplets))
        tuned.fusion.eval()
        tuned.enhancer.eval()
        tuned.embedder.train()
        total, steps_norm = 0.0, []
        for i in range(0, order.size, cfg.batch_size):
            batch = [triplets[j] for j in order[i:i + cfg.batch_size]]
            nb = len(batch)
            idx = train_idx[[t.anchor for t in batch] + [t.positive for t in batch] + [t.negative for t in batch]]
            idx_t = torch.as_tensor(idx)
            e = compose(tuned, fl_all[idx_t], nf_all[idx_t])
            loss = fine_tune_loss(e[:nb], e[nb:2 * nb], e[2 * nb:], cfg.delta, cfg.w_t, cfg.w_i)
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip)
            norm = torch.linalg.vector_norm(
                torch.stack([torch.linalg.vector_norm(p.grad) for p in params if p.grad is not None])).item()
            steps_norm.append(norm)
            opt.step()
            total += loss.item() * nb
        grad_norms.extend(steps_norm)
        row = {"epoch": epoch, "loss": total / max(1, len(triplets)),
               "val_eer": _val_eer(plain, eval_pairs, labels, val_idx),
               "max_grad_norm": max(steps_norm) if steps_norm else 0.0}
        check_finite(row["loss"], epoch)
        history.append(row)
        log.info("fine-tune epoch %d loss %.5f val EER %.2f", epoch, row["loss"], row["val_eer"])
    for m in tuned.modules():
        m.requires_grad_(True)
        m.eval()
    return tuned, {"epochs": history, "grad_norms": grad_norms,
                   "train_idx": train_idx.tolist(), "val_idx": val_idx.tolist()}


# plain-text key = value manifest naming the three stage checkpoints

MANIFEST_KEYS = ("fusion", "enhancer", "embedder", "dim", "spatial_transform")
OPTIONAL_KEYS = {"gabor_refine": "true"}


def _flag(v: str) -> bool:
    return v.lower() in ("1", "true", "yes")


def write_manifest(path, fusion_ckpt, enhancer_ckpt, embedder_ckpt, dim: int, spatial_transform: bool,
                   refine: bool = True) -> None:
    lines = [f"fusion = {fusion_ckpt}", f"enhancer = {enhancer_ckpt}", f"embedder = {embedder_ckpt}",
             f"dim = {int(dim)}", f"spatial_transform = {str(bool(spatial_transform)).lower()}",
             f"gabor_refine = {str(bool(refine)).lower()}"]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in MANIFEST_KEYS and k not in OPTIONAL_KEYS:
            raise ConfigError(f"{path}:{n}: unknown key {k!r}")
        out[k] = v
    missing = [k for k in MANIFEST_KEYS if k not in out]
    if missing:
        raise ConfigError(f"{path}: missing keys {missing}")
    for k, v in OPTIONAL_KEYS.items():
        out.setdefault(k, v)
    out["dim"] = int(out["dim"])
    out["spatial_transform"] = _flag(out["spatial_transform"])
    out["gabor_refine"] = _flag(out["gabor_refine"])
    return out


def load_pipeline(manifest_path) -> F2PPipeline:
    base = Path(manifest_path).parent
    m = read_manifest(manifest_path)

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    emb = load_embedder(resolve(m["embedder"]))
    if emb.cfg.dim != m["dim"]:
        raise ConfigError(f"manifest dim {m['dim']} but embedder has {emb.cfg.dim}")
    return F2PPipeline(load_fusion(resolve(m["fusion"])), load_enhancer(resolve(m["enhancer"])), emb,
                       m["spatial_transform"], m["gabor_refine"])
