"""Desk-scale end-to-end experiment on a synthetic corpus.

Trains fusion and enhancer on session-1 pairs, trains one embedder per input
variant (non-flash, flash, enhanced) on session 1, scores session 1 against
session 2, then fine-tunes the composed pipeline and compares it with the
base pipeline.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import synth
from .embedding import EmbedConfig, Teacher, embed_batch, train_embedder
from .enhancer import EnhancerConfig, enhancer_forward, train_enhancer
from .evaluation import pair_scores, ridge_quality, separation_stats, verification_metrics
from .fusion import FusionConfig, fusion_forward, train_fusion
from .imaging import gabor_bank, luminance
from .pipeline import F2PPipeline, FineTuneConfig, PreprocessConfig, f2p_embed_all, fine_tune_f2p, preprocess_pair
from .training import configure_threads, log


@dataclass
class DeskConfig:
    n_ids: int = 20
    impressions: int = 4
    sessions: int = 2
    seed: int = 0
    raw_size: int = 72
    side: int = 64
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(
        image_size=64, encoder_channels=(16, 32, 64), epochs=12, lr=1e-3, batch_size=8, split=(0.85, 0.15, 0.0)))
    enhancer: EnhancerConfig = field(default_factory=lambda: EnhancerConfig(
        image_size=64, channels=(16, 32, 64), epochs=12, lr=1e-3, batch_size=8, split=(0.85, 0.15, 0.0)))
    embed: EmbedConfig = field(default_factory=lambda: EmbedConfig(
        input_size=64, dim=128, epochs=30, lr=1e-3, width=16))
    distill_after: int = 15            # epochs of triplet-only training before the surrogate teacher is frozen
    finetune: FineTuneConfig = field(default_factory=lambda: FineTuneConfig(lr=1e-5))
    quality_block: int = 8


@dataclass
class Sample:
    identity: int
    session: int
    impression: int
    flash: np.ndarray
    nonflash: np.ndarray
    diff: np.ndarray
    mask: np.ndarray


def build_corpus(cfg: DeskConfig) -> list[Sample]:
    pre = PreprocessConfig(side=cfg.side, border=(cfg.raw_size - cfg.side) // 2)
    out = []
    for ident in range(1, cfg.n_ids + 1):
        canvas = None
        for sess in range(1, cfg.sessions + 1):
            for imp in range(1, cfg.impressions + 1):
                spec = synth.make_spec(cfg.seed, ident, sess, imp, cfg.raw_size)
                if canvas is None:
                    canvas = synth.print_canvas(spec)
                pair = synth.synth_pair(spec, canvas)
                p = preprocess_pair(pair.flash, pair.nonflash, pre)
                out.append(Sample(ident, sess, imp, p.flash, p.nonflash, p.diff, p.mask))
    return out


def train_variant_embedder(images, labels, cfg: DeskConfig):
    """Triplet-only warm-up, then self-distillation against a frozen snapshot."""
    ecfg = cfg.embed
    if cfg.distill_after <= 0 or cfg.distill_after >= ecfg.epochs or ecfg.alpha == 0:
        return train_embedder(images, labels, ecfg)
    warm = replace(ecfg, epochs=cfg.distill_after)
    model, hist = train_embedder(images, labels, warm)
    teacher = Teacher.from_student(model, seed=ecfg.seed)
    rest = replace(ecfg, epochs=ecfg.epochs - cfg.distill_after, seed=ecfg.seed + 1)
    model, hist2 = train_embedder(images, labels, rest, teacher=teacher, model=model)
    for row in hist2:
        row["epoch"] += cfg.distill_after
    return model, hist + hist2


def _verify(emb, labels, sess):
    s1, s2 = sess == 1, sess == 2
    return verification_metrics(pair_scores(emb[s1], labels[s1], emb[s2], labels[s2]))


def run_desk(cfg: DeskConfig | None = None, out_dir=None) -> dict:
    cfg = cfg or DeskConfig()
    configure_threads()
    t0 = time.time()
    corpus = build_corpus(cfg)
    labels = np.array([s.identity for s in corpus])
    sess = np.array([s.session for s in corpus])
    train = [s for s in corpus if s.session == 1]
    timings = {"corpus": time.time() - t0}

    t = time.time()
    fusion, fusion_log = train_fusion([(s.flash, s.nonflash, s.diff, s.mask) for s in train], cfg.fusion)
    fuse = [fusion_forward(fusion, s.flash, s.nonflash)[0] for s in corpus]
    timings["fusion"] = time.time() - t

    t = time.time()
    ecfg = cfg.enhancer
    enh_samples = [(fuse[i], luminance(s.flash), s.mask)
                   for i, s in enumerate(corpus) if s.session == 1]
    enhancer, enhancer_log = train_enhancer(enh_samples, ecfg)
    enh_raw = [enhancer_forward(enhancer, f) for f in fuse]
    enh = [gabor_bank(e, ecfg.gabor) for e in enh_raw]
    timings["enhancer"] = time.time() - t

    variants = {
        "I": [luminance(s.nonflash) for s in corpus],
        "I_flash": [luminance(s.flash) for s in corpus],
        "I_enh": enh,
    }
    quality = {}
    for name, imgs in (("I", variants["I"]), ("I_flash", variants["I_flash"]),
                       ("I_diff", [luminance(s.diff) for s in corpus]),
                       ("I_fuse", [luminance(f) for f in fuse]), ("I_enh_raw", enh_raw), ("I_enh", enh)):
        q = np.array([ridge_quality(im, cfg.quality_block, s.mask) for im, s in zip(imgs, corpus)])
        quality[name] = {"local_contrast": float(np.median(q[:, 0])), "sharpness": float(np.median(q[:, 1])),
                         "edge_clarity": float(np.median(q[:, 2]))}

    t = time.time()
    tr_mask = sess == 1
    verification, embedders = {}, {}
    for name, imgs in variants.items():
        model, _ = train_variant_embedder([imgs[i] for i in np.flatnonzero(tr_mask)], labels[tr_mask], cfg)
        emb = embed_batch(model, imgs)
        rep = _verify(emb, labels, sess)
        verification[name] = {"auc": rep.auc, "eer": rep.eer}
        embedders[name] = model
        log.info("variant %s AUC %.4f EER %.2f", name, rep.auc, rep.eer)
    timings["embedders"] = time.time() - t

    t = time.time()
    base = F2PPipeline(fusion, enhancer, embedders["I_enh"])
    pairs = [(s.flash, s.nonflash, s.mask) for s in corpus]
    train_pairs = [pairs[i] for i in np.flatnonzero(tr_mask)]
    tuned, ft_log = fine_tune_f2p(base, train_pairs, labels[tr_mask], cfg.finetune)
    f2p = {}
    for name, pipe in (("base", base), ("finetuned", tuned)):
        emb = f2p_embed_all(pipe, pairs)
        rep = _verify(emb, labels, sess)
        test = ~tr_mask
        sep = separation_stats(emb[test], labels[test])
        full = separation_stats(emb, labels)
        f2p[name] = {"auc": rep.auc, "eer": rep.eer, "sep_ratio_cosine": sep["cosine"]["sep_ratio"],
                     "sep_ratio_euclidean": sep["euclidean"]["sep_ratio"],
                     "sep_ratio_cosine_all": full["cosine"]["sep_ratio"],
                     "sep_ratio_euclidean_all": full["euclidean"]["sep_ratio"]}
    timings["finetune"] = time.time() - t
    timings["total"] = time.time() - t0

    result = {"quality": quality, "verification": verification, "f2p": f2p,
              "finetune_val_eer": [r["val_eer"] for r in ft_log["epochs"]],
              "max_grad_norm": max(ft_log["grad_norms"]) if ft_log["grad_norms"] else 0.0,
              "fusion_final": fusion_log[-1], "enhancer_final": enhancer_log[-1],
              "timings": timings}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "desk_results.json").write_text(json.dumps(result, indent=2, sort_keys=True, default=float) + "\n")
        (out / "desk_config.json").write_text(json.dumps(asdict(cfg), indent=2, default=list) + "\n")
    return result
