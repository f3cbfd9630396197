"""Command-line front end: one subcommand per pipeline stage.

Every stage reads its inputs from the work directory (``--out``), writes its
outputs plus ``logs/<command>.json``, and echoes the resolved config into its
output directory.  Per-image stages run on ``F2P_THREADS`` worker threads with
deterministic output order.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import runconfig, spectral, synth
from .dataset import ingest
from .embedding import Teacher, embed_batch, load_embedder, save_embedder, train_embedder
from .enhancer import enhancer_forward, load_enhancer, save_enhancer, train_enhancer
from .errors import F2PError, StageError
from .evaluation import (all_pair_scores, pair_scores, ridge_quality, save_plots, separation_stats,
                         verification_metrics)
from .fusion import fusion_forward, load_fusion, save_fusion, train_fusion
from .geometry import crop_border
from .imaging import gabor_bank, luminance, read_mask, read_png, write_png
from .pipeline import (align_pair, f2p_embed_all, fine_tune_f2p, finish_pair, load_pipeline,
                       spatial_normalize, write_manifest)
from .training import configure_threads

VARIANTS = ("I", "I_flash", "I_diff", "I_fuse", "I_enh")
PAIR_FIELDS = ["identity", "session", "impression", "stem", "flash", "nonflash", "mask"]


# ---------------------------------------------------------------- helpers

def _dirs(cfg) -> dict:
    w = cfg.work
    return {"ingest": w / "ingest", "aligned": w / "stages" / "aligned", "segment": w / "stages" / "segment",
            "prepared": w / "stages" / "prepared", "fused": w / "stages" / "fused",
            "enhanced": w / "stages" / "enhanced", "models": w / "models", "embeddings": w / "embeddings",
            "reports": w / "reports", "logs": w / "logs"}


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).exists():
            raise StageError(f"missing prerequisite: {p}")


def _pmap(fn, items) -> list:
    items = list(items)
    n = configure_threads()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return v.as_posix()
    return str(v)


def _write_csv(path, rows, fieldnames=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    fieldnames = fieldnames or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt_cell(v) for k, v in r.items()})


def _fmt_cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _read_csv(path) -> list[dict]:
    _require(path)
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _finish(cfg, command: str, out_dir, record: dict) -> dict:
    runconfig.write_resolved(cfg, out_dir)
    record = {"command": command, **record}
    _write_json(_dirs(cfg)["logs"] / f"{command}.json", record)
    return record


def _rel(cfg, p) -> str:
    p = Path(p)
    try:
        return p.relative_to(cfg.work).as_posix()
    except ValueError:
        return p.as_posix()


def _pairs(cfg, sessions=None) -> list[dict]:
    """Rows of ``ingest/pairs.csv`` with capture paths resolved against the ingested root."""
    d = _dirs(cfg)["ingest"]
    rows = _read_csv(d / "pairs.csv")
    root = Path(json.loads((d / "stats.json").read_text())["root"])
    root = root if root.is_absolute() else cfg.work / root
    for r in rows:
        for k in ("identity", "session", "impression"):
            r[k] = int(r[k])
        for k in ("flash", "nonflash", "mask"):
            r[k] = (root / r[k]).as_posix() if r[k] else ""
    if sessions is not None:
        rows = [r for r in rows if r["session"] in set(sessions)]
    return rows


def _prepared(cfg, row) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    d = _dirs(cfg)["prepared"]
    paths = [d / f"{row['stem']}_{k}.png" for k in ("flash", "nonflash", "diff", "mask")]
    _require(*paths)
    return read_png(paths[0]), read_png(paths[1]), read_png(paths[2]), read_mask(paths[3])


def _stage_image(cfg, stage: str, row, suffix: str) -> np.ndarray:
    p = _dirs(cfg)[stage] / f"{row['stem']}_{suffix}.png"
    _require(p)
    return read_png(p)


def _fused_mask(cfg, row) -> np.ndarray:
    p = _dirs(cfg)["fused"] / f"{row['stem']}_mask.png"
    _require(p)
    return read_mask(p)


def _variant_images(cfg, variant: str, rows) -> tuple[list, list]:
    """Gray images and masks for one input variant, in the frame the embedder sees."""
    def one(r):
        if variant in ("I_fuse", "I_enh"):
            m = _fused_mask(cfg, r)
            img = luminance(_stage_image(cfg, "fused", r, "fuse")) if variant == "I_fuse" \
                else _stage_image(cfg, "enhanced", r, "enh")
            return img, m
        fl, nf, df, m = _prepared(cfg, r)
        img = {"I": nf, "I_flash": fl, "I_diff": df}[variant]
        if cfg.spatial_transform:
            (img,), m, _ = spatial_normalize([img], m)
        return luminance(img), m
    out = _pmap(one, rows)
    return [o[0] for o in out], [o[1] for o in out]


def _embedder_path(cfg, variant: str) -> Path:
    if variant == "I_enh":
        return cfg.checkpoint("embedder")
    return _dirs(cfg)["models"] / f"embedder_{variant}.ckpt"


# ---------------------------------------------------------------- commands

def cmd_synth(cfg, args) -> dict:
    s = cfg.synth
    rows = synth.synth_corpus(cfg.root, s.n_ids, s.impressions, s.sessions, s.seed, s.size,
                              threads=configure_threads())
    return _finish(cfg, "synth", cfg.root, {"root": _rel(cfg, cfg.root), "n_pairs": len(rows),
                                           "n_ids": s.n_ids, "sessions": s.sessions,
                                           "impressions": s.impressions})


def cmd_ingest(cfg, args) -> dict:
    layout = ingest(cfg.root, cfg.pattern, cfg.mask_pattern)
    out = _dirs(cfg)["ingest"]
    rows = [{"identity": p.identity, "session": p.session, "impression": p.impression,
             "stem": f"{p.identity:03d}_s{p.session}_{p.impression:02d}",
             "flash": p.flash.relative_to(layout.root).as_posix(),
             "nonflash": p.nonflash.relative_to(layout.root).as_posix(),
             "mask": p.mask.relative_to(layout.root).as_posix() if p.mask else ""} for p in layout.pairs]
    _write_csv(out / "pairs.csv", rows, PAIR_FIELDS)
    stats = layout.stats()
    stats["root"] = _rel(cfg, layout.root)
    _write_json(out / "stats.json", stats)
    return _finish(cfg, "ingest", out, stats)


def cmd_align(cfg, args) -> dict:
    out = _dirs(cfg)["aligned"]
    rows = _pairs(cfg)

    def one(r):
        fl, nf, t = align_pair(read_png(r["flash"]), read_png(r["nonflash"]), cfg.pre.border)
        write_png(out / f"{r['stem']}_flash.png", fl)
        write_png(out / f"{r['stem']}_nonflash.png", nf)
        return {"stem": r["stem"], "dx": t.dx, "dy": t.dy}
    shifts = _pmap(one, rows)
    _write_csv(out / "shifts.csv", shifts, ["stem", "dx", "dy"])
    mags = [float(np.hypot(s["dx"], s["dy"])) for s in shifts]
    return _finish(cfg, "align", out, {"n_pairs": len(shifts), "border": cfg.pre.border,
                                       "mean_shift": float(np.mean(mags)) if mags else 0.0})


def _iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def cmd_segment(cfg, args) -> dict:
    out = _dirs(cfg)["segment"]
    rows = _pairs(cfg)

    def one(r):
        fl = _stage_image(cfg, "aligned", r, "flash")
        m = spectral.segment_rg(fl, cfg.pre.rg_threshold, cfg.pre.closing_radius)
        write_png(out / f"{r['stem']}_mask.png", m)
        rec = {"stem": r["stem"], "coverage": float(m.mean()), "iou": ""}
        if r["mask"]:
            rec["iou"] = _iou(m, crop_border(read_mask(r["mask"]), cfg.pre.border))
        return rec
    recs = _pmap(one, rows)
    _write_csv(out / "segment.csv", recs, ["stem", "coverage", "iou"])
    ious = [x["iou"] for x in recs if x["iou"] != ""]
    return _finish(cfg, "segment", out, {"n_pairs": len(recs),
                                         "mean_iou": float(np.mean(ious)) if ious else None})


def cmd_diff(cfg, args) -> dict:
    out = _dirs(cfg)["prepared"]
    rows = _pairs(cfg)

    def one(r):
        fl = _stage_image(cfg, "aligned", r, "flash")
        nf = _stage_image(cfg, "aligned", r, "nonflash")
        mp = _dirs(cfg)["segment"] / f"{r['stem']}_mask.png"
        _require(mp)
        p = finish_pair(fl, nf, read_mask(mp), cfg.pre)
        for k, img in (("flash", p.flash), ("nonflash", p.nonflash), ("diff", p.diff), ("mask", p.mask)):
            write_png(out / f"{r['stem']}_{k}.png", img)
        return {"stem": r["stem"], "cutoff": p.cutoff}
    recs = _pmap(one, rows)
    _write_csv(out / "cutoffs.csv", recs, ["stem", "cutoff"])
    return _finish(cfg, "diff", out, {"n_pairs": len(recs), "side": cfg.pre.side})


def _history(cfg, name: str, hist) -> None:
    rows = [{k: v for k, v in r.items() if not isinstance(v, (list, dict))} for r in hist]
    _write_csv(_dirs(cfg)["logs"] / f"{name}.csv", rows)


def cmd_train_fusion(cfg, args) -> dict:
    rows = _pairs(cfg, cfg.train_sessions)
    samples = _pmap(lambda r: _prepared(cfg, r), rows)
    model, hist = train_fusion(samples, replace(cfg.fusion, image_size=cfg.pre.side))
    path = cfg.checkpoint("fusion")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_fusion(path, model)
    _history(cfg, "train-fusion", hist)
    return _finish(cfg, "train-fusion", path.parent, {"checkpoint": _rel(cfg, path), "n_train": len(samples),
                                                      "final": hist[-1]})


def cmd_fuse(cfg, args) -> dict:
    path = cfg.checkpoint("fusion")
    _require(path)
    model = load_fusion(path)
    out = _dirs(cfg)["fused"]
    rows = _pairs(cfg)

    def one(r):
        fl, nf, _, m = _prepared(cfg, r)
        if cfg.spatial_transform:
            (fl, nf), m, _ = spatial_normalize([fl, nf], m)
        fuse, w = fusion_forward(model, fl, nf)
        write_png(out / f"{r['stem']}_fuse.png", fuse)
        write_png(out / f"{r['stem']}_mask.png", m)
        return float(np.mean(w))
    # torch modules are not shared across threads; fusion runs in order
    w = [one(r) for r in rows]
    return _finish(cfg, "fuse", out, {"n_pairs": len(w), "mean_flash_weight": float(np.mean(w)) if w else None})


def cmd_train_enhancer(cfg, args) -> dict:
    rows = _pairs(cfg, cfg.train_sessions)

    def one(r):
        fl, _, _, m = _prepared(cfg, r)
        fm = _fused_mask(cfg, r)
        if cfg.spatial_transform:
            (fl,), m, _ = spatial_normalize([fl], m)
        return _stage_image(cfg, "fused", r, "fuse"), luminance(fl), fm
    samples = _pmap(one, rows)
    model, hist = train_enhancer(samples, replace(cfg.enhancer, image_size=cfg.pre.side))
    path = cfg.checkpoint("enhancer")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_enhancer(path, model)
    _history(cfg, "train-enhancer", hist)
    return _finish(cfg, "train-enhancer", path.parent, {"checkpoint": _rel(cfg, path),
                                                        "n_train": len(samples), "final": hist[-1]})


def cmd_enhance(cfg, args) -> dict:
    path = cfg.checkpoint("enhancer")
    _require(path)
    model = load_enhancer(path)
    out = _dirs(cfg)["enhanced"]
    rows = _pairs(cfg)
    for r in rows:
        raw = enhancer_forward(model, _stage_image(cfg, "fused", r, "fuse"))
        write_png(out / f"{r['stem']}_enhraw.png", raw)
        write_png(out / f"{r['stem']}_enh.png", gabor_bank(raw, model.cfg.gabor))
    return _finish(cfg, "enhance", out, {"n_pairs": len(rows), "gabor_refine": True})


def cmd_train_embed(cfg, args) -> dict:
    variant = args.variant
    rows = _pairs(cfg, cfg.train_sessions)
    images, _ = _variant_images(cfg, variant, rows)
    labels = np.array([r["identity"] for r in rows])
    ecfg = cfg.embed
    if 0 < cfg.distill_after < ecfg.epochs and ecfg.alpha != 0:
        model, hist = train_embedder(images, labels, replace(ecfg, epochs=cfg.distill_after))
        teacher = Teacher.from_student(model, seed=ecfg.seed)
        rest = replace(ecfg, epochs=ecfg.epochs - cfg.distill_after, seed=ecfg.seed + 1)
        model, hist2 = train_embedder(images, labels, rest, teacher=teacher, model=model)
        for row in hist2:
            row["epoch"] += cfg.distill_after
        hist = hist + hist2
    else:
        model, hist = train_embedder(images, labels, ecfg)
    path = _embedder_path(cfg, variant)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_embedder(path, model)
    _history(cfg, f"train-embed-{variant}", hist)
    record = {"variant": variant, "checkpoint": _rel(cfg, path), "n_train": len(images), "final": hist[-1]}
    if variant == "I_enh":
        man = path.parent / "f2p.manifest"
        _manifest(man, cfg.checkpoint("fusion"), cfg.checkpoint("enhancer"), path, cfg)
        record["manifest"] = _rel(cfg, man)
    return _finish(cfg, "train-embed", path.parent, record)


def _manifest(man: Path, fusion, enhancer, embedder, cfg) -> None:
    def rel(p):
        p = Path(p).resolve()
        try:
            return p.relative_to(man.parent.resolve()).as_posix()
        except ValueError:
            return p.as_posix()
    write_manifest(man, rel(fusion), rel(enhancer), rel(embedder), cfg.dim, cfg.spatial_transform)


def _manifest_path(cfg, args) -> Path:
    p = Path(args.manifest) if getattr(args, "manifest", None) else _dirs(cfg)["models"] / "f2p.manifest"
    _require(p)
    return p


def _pair_inputs(cfg, rows) -> list:
    return _pmap(lambda r: (lambda p: (p[0], p[1], p[3]))(_prepared(cfg, r)), rows)


def cmd_finetune(cfg, args) -> dict:
    base = load_pipeline(_manifest_path(cfg, args))
    rows = _pairs(cfg, cfg.train_sessions)
    labels = np.array([r["identity"] for r in rows])
    tuned, hist = fine_tune_f2p(base, _pair_inputs(cfg, rows), labels, cfg.finetune)
    out = _dirs(cfg)["models"] / "finetuned"
    out.mkdir(parents=True, exist_ok=True)
    save_fusion(out / "fusion.ckpt", tuned.fusion)
    save_enhancer(out / "enhancer.ckpt", tuned.enhancer)
    save_embedder(out / "embedder.ckpt", tuned.embedder)
    man = _dirs(cfg)["models"] / "f2p_finetuned.manifest"
    _manifest(man, out / "fusion.ckpt", out / "enhancer.ckpt", out / "embedder.ckpt", cfg)
    _history(cfg, "finetune", hist["epochs"])
    _write_csv(_dirs(cfg)["logs"] / "finetune-grad-norms.csv",
               [{"step": i, "grad_norm": g} for i, g in enumerate(hist["grad_norms"])], ["step", "grad_norm"])
    return _finish(cfg, "finetune", out, {"manifest": _rel(cfg, man), "epochs": hist["epochs"],
                                          "max_grad_norm": max(hist["grad_norms"], default=0.0)})


def cmd_embed(cfg, args) -> dict:
    rows = _pairs(cfg)
    if args.variant == "f2p":
        man = _manifest_path(cfg, args)
        name = args.name or ("f2p" if not args.manifest else Path(args.manifest).stem)
        pipe = load_pipeline(man)
        emb = f2p_embed_all(pipe, _pair_inputs(cfg, rows))
        source = _rel(cfg, man)
    else:
        path = _embedder_path(cfg, args.variant)
        _require(path)
        name = args.name or args.variant
        images, _ = _variant_images(cfg, args.variant, rows)
        emb = embed_batch(load_embedder(path), images)
        source = _rel(cfg, path)
    out = _dirs(cfg)["embeddings"] / name
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "embeddings.npy", emb.astype(np.float64))
    _write_csv(out / "index.csv", [{k: r[k] for k in ("identity", "session", "impression", "stem")} for r in rows],
               ["identity", "session", "impression", "stem"])
    return _finish(cfg, "embed", out, {"name": name, "source": source, "n": int(emb.shape[0]),
                                       "dim": int(emb.shape[1])})


def cmd_verify(cfg, args) -> dict:
    src = _dirs(cfg)["embeddings"] / args.name
    _require(src / "embeddings.npy", src / "index.csv")
    emb = np.load(src / "embeddings.npy")
    index = _read_csv(src / "index.csv")
    ids = np.array([int(r["identity"]) for r in index])
    sess = np.array([int(r["session"]) for r in index])
    a, b = sess == args.probe_session, sess == args.gallery_session
    if a.any() and b.any() and args.probe_session != args.gallery_session:
        scores = pair_scores(emb[a], ids[a], emb[b], ids[b])
        protocol = f"session {args.probe_session} vs session {args.gallery_session}"
    else:
        scores = all_pair_scores(emb, ids)
        protocol = "all pairs"
    rep = verification_metrics(scores)
    out = _dirs(cfg)["reports"] / f"verify_{args.name}"
    rep.write(out)
    save_plots(rep, out, title=args.name)
    sep = separation_stats(emb, ids)
    _write_json(out / "separation.json", sep)
    return _finish(cfg, "verify", out, {"name": args.name, "protocol": protocol, "auc": rep.auc, "eer": rep.eer,
                                        "sep_ratio_cosine": sep["cosine"]["sep_ratio"],
                                        "sep_ratio_euclidean": sep["euclidean"]["sep_ratio"]})


def cmd_quality(cfg, args) -> dict:
    rows = _pairs(cfg)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise StageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    out = _dirs(cfg)["reports"] / "quality"
    per_image, table = [], []
    for v in variants:
        images, masks = _variant_images(cfg, v, rows)
        q = np.array(_pmap(lambda im_m: ridge_quality(im_m[0], args.block, im_m[1]), zip(images, masks)))
        for r, (c, s, e) in zip(rows, q):
            per_image.append({"variant": v, "stem": r["stem"], "local_contrast": c, "sharpness": s,
                              "edge_clarity": e})
        table.append({"variant": v, "local_contrast": float(np.median(q[:, 0])),
                      "sharpness": float(np.median(q[:, 1])), "edge_clarity": float(np.median(q[:, 2])),
                      "n": len(rows)})
    fields = ["variant", "local_contrast", "sharpness", "edge_clarity"]
    _write_csv(out / "quality.csv", table, fields + ["n"])
    _write_csv(out / "per_image.csv", per_image, ["variant", "stem"] + fields[1:])
    return _finish(cfg, "quality", out, {"block": args.block, "statistic": "median", "table": table})


COMMANDS = {
    "synth": (cmd_synth, "write a synthetic flash / non-flash corpus"),
    "ingest": (cmd_ingest, "validate the dataset layout and index its pairs"),
    "align": (cmd_align, "register each pair by phase correlation and crop the border"),
    "segment": (cmd_segment, "R/G finger segmentation of the aligned flash image"),
    "diff": (cmd_diff, "whiten, spectral-subtract and pad each pair"),
    "train-fusion": (cmd_train_fusion, "train the fusion network"),
    "fuse": (cmd_fuse, "run the fusion network over the corpus"),
    "train-enhancer": (cmd_train_enhancer, "train the enhancement network"),
    "enhance": (cmd_enhance, "run the enhancement network and Gabor refinement"),
    "train-embed": (cmd_train_embed, "train an embedding network on one input variant"),
    "finetune": (cmd_finetune, "fine-tune the composed pipeline end to end"),
    "embed": (cmd_embed, "embed every pair with the pipeline or a variant embedder"),
    "verify": (cmd_verify, "verification report, ROC and FAR/FRR plots"),
    "quality": (cmd_quality, "per-variant ridge-quality table"),
}


# ---------------------------------------------------------------- parsing

def _common(parser: argparse.ArgumentParser) -> None:
    # SUPPRESS lets the flags appear before or after the subcommand
    s = argparse.SUPPRESS
    parser.add_argument("--config", default=s, help="key = value config file")
    parser.add_argument("--seed", type=int, default=s)
    parser.add_argument("--out", default=s, help="work directory")
    parser.add_argument("--spatial-transform", action="store_true", default=s)
    parser.add_argument("--dim", type=int, choices=(128, 256), default=s)
    parser.add_argument("--set", action="append", default=s, metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true", default=s)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="f2p", description="Flash / non-flash fingerprint pipeline")
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        _common(p)
        if name == "synth":
            p.add_argument("--ids", type=int, default=None)
            p.add_argument("--impressions", type=int, default=None)
            p.add_argument("--sessions", type=int, default=None)
        if name == "ingest":
            p.add_argument("--root", default=None, help="dataset root (default <out>/data)")
            p.add_argument("--pattern", default=None, help="filename regex with id/session/impression/kind groups")
        if name == "train-embed":
            p.add_argument("--variant", choices=VARIANTS, default="I_enh")
        if name in ("finetune", "embed"):
            p.add_argument("--manifest", default=None, help="pipeline manifest (default <out>/models/f2p.manifest)")
        if name == "embed":
            p.add_argument("--variant", choices=("f2p",) + VARIANTS, default="f2p")
            p.add_argument("--name", default=None, help="output name under <out>/embeddings")
        if name == "verify":
            p.add_argument("--name", default="f2p", help="embedding set under <out>/embeddings")
            p.add_argument("--probe-session", type=int, default=1)
            p.add_argument("--gallery-session", type=int, default=2)
        if name == "quality":
            p.add_argument("--variants", default=",".join(VARIANTS))
            p.add_argument("--block", type=int, default=16)
    return parser


def resolve_config(args) -> runconfig.RunConfig:
    pairs = []
    path = getattr(args, "config", None)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise StageError(f"missing config file: {p}")
        pairs += runconfig.parse_pairs(p.read_text(), str(p))
    if hasattr(args, "seed"):
        pairs.append(("seed", str(args.seed)))
    if hasattr(args, "out"):
        pairs.append(("out", args.out))
    if hasattr(args, "spatial_transform"):
        pairs.append(("spatial_transform", "true"))
    if hasattr(args, "dim"):
        pairs.append(("dim", str(args.dim)))
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise StageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if args.command == "synth":
        for flag, key in (("ids", "synth.n_ids"), ("impressions", "synth.impressions"),
                          ("sessions", "synth.sessions")):
            if getattr(args, flag) is not None:
                pairs.append((key, str(getattr(args, flag))))
    if args.command == "ingest":
        if args.root:
            pairs.append(("data_root", args.root))
        if args.pattern:
            pairs.append(("pattern", args.pattern))
    return runconfig.apply(runconfig.RunConfig(), pairs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        configure_threads()
        fn = COMMANDS[args.command][0]
        record = fn(cfg, args)
    except F2PError as exc:
        print(f"f2p {args.command}: error: {exc}", file=sys.stderr)
        return 2
    summary = {k: v for k, v in record.items() if not isinstance(v, (list, dict))}
    print(json.dumps(summary, sort_keys=True, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())
