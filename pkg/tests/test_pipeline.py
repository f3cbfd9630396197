from dataclasses import replace

import numpy as np
import pytest
import torch

from f2p.embedding import EmbedConfig, EmbeddingModel, save_embedder
from f2p.enhancer import EnhancerConfig, EnhancerModel, save_enhancer
from f2p.errors import ConfigError, InvalidArgument
from f2p.fusion import FusionConfig, FusionModel, save_fusion
from f2p.pipeline import (F2PPipeline, FineTuneConfig, PreprocessConfig, compose, f2p_embed_all, f2p_forward,
                          fine_tune_f2p, load_pipeline, preprocess_pair, read_manifest, spatial_normalize,
                          write_manifest)
from f2p.synth import make_spec, synth_pair

S = 16


def tiny_pipeline(spatial=False, seed=0):
    torch.manual_seed(seed)
    fus = FusionModel(FusionConfig(image_size=S, encoder_channels=(4, 8, 8)))
    enh = EnhancerModel(EnhancerConfig(image_size=S, channels=(4, 8, 8), patch=4, gabor_kernel=7,
                                       gabor_sigma=2.0, gabor_wavelength=4.0))
    emb = EmbeddingModel(EmbedConfig(dim=8, input_size=S, width=4))
    return F2PPipeline(fus, enh, emb, spatial)


def tiny_pairs(n_ids=4, per_id=3, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:S, 0:S]
    pairs, labels = [], []
    for i in range(n_ids):
        th = np.pi * i / n_ids
        for _ in range(per_id):
            r = 0.5 + 0.4 * np.cos(2 * np.pi / 5 * (x * np.cos(th) + y * np.sin(th)) + rng.uniform(0, 0.5))
            fl = np.clip(np.stack([r * c for c in (0.6, 0.8, 1.0)], -1) + 0.02 * rng.standard_normal((S, S, 3)), 0, 1)
            nf = np.clip(0.3 + 0.1 * fl, 0, 1)
            pairs.append((fl, nf, np.ones((S, S), bool)))
            labels.append(i)
    return pairs, np.array(labels)


def test_preprocess_recovers_shift_and_shapes():
    spec = replace(make_spec(0, 3, 1, 1), jitter_dx=3.0, jitter_dy=-2.0, jitter_deg=0.0)
    pair = synth_pair(spec)
    cfg = PreprocessConfig()
    p = preprocess_pair(pair.flash, pair.nonflash, cfg)
    assert abs(p.shift.dx - 3.0) < 0.5 and abs(p.shift.dy + 2.0) < 0.5
    for img in (p.flash, p.nonflash, p.diff):
        assert img.shape == (64, 64, 3) and img.min() >= 0 and img.max() <= 1
        assert np.all(img[~p.mask] == 1.0)
    assert p.mask.shape == (64, 64) and p.mask.mean() > 0.2
    assert p.cutoff >= 1
    given = preprocess_pair(pair.flash, pair.nonflash, cfg, mask=pair.mask)
    assert given.mask.sum() > 0


def test_spatial_normalize_whitens_and_falls_back():
    spec = make_spec(0, 5, 1, 1)
    pair = synth_pair(spec)
    p = preprocess_pair(pair.flash, pair.nonflash, mask=pair.mask)
    (fl, nf), m, info = spatial_normalize([p.flash, p.nonflash], p.mask)
    assert fl.shape == p.flash.shape and m.shape == p.mask.shape
    assert np.all(fl[~m] == 1.0) and np.all(nf[~m] == 1.0)
    assert abs(m.sum() - p.mask.sum()) / p.mask.sum() < 0.15
    flat = np.full((64, 64, 3), 0.5)
    mask = np.zeros((64, 64), bool)
    mask[10:50, 20:40] = True
    (out,), m2, info = spatial_normalize([flat], mask)
    assert info["core"] is None
    ys, xs = np.nonzero(m2)
    assert abs(xs.mean() - 31.5) <= 1 and abs(ys.mean() - 31.5) <= 1


def test_forward_contract_and_determinism():
    pipe = tiny_pipeline()
    pairs, _ = tiny_pairs(2, 1)
    e = f2p_forward(pipe, *pairs[0])
    assert e.shape == (8,) and abs(np.linalg.norm(e) - 1) < 1e-5
    assert np.array_equal(e, f2p_forward(pipe, *pairs[0]))
    batch = f2p_embed_all(pipe, pairs)
    assert np.allclose(batch[0], e, atol=1e-6)
    with pytest.raises(InvalidArgument):
        f2p_forward(pipe, np.zeros((8, 8, 3)), np.zeros((8, 8, 3)), np.ones((8, 8), bool))


def test_forward_with_spatial_transform():
    pipe = tiny_pipeline(spatial=True)
    fl, nf, m = tiny_pairs(1, 1)[0][0]
    e = f2p_forward(pipe, fl, nf, m)
    assert abs(np.linalg.norm(e) - 1) < 1e-5


def test_compose_is_differentiable():
    pipe = tiny_pipeline()
    x = torch.rand(2, 3, S, S)
    out = compose(pipe, x, x)
    out.sum().backward()
    assert pipe.embedder.head.weight.grad is not None
    assert pipe.fusion.decoder is not None


def _state(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def test_fine_tune_freeze_and_clip():
    pipe = tiny_pipeline()
    pairs, labels = tiny_pairs()
    before = {n: _state(m) for n, m in zip(("fusion", "enhancer", "embedder"), pipe.modules())}
    cfg = FineTuneConfig(lr=1e-3, epochs=2, clip=0.05, split=(0.75, 0.25, 0.0), batch_size=4)
    tuned, log = fine_tune_f2p(pipe, pairs, labels, cfg)
    after = {n: _state(m) for n, m in zip(("fusion", "enhancer", "embedder"), tuned.modules())}
    # the input pipeline is untouched
    for n, m in zip(("fusion", "enhancer", "embedder"), pipe.modules()):
        assert all(torch.equal(before[n][k], v) for k, v in _state(m).items())
    trainable = {"fusion": cfg.fusion_trainable, "enhancer": cfg.enhancer_trainable}
    for n, prefixes in trainable.items():
        for k in before[n]:
            if not k.startswith(prefixes):
                assert torch.equal(before[n][k], after[n][k]), k
        assert any(not torch.equal(before[n][k], after[n][k]) for k in before[n] if k.startswith(prefixes))
    assert any(not torch.equal(before["embedder"][k], after["embedder"][k]) for k in before["embedder"])
    assert log["grad_norms"] and max(log["grad_norms"]) <= cfg.clip + 1e-6
    assert len(log["epochs"]) == cfg.epochs + 1
    assert not set(log["train_idx"]) & set(log["val_idx"])
    val_ids = set(labels[log["val_idx"]].tolist())
    assert val_ids and not val_ids & set(labels[log["train_idx"]].tolist())


def test_fine_tune_config_validation():
    with pytest.raises(ConfigError):
        FineTuneConfig(w_t=0, w_i=0)
    with pytest.raises(ConfigError):
        FineTuneConfig(delta=-0.1)
    with pytest.raises(InvalidArgument):
        fine_tune_f2p(tiny_pipeline(), *tiny_pairs(1, 2))


def test_manifest_roundtrip(tmp_path):
    pipe = tiny_pipeline()
    save_fusion(tmp_path / "f.ckpt", pipe.fusion)
    save_enhancer(tmp_path / "e.ckpt", pipe.enhancer)
    save_embedder(tmp_path / "m.ckpt", pipe.embedder)
    path = tmp_path / "p.manifest"
    write_manifest(path, "f.ckpt", "e.ckpt", "m.ckpt", 8, True)
    info = read_manifest(path)
    assert info["dim"] == 8 and info["spatial_transform"] is True and info["gabor_refine"] is True
    loaded = load_pipeline(path)
    pairs, _ = tiny_pairs(1, 1)
    plain = replace(loaded, spatial_transform=False)
    assert np.array_equal(f2p_forward(plain, *pairs[0]), f2p_forward(pipe, *pairs[0]))
    write_manifest(path, "f.ckpt", "e.ckpt", "m.ckpt", 16, False)
    with pytest.raises(ConfigError):
        load_pipeline(path)
    path.write_text("fusion = f.ckpt\nbogus = 1\n")
    with pytest.raises(ConfigError):
        read_manifest(path)
    path.write_text("fusion = f.ckpt\n")
    with pytest.raises(ConfigError):
        read_manifest(path)
