import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from f2p import synth
from f2p.enhancer import (EnhancerConfig, EnhancerModel, channel_local_contrast, contrast_reward,
                          contrast_reward_np, enhancer_forward, enhancer_loss, gabor_ridge_loss, load_enhancer,
                          ridge_reference, ridge_valley_weight, save_enhancer, train_enhancer)
from f2p.errors import DegenerateInput, InvalidArgument
from f2p.imaging import luminance

from gradutil import rand, rel_error

SMALL = dict(image_size=16, channels=(4, 8, 8), patch=4, gabor_kernel=7, gabor_sigma=2.0, gabor_wavelength=4.0)


def samples(n, s=16, seed=0):
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:s, 0:s] / s
    out = []
    for _ in range(n):
        th, ph = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        ridges = 0.5 + 0.35 * np.cos(2 * np.pi * 4 * (x * np.cos(th) + y * np.sin(th)) + ph)
        fuse = np.clip(np.stack([0.7 * ridges + 0.2, 0.9 * ridges + 0.05, ridges], -1)
                       + 0.02 * rng.standard_normal((s, s, 3)), 0, 1)
        mask = ((x - 0.5) ** 2 + (y - 0.5) ** 2) <= 0.2
        out.append((fuse, ridges, mask))
    return out


def test_config_enforces_channel_order():
    with pytest.raises(InvalidArgument):
        EnhancerConfig(channel_weights=(0.5, 0.35, 0.15))


def test_forward_shape_range_determinism():
    torch.manual_seed(0)
    m = EnhancerModel(EnhancerConfig(**SMALL))
    img = np.random.default_rng(0).random((16, 16, 3))
    out = enhancer_forward(m, img)
    assert out.shape == (16, 16)
    assert out.min() > 0 and out.max() < 1
    np.testing.assert_array_equal(enhancer_forward(m, img), out)
    with pytest.raises(InvalidArgument):
        enhancer_forward(m, img[:8, :8])


def test_forward_strictly_inside_unit_interval_for_extreme_logits():
    m = EnhancerModel(EnhancerConfig(**SMALL))
    with torch.no_grad():
        m.head.bias.fill_(1e4)
    assert enhancer_forward(m, np.ones((16, 16, 3))).max() < 1
    with torch.no_grad():
        m.head.bias.fill_(-1e4)
    assert enhancer_forward(m, np.ones((16, 16, 3))).min() > 0


def test_contrast_reward_cases():
    assert contrast_reward(torch.full((1, 1, 8, 8), 0.3), 4).item() == pytest.approx(0.0, abs=1e-5)
    checker = (np.indices((8, 8)).sum(0) % 2).astype(np.float64)
    t = torch.as_tensor(checker)[None, None]
    assert contrast_reward(t, 2).item() == pytest.approx(0.5, abs=1e-6)
    assert contrast_reward_np(checker, 2) == pytest.approx(0.5)
    tex = 0.5 + 0.05 * np.random.default_rng(0).standard_normal((16, 16))
    stretched = 0.5 + 3 * (tex - 0.5)
    assert contrast_reward_np(stretched, 4) > contrast_reward_np(tex, 4)


@given(st.integers(0, 10_000))
def test_contrast_reward_torch_matches_numpy(seed):
    rng = np.random.default_rng(seed)
    img, w = rng.random((16, 16)), rng.random((16, 16))
    t = contrast_reward(torch.as_tensor(img)[None, None], 4, torch.as_tensor(w)[None, None]).item()
    assert t == pytest.approx(contrast_reward_np(img, 4, w), abs=1e-9)


def test_gabor_loss_identity_oracle_and_monotone():
    g = torch.tensor([[[[0.0, 1.0], [0.25, 0.5]]]], dtype=torch.float64)
    m = torch.tensor([[[[1.0, 1.0], [1.0, 0.0]]]], dtype=torch.float64)
    assert gabor_ridge_loss(g.clone(), g, m).item() == 0.0
    enh = torch.tensor([[[[0.5, 0.5], [0.5, 0.5]]]], dtype=torch.float64)
    # weights 1+|2g-1| = 2, 2, 1.5, (1); residuals 0.5, 0.5, 0.25, (0)
    expected = (0.5 * 2 + 0.5 * 2 + 0.25 * 1.5) / (3 + 1e-8)
    assert gabor_ridge_loss(enh, g, m).item() == pytest.approx(expected, rel=1e-12)
    vals = [gabor_ridge_loss((1 - a) * enh + a * g, g, m).item() for a in np.linspace(0, 1, 11)]
    assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))
    with pytest.raises(DegenerateInput):
        gabor_ridge_loss(enh, g, torch.zeros_like(m))


def test_ridge_valley_weight_range():
    g = np.linspace(0, 1, 11)
    w = ridge_valley_weight(g)
    assert w.min() == pytest.approx(1.0) and w.max() == pytest.approx(2.0)


def _loss_inputs(seed, s=8):
    enh, gray = rand(seed, 1, 1, s, s), rand(seed + 1, 1, 1, s, s)
    mask = (rand(seed + 2, 1, 1, s, s) > 0.3).double()
    mask[..., 2:6, 2:6] = 1.0
    gref = torch.as_tensor(ridge_reference(gray[0, 0].numpy(), EnhancerConfig(**SMALL).gabor))[None, None]
    wmap = rand(seed + 3, 1, 1, s, s)
    return enh, gray, mask, gref, wmap


def test_loss_component_isolation():
    cfg = EnhancerConfig(**{**SMALL, "w_contrast": 0.0})
    _, gray, mask, gref, wmap = _loss_inputs(0)
    total, comps = enhancer_loss(gray.clone(), gray, mask, cfg, gref, wmap)
    for k in ("l1", "ssim", "edge"):
        assert abs(comps[k].item()) < 1e-12
    assert total.item() == pytest.approx(cfg.w_gabor * gabor_ridge_loss(gray, gref, mask).item(), rel=1e-12)


def test_loss_constant_prediction_zero_reward_and_negative_total():
    cfg = EnhancerConfig(**SMALL)
    _, gray, mask, gref, wmap = _loss_inputs(1)
    total, comps = enhancer_loss(torch.full_like(gray, 0.5), gray, mask, cfg, gref, wmap)
    assert abs(comps["contrast"].item()) < 1e-5 and total.item() > 0
    checker = torch.as_tensor((np.indices((8, 8)).sum(0) % 2).astype(np.float64))[None, None]
    big = EnhancerConfig(**{**SMALL, "w_contrast": 100.0})
    total, _ = enhancer_loss(checker, checker, torch.ones_like(mask), big, checker, torch.ones_like(mask))
    assert total.item() < 0


@given(st.integers(0, 10_000))
def test_loss_invariant_outside_mask(seed):
    cfg = EnhancerConfig(**SMALL)
    enh, gray, mask, gref, wmap = _loss_inputs(seed)
    total, _ = enhancer_loss(enh, gray, mask, cfg, gref, wmap)
    out = 1 - mask
    noise = rand(seed + 9, 1, 1, 8, 8) * out
    total2, _ = enhancer_loss(enh * mask + noise, gray * mask + noise.flip(-1) * out, mask, cfg,
                              gref * mask + noise * 0.3, wmap * mask + noise)
    assert total2.item() == pytest.approx(total.item(), rel=1e-10, abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_matches_finite_differences(seed):
    cfg = EnhancerConfig(**SMALL)
    enh, gray, mask, gref, wmap = _loss_inputs(seed)
    assert rel_error(lambda x: enhancer_loss(x, gray, mask, cfg, gref, wmap)[0], enh) < 1e-4


def test_channel_local_contrast_cases():
    assert channel_local_contrast(np.full((8, 8, 3), 0.3), 2) == (0.0, 0.0, 0.0)
    img = np.full((8, 8, 3), 0.4)
    img[..., 2] = np.indices((8, 8)).sum(0) % 2
    assert channel_local_contrast(img, 2) == pytest.approx((0.0, 0.0, 0.5))
    pair = synth.synth_pair(synth.make_spec(0, 1, 1, 1))
    c_r, c_g, c_b = channel_local_contrast(pair.flash, 8)
    assert c_b > c_g > c_r


def test_train_smoke_determinism_overfit():
    data = samples(10)
    cfg = EnhancerConfig(**SMALL, epochs=5, lr=3e-3, batch_size=4, split=(0.7, 0.3, 0.0))
    _, hist = train_enhancer(data, cfg)
    assert hist[-1]["val_total"] < hist[0]["val_total"]
    _, hist2 = train_enhancer(data, cfg)
    assert [h["train_total"] for h in hist] == [h["train_total"] for h in hist2]
    one = EnhancerConfig(**{**SMALL, "w_contrast": 0.0, "w_gabor": 0.0}, epochs=200, lr=3e-3, batch_size=1,
                         split=(1.0, 0.0, 0.0), noise_sigma=0.0)
    _, h = train_enhancer(samples(1), one)
    assert h[-1]["train_l1"] < 0.02


def test_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(2)
    m = EnhancerModel(EnhancerConfig(**SMALL))
    img = np.random.default_rng(1).random((16, 16, 3))
    save_enhancer(tmp_path / "e.ckpt", m)
    np.testing.assert_array_equal(enhancer_forward(load_enhancer(tmp_path / "e.ckpt"), img),
                                  enhancer_forward(m, img))
