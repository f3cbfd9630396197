import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from f2p import checkpoint
from f2p.errors import CheckpointTypeError, DegenerateInput, InvalidArgument
from f2p.fusion import (FeatureNet, FusionConfig, FusionModel, freq_amplify, fusion_forward, fusion_loss,
                        load_fusion, save_fusion, train_fusion)
from f2p.tensor_ops import high_pass_magnitude

from gradutil import rand, rel_error

SMALL = dict(image_size=16, encoder_channels=(4, 8, 8))


def pair(seed, s=16):
    rng = np.random.default_rng(seed)
    return rng.random((s, s, 3)), rng.random((s, s, 3))


def synthetic_pairs(n, s=16, seed=0):
    """Flash = ridges + glow, non-flash = dim glow; target = ridges; elliptical mask."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:s, 0:s] / s
    out = []
    for _ in range(n):
        th, ph = rng.uniform(0, np.pi), rng.uniform(0, 2 * np.pi)
        ridges = 0.5 + 0.4 * np.cos(2 * np.pi * 4 * (x * np.cos(th) + y * np.sin(th)) + ph)
        glow = 0.2 * np.exp(-((x - rng.random()) ** 2 + (y - rng.random()) ** 2) / 0.1)
        fl = np.clip(np.stack([ridges * c for c in (0.6, 0.8, 1.0)], -1) * 0.8 + glow[..., None], 0, 1)
        nf = np.clip(0.3 + glow[..., None] + 0.02 * rng.standard_normal((s, s, 3)), 0, 1)
        mask = ((x - 0.5) ** 2 / 0.18 + (y - 0.5) ** 2 / 0.22) <= 1
        target = np.where(mask[..., None], np.stack([ridges] * 3, -1), 1.0)
        out.append((fl, nf, target, mask))
    return out


@given(st.integers(0, 2**31 - 1))
def test_attention_weights_partition_of_unity(seed):
    torch.manual_seed(seed % 10_000)
    m = FusionModel(FusionConfig(**SMALL))
    a, b = torch.randn(2, 1, 8, 4, 4).unbind(0)
    w1, w2 = m.attention_weights(a, b)
    assert (w1 + w2 - 1).abs().max() < 1e-6
    assert w1.min() >= 0 and w1.max() <= 1


def test_attention_zero_init_and_mismatch():
    m = FusionModel(FusionConfig(**SMALL))
    torch.nn.init.zeros_(m.attention.weight)
    torch.nn.init.zeros_(m.attention.bias)
    w1, _ = m.attention_weights(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 4, 4))
    assert torch.all(w1 == 0.5)
    with pytest.raises(InvalidArgument):
        m.attention_weights(torch.randn(1, 8, 4, 4), torch.randn(1, 8, 2, 2))


def test_freq_amplify_identity_constant_and_bounds():
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    assert torch.equal(freq_amplify(x, 0.0), x)
    c = torch.full((1, 3, 8, 8), 0.4, dtype=torch.float64)
    out = freq_amplify(c, 1.0)
    assert torch.allclose(out, c, atol=1e-12) and torch.allclose(out, out.flatten()[0].expand_as(out))
    mag = high_pass_magnitude(x)
    peak = mag.amax(dim=(2, 3), keepdim=True)
    ratio = freq_amplify(x, 1.0) / x
    assert torch.all(ratio >= 1 - 1e-12)
    assert torch.all(ratio <= 1 + torch.log1p(peak) / peak + 1e-12)
    with pytest.raises(InvalidArgument):
        freq_amplify(x, -1.0)


def test_forward_shape_determinism_and_ablation():
    fl, nf = pair(0)
    torch.manual_seed(0)
    m = FusionModel(FusionConfig(**SMALL))
    out, w1 = fusion_forward(m, fl, nf)
    assert out.shape == (16, 16, 3) and w1.shape == (4, 4)
    torch.manual_seed(0)
    m2 = FusionModel(FusionConfig(**SMALL))
    np.testing.assert_array_equal(fusion_forward(m2, fl, nf)[0], out)
    plain = FusionModel(FusionConfig(**SMALL, amp_gain=0.0, edge_gain=0.0))
    plain.load_state_dict(m.state_dict())
    plain.eval()
    from f2p.tensor_ops import to_tensor
    with torch.no_grad():
        raw, _ = plain.raw_decode(to_tensor(fl), to_tensor(nf))
        full, _ = plain(to_tensor(fl), to_tensor(nf))
    assert torch.equal(raw.clamp(0, 1), full)
    with pytest.raises(InvalidArgument):
        fusion_forward(m, fl[:8], nf[:8])


def _loss_inputs(seed, s=8):
    pred, target = rand(seed, 1, 3, s, s), rand(seed + 1, 1, 3, s, s)
    mask = (rand(seed + 2, 1, 1, s, s) > 0.3).double()
    mask[..., s // 2, s // 2] = 1.0
    return pred, target, mask


def test_loss_identity_is_zero():
    phi = FeatureNet(0).double()
    _, t, m = _loss_inputs(0)
    total, comps = fusion_loss(t.clone(), t, m, phi, FusionConfig(image_size=8))
    assert abs(total.item()) < 1e-12
    assert all(abs(v.item()) < 1e-12 for v in comps.values())


def test_loss_fourier_hinge_inactive_for_sharper_pred():
    phi = FeatureNet(0).double()
    m = torch.ones(1, 1, 16, 16, dtype=torch.float64)
    t = torch.full((1, 3, 16, 16), 0.5, dtype=torch.float64)
    p = t + 0.3 * (rand(1, 1, 3, 16, 16) - 0.5)
    _, comps = fusion_loss(p, t, m, phi, FusionConfig(image_size=16))
    assert comps["fourier"].item() == 0.0


def test_loss_l1_scalar_oracle():
    phi = FeatureNet(0).double()
    p = torch.tensor([[0.1, 0.2, 0.3, 0.4], [0.5, 0.6, 0.7, 0.8], [0.9, 1.0, 0.0, 0.1], [0.2, 0.3, 0.4, 0.5]],
                     dtype=torch.float64)
    t = torch.full((4, 4), 0.25, dtype=torch.float64)
    m = torch.zeros(4, 4, dtype=torch.float64)
    m[1:3, 1:3] = 1
    expected = sum(abs(p[i, j].item() - 0.25) for i in (1, 2) for j in (1, 2)) / 4
    pred = p.expand(1, 3, 4, 4).clone()
    _, comps = fusion_loss(pred, t.expand(1, 3, 4, 4).clone(), m[None, None], phi, FusionConfig(image_size=4))
    assert comps["l1"].item() == pytest.approx(expected, abs=1e-12)


@given(st.integers(0, 10_000))
def test_loss_components_nonneg_total_exact_and_masked(seed):
    phi = FeatureNet(0).double()
    cfg = FusionConfig(image_size=8)
    p, t, m = _loss_inputs(seed)
    total, comps = fusion_loss(p, t, m, phi, cfg)
    assert all(v.item() >= 0 for v in comps.values())
    assert total.item() == pytest.approx(sum(w * c.item() for w, c in zip(cfg.loss_weights, comps.values())),
                                         rel=1e-12, abs=1e-15)
    noise = rand(seed + 7, 1, 3, 8, 8) * (1 - m)
    total2, _ = fusion_loss(p + noise, t + noise.flip(1), m, phi, cfg)
    assert total2.item() == pytest.approx(total.item(), rel=1e-10, abs=1e-14)


def test_loss_empty_mask():
    p, t, _ = _loss_inputs(0)
    with pytest.raises(DegenerateInput):
        fusion_loss(p, t, torch.zeros(1, 1, 8, 8, dtype=torch.float64), FeatureNet(0).double(),
                    FusionConfig(image_size=8))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradient_matches_finite_differences(seed):
    phi = FeatureNet(0).double()
    cfg = FusionConfig(image_size=8)
    p, t, m = _loss_inputs(seed)
    assert rel_error(lambda x: fusion_loss(x, t, m, phi, cfg)[0], p) < 1e-4


def test_train_smoke_determinism_and_partition():
    data = synthetic_pairs(10)
    cfg = FusionConfig(**SMALL, epochs=5, lr=3e-3, batch_size=4, split=(0.7, 0.3, 0.0))
    m, hist = train_fusion(data, cfg)
    assert hist[-1]["val_total"] < hist[0]["val_total"]
    _, hist2 = train_fusion(data, cfg)
    assert [h["train_total"] for h in hist] == [h["train_total"] for h in hist2]
    from f2p.tensor_ops import to_tensor
    ff, fn = m.enc_flash(to_tensor(data[0][0])), m.enc_nonflash(to_tensor(data[0][1]))
    w1, w2 = m.attention_weights(ff[-1], fn[-1])
    assert (w1 + w2 - 1).abs().max() < 1e-6
    assert set(hist[0]) >= {"epoch", "train_l1", "val_l1", "train_perceptual", "val_total"}


def test_train_overfits_one_pair():
    data = synthetic_pairs(1)
    cfg = FusionConfig(**SMALL, epochs=200, lr=3e-3, batch_size=1, split=(1.0, 0.0, 0.0))
    _, hist = train_fusion(data, cfg)
    assert hist[-1]["train_l1"] < 0.01


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    fl, nf = pair(3)
    torch.manual_seed(1)
    m = FusionModel(FusionConfig(**SMALL))
    save_fusion(tmp_path / "f.ckpt", m)
    back = load_fusion(tmp_path / "f.ckpt")
    np.testing.assert_array_equal(fusion_forward(back, fl, nf)[0], fusion_forward(m, fl, nf)[0])
    with pytest.raises(CheckpointTypeError):
        checkpoint.load(tmp_path / "f.ckpt", "embedder")
