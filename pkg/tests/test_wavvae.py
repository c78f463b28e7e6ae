import itertools
import math

import numpy as np
import pytest
import torch

from wavdit import wavvae
from wavdit.wavvae import (LatentPacket, LossWeights, VaeConfig, WavVAE, shortcut_down, shortcut_up,
                           snake)

from fdcheck import check_gradients

MINI = dict(strides=(2, 2), channels=(2, 4, 8), latent_dim=4, kernel=3, dilations=(1, 3))


# ---------------------------------------------------------------------------
# brute-force index oracles for the parameter-free shortcuts


def down_oracle(h, s, c_out):
    b, c, t = h.shape
    folded = np.zeros((b, c * s, t // s))
    for bi, ci, j, tau in itertools.product(range(b), range(c), range(s), range(t // s)):
        folded[bi, ci * s + j, tau] = h[bi, ci, tau * s + j]
    g = c * s // c_out
    out = np.zeros((b, c_out, t // s))
    for bi, o, tau in itertools.product(range(b), range(c_out), range(t // s)):
        out[bi, o, tau] = sum(folded[bi, o * g + k, tau] for k in range(g)) / g
    return out


def up_oracle(h, s, c_out):
    b, c, t = h.shape
    base = c // s
    unfolded = np.zeros((b, base, t * s))
    for bi, ci, j, tau in itertools.product(range(b), range(base), range(s), range(t)):
        unfolded[bi, ci, tau * s + j] = h[bi, ci * s + j, tau]
    out = np.zeros((b, c_out, t * s))
    for bi, o in itertools.product(range(b), range(c_out)):
        out[bi, o] = unfolded[bi, o % base]
    return out


def shortcut_cases():
    for b, c, t, s in itertools.product(range(1, 3), range(1, 5), range(1, 9), range(1, 5)):
        if t % s:
            continue
        for c_out in range(1, c * s + 1):
            if (c * s) % c_out == 0:
                yield "down", b, c, t, s, c_out
        if c % s == 0:
            for c_out in range(1, 9):
                if c_out % (c // s) == 0:
                    yield "up", b, c, t, s, c_out


def test_shortcuts_match_index_oracles_exhaustively():
    rng = np.random.default_rng(0)
    n = 0
    for kind, b, c, t, s, c_out in shortcut_cases():
        h = rng.standard_normal((b, c, t))
        if kind == "down":
            got = shortcut_down(torch.from_numpy(h), s, c_out).numpy()
            want = down_oracle(h, s, c_out)
            # mean over groups vs left-to-right sum / g: compare at float64 rounding
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
            if (c * s) // c_out == 1:
                assert np.array_equal(got, want)
        else:
            got = shortcut_up(torch.from_numpy(h), s, c_out).numpy()
            assert np.array_equal(got, up_oracle(h, s, c_out))
        n += 1
    assert n > 300


def test_shortcut_examples():
    h = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
    assert shortcut_down(h, 2, 2).tolist() == [[[1.0, 3.0], [2.0, 4.0]]]
    assert shortcut_down(h, 2, 1).tolist() == [[[1.5, 3.5]]]
    assert shortcut_up(torch.tensor([[[5.0], [6.0]]]), 2, 1).tolist() == [[[5.0, 6.0]]]
    const = torch.full((2, 4, 8), 0.7)
    assert torch.all(shortcut_down(const, 4, 2) == 0.7)
    assert torch.all(shortcut_up(const, 2, 6) == 0.7)


def test_shortcut_up_inverts_down():
    h = torch.randn(2, 3, 12)
    assert torch.equal(shortcut_up(shortcut_down(h, 4, 12), 4, 3), h)


def test_shortcut_indivisible():
    with pytest.raises(wavvae.Indivisible):
        shortcut_down(torch.zeros(1, 2, 5), 2, 2)
    with pytest.raises(wavvae.Indivisible):
        shortcut_up(torch.zeros(1, 3, 5), 2, 2)


# ---------------------------------------------------------------------------
# layers


def test_snake_examples():
    assert float(snake(torch.tensor(0.0), torch.tensor(1.0))) == 0.0
    assert float(snake(torch.tensor(math.pi / 2), torch.tensor(1.0))) == pytest.approx(math.pi / 2 + 1)
    h = torch.linspace(-5, 5, 101, dtype=torch.float64)
    a = torch.tensor(1.7, dtype=torch.float64)
    shifted = h + math.pi / a
    assert torch.allclose(snake(shifted, a) - shifted, snake(h, a) - h, atol=1e-12)
    with pytest.raises(wavvae.NonPositiveAlpha):
        snake(h, torch.tensor(0.0))


def test_residual_unit_identity_when_projection_zero():
    ru = wavvae.ResidualUnit(3, kernel=5, dilation=3)
    with torch.no_grad():
        ru.proj.parametrizations.weight.original0.zero_()
        ru.proj.bias.zero_()
    h = torch.randn(2, 3, 20)
    assert torch.equal(ru(h), h)


@pytest.mark.parametrize("k, d", [(1, 1), (3, 1), (7, 9), (5, 2)])
def test_residual_unit_shape(k, d):
    ru = wavvae.ResidualUnit(4, kernel=k, dilation=d)
    assert ru(torch.randn(1, 4, 31)).shape == (1, 4, 31)


def test_residual_unit_hand_evaluation():
    ru = wavvae.ResidualUnit(1, kernel=1, dilation=1)
    with torch.no_grad():
        for conv in (ru.conv, ru.proj):
            conv.parametrizations.weight.original0.fill_(1.0)
            conv.parametrizations.weight.original1.fill_(1.0)
            conv.bias.zero_()
    ru.requires_grad_(False)
    assert float(ru(torch.zeros(1, 1, 1))) == 0.0
    x = torch.full((1, 1, 1), 0.5)
    s1 = 0.5 + math.sin(0.5) ** 2
    expected = 0.5 + s1 + math.sin(s1) ** 2
    assert float(ru(x)) == pytest.approx(expected, rel=1e-6)


def test_weight_norm_on_all_1d_convs():
    vae = WavVAE(VaeConfig(**MINI))
    for m in vae.modules():
        if isinstance(m, (torch.nn.Conv1d, torch.nn.ConvTranspose1d)):
            assert hasattr(m, "parametrizations")


# ---------------------------------------------------------------------------
# encoder / decoder contracts


def test_default_frame_rate():
    cfg = VaeConfig()
    assert cfg.hop == 2048
    assert round(cfg.frame_rate, 3) == 11.719
    rates = {r: VaeConfig.preset(r).frame_rate for r in wavvae.STRIDE_PRESETS}
    assert {r: round(v, 2) for r, v in rates.items()} == {1024: 23.44, 2048: 11.72, 3072: 7.81}


def test_config_validation():
    with pytest.raises(wavvae.ShapeError):
        VaeConfig(strides=(2, 2), channels=(4, 8))
    with pytest.raises(wavvae.ShapeError):
        VaeConfig(strides=(2,), channels=(8, 4), latent_dim=4)


def test_encode_decode_shapes():
    torch.manual_seed(0)
    vae = WavVAE(VaeConfig(**MINI))
    x = torch.randn(2, 4 * 5)
    pk = vae.encode(x)
    assert pk.mu.shape == pk.logvar.shape == pk.z.shape == (2, 4, 5)
    assert vae.decode(pk.z).shape == (2, 20)
    y = vae.decode(pk.z)
    assert torch.all(y.abs() <= 1)
    assert torch.equal(vae.decode(pk.z), y)


def test_reparameterization_records_noise():
    vae = WavVAE(VaeConfig(**MINI))
    g = torch.Generator().manual_seed(3)
    pk = vae.encode(torch.randn(1, 16), generator=g)
    assert torch.allclose(pk.z, pk.mu + torch.exp(0.5 * pk.logvar) * pk.eps)
    mu = torch.randn(3, 4)
    z = wavvae.reparameterize(mu, torch.full_like(mu, -30.0), torch.randn(3, 4))
    assert torch.max(torch.abs(z - mu)) < 1e-6


def test_padding_to_hop():
    vae = WavVAE(VaeConfig(**MINI))
    rng = np.random.default_rng(1)
    for n in rng.integers(5, 60, size=10):
        x = torch.randn(1, int(n))
        pk = vae.encode(x)
        padded = int(math.ceil(n / 4) * 4)
        assert pk.z.shape[-1] == padded // 4
        assert vae.decode(pk.z).shape[-1] == padded


def test_zeroed_encoder_is_shortcut_composition():
    cfg = VaeConfig(**MINI)
    vae = wavvae.zero_learnable_(WavVAE(cfg))
    x = torch.randn(2, 1, 16)
    h = shortcut_up(x, 1, cfg.channels[0])
    for s, c_out in zip(cfg.strides, cfg.channels[1:]):
        h = shortcut_down(h, s, c_out)
    expected = shortcut_down(h, 1, cfg.latent_dim)
    assert torch.allclose(vae.encoder.features(x), expected, atol=1e-7)
    mu, logvar = vae.encoder(x)
    assert torch.count_nonzero(mu) == 0 and torch.count_nonzero(logvar) == 0


def test_zeroed_decoder_is_shortcut_composition():
    cfg = VaeConfig(**MINI)
    vae = wavvae.zero_learnable_(WavVAE(cfg))
    z = torch.randn(2, cfg.latent_dim, 3)
    ch = cfg.channels[::-1]
    h = shortcut_up(z, 1, ch[0])
    for s, c_out in zip(cfg.strides[::-1], ch[1:]):
        h = shortcut_up(h, s, c_out)
    expected = shortcut_down(h, 1, 1)
    assert torch.allclose(vae.decoder.pre_activation(z), expected, atol=1e-7)
    assert torch.allclose(vae.decode(z), torch.tanh(expected)[:, 0], atol=1e-7)


# ---------------------------------------------------------------------------
# discriminator and losses


def test_discriminator_outputs():
    disc = wavvae.MultiScaleStftDiscriminator((256, 512, 1024), channels=4)
    out = disc(torch.randn(2, 4096))
    assert len(out.logits) == 3 and len(out.features) == 3
    assert all(len(f) == 4 for f in out.features)
    assert all(torch.isfinite(lg).all() for lg in out.logits)


def _packet(mu, logvar):
    return LatentPacket(mu, logvar, mu)


def test_generator_loss_identity_and_accounting():
    x = torch.randn(2, 4096) * 0.3
    zeros = torch.zeros(2, 4, 2)
    total, terms = wavvae.generator_loss(x, x.clone(), _packet(zeros, zeros), None)
    assert float(total) == 0.0
    assert float(terms["adv"]) == 0.0 and float(terms["fm"]) == 0.0

    w = LossWeights(spec=0.5, mel=2.0, time=3.0, kl=0.1, adv=1.5, fm=0.7)
    disc = wavvae.MultiScaleStftDiscriminator((256, 512), channels=4).double()
    x = x.double()
    x_hat = torch.randn(2, 4096, dtype=torch.float64) * 0.3
    mu, lv = torch.randn(2, 4, 2, dtype=torch.float64), torch.randn(2, 4, 2, dtype=torch.float64)
    total, terms = wavvae.generator_loss(x, x_hat, _packet(mu, lv), (disc(x), disc(x_hat)), w,
                                         phase="adversarial")
    recomposed = sum(getattr(w, k) * float(v.detach()) for k, v in terms.items())
    assert abs(float(total.detach()) - recomposed) < 1e-9 * max(1.0, abs(recomposed))


def test_warmup_isolates_generator_and_discriminator():
    torch.manual_seed(0)
    vae = WavVAE(VaeConfig(**MINI))
    disc = wavvae.MultiScaleStftDiscriminator((256, 512), channels=4)
    x = torch.randn(2, 2048) * 0.3
    pk = vae.encode(x)
    x_hat = vae.decode(pk.z)
    total, _ = wavvae.generator_loss(x, x_hat, pk, None, phase="warmup")
    grads = torch.autograd.grad(total, list(disc.parameters()), allow_unused=True)
    assert all(g is None or torch.count_nonzero(g) == 0 for g in grads)
    d_loss = wavvae.discriminator_loss(disc(x), disc(x_hat.detach()))
    grads = torch.autograd.grad(d_loss, list(vae.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


def test_discriminator_loss_examples():
    D = wavvae.DiscOutput
    hi = D([torch.full((3,), 10.0)] * 2, [[]] * 2)
    lo = D([torch.full((3,), -10.0)] * 2, [[]] * 2)
    zero = D([torch.zeros(3)] * 2, [[]] * 2)
    assert float(wavvae.discriminator_loss(hi, lo)) == 0.0
    assert float(wavvae.discriminator_loss(zero, zero)) == 2.0
    r = D([torch.randn(5)], [[]])
    f = D([torch.randn(5)], [[]])
    assert float(wavvae.discriminator_loss(r, f)) >= 0
    with pytest.raises(wavvae.ShapeError):
        wavvae.discriminator_loss(hi, D([torch.zeros(3)], [[]]))


def test_generator_loss_length_mismatch():
    z = torch.zeros(1, 4, 1)
    with pytest.raises(Exception):
        wavvae.generator_loss(torch.zeros(1, 4096), torch.zeros(1, 4000), _packet(z, z), None)


def test_mini_vae_gradients_match_finite_differences():
    torch.manual_seed(1)
    vae = WavVAE(VaeConfig(**MINI)).double()
    x = torch.randn(1, 512, dtype=torch.float64) * 0.3
    eps = torch.randn(1, 4, 128, dtype=torch.float64)
    small = (wavvae.StftConfig(64, 16, 64), wavvae.StftConfig(128, 32, 128))
    scales = tuple(zip(small, (8, 12)))

    def loss():
        mu, logvar = vae.encoder(x[:, None])
        z = wavvae.reparameterize(mu, logvar, eps)
        x_hat = vae.decode(z)
        total, _ = wavvae.generator_loss(x, x_hat, LatentPacket(mu, logvar, z), None,
                                         stft_cfgs=small, mel_scales=scales)
        return total

    assert check_gradients(loss, list(vae.parameters()), n_coords=24, seed=2) < 1e-4
