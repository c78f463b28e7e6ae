import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wavdit import dit, flowmatch
from wavdit.dit import DiT, DitConfig

from fdcheck import check_gradients

SMALL = DitConfig(layers=2, width=16, heads=2, latent_dim=4, text_dim=8)


def _live_model(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    m = DiT(cfg).double()
    g = torch.Generator().manual_seed(seed + 100)
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.endswith("_gain"):
                p.copy_(1 + 0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.add_(0.3 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return m


def test_timestep_frequencies_at_zero():
    f = dit.timestep_frequencies(0.0, 16)[0]
    assert torch.count_nonzero(f[:8]) == 0
    assert torch.all(f[8:] == 1.0)


def test_timestep_frequencies_injective_on_grid():
    f = dit.timestep_frequencies(torch.linspace(0, 1, 100, dtype=torch.float64), 64).double()
    d = torch.cdist(f, f)
    off = d + torch.eye(100, dtype=torch.float64) * 1e9
    assert float(off.min()) > 1e-3


def test_timestep_out_of_range():
    with pytest.raises(dit.OutOfRange):
        dit.timestep_frequencies(1.5, 8)
    with pytest.raises(dit.OutOfRange):
        dit.timestep_frequencies(-0.1, 8)


def test_timestep_embedder_width():
    assert dit.TimestepEmbedder(24)(torch.tensor([0.3, 0.9])).shape == (2, 24)


def test_qk_norm_contract():
    x = torch.randn(5, 7, 3, 16, dtype=torch.float64) * 4
    y = dit.qk_norm(x)
    rms = y.pow(2).mean(-1).sqrt()
    assert torch.max(torch.abs(rms - 1)) < 1e-4
    assert torch.max(torch.abs(dit.qk_norm(3 * x) - y)) < 1e-5
    assert torch.count_nonzero(dit.qk_norm(torch.zeros(4, 8))) == 0


def test_rope_identity_and_norm():
    x = torch.randn(3, 5, 8, dtype=torch.float64)
    assert torch.equal(dit.rope_apply(x, torch.zeros(5)), x)
    y = dit.rope_apply(x, torch.arange(5) * 7.0)
    assert torch.max(torch.abs(y.norm(dim=-1) - x.norm(dim=-1))) < 1e-6


def test_rope_rejects_odd_dim():
    with pytest.raises(dit.OddHeadDim):
        dit.rope_apply(torch.zeros(2, 5), torch.arange(2))
    with pytest.raises(dit.OddHeadDim):
        DitConfig(width=12, heads=4)


def test_rope_matches_complex_rotation():
    # independent oracle: pairs as complex numbers times exp(i * pos * theta_i)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 10))
    pos = np.arange(6) * 3.0 + 1
    theta = 10000.0 ** (-np.arange(0, 10, 2) / 10)
    c = (x[:, 0::2] + 1j * x[:, 1::2]) * np.exp(1j * pos[:, None] * theta[None])
    ref = np.stack([c.real, c.imag], axis=-1).reshape(6, 10)
    ours = dit.rope_apply(torch.from_numpy(x), torch.from_numpy(pos)).numpy()
    np.testing.assert_allclose(ours, ref, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(p=st.integers(0, 500), p2=st.integers(0, 500), s=st.integers(-200, 2000), seed=st.integers(0, 10_000))
def test_rope_relative_property(p, p2, s, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(16, generator=g, dtype=torch.float64)
    k = torch.randn(16, generator=g, dtype=torch.float64)

    def dot(a, b):
        return float(dit.rope_apply(q[None], torch.tensor([a], dtype=torch.float64))[0]
                     @ dit.rope_apply(k[None], torch.tensor([b], dtype=torch.float64))[0])
    assert abs(dot(p + s, p2 + s) - dot(p, p2)) < 1e-5


def test_config_clamps_repa_layer():
    assert DitConfig(layers=4).repa_layer == 4
    assert DitConfig(layers=12).repa_layer == 8
    with pytest.raises(ValueError):
        DitConfig(width=10, heads=4)


@pytest.mark.parametrize("frames", [1, 7, 64])
def test_zero_init_gives_zero_velocity(frames):
    torch.manual_seed(0)
    m = DiT(SMALL)
    z = torch.randn(2, 4, frames)
    out = m(z, torch.randn(2, 4, frames), torch.tensor([0.2, 0.7]), text=torch.randn(2, 3, 8))
    assert out.v.shape == z.shape
    assert out.repa_hidden.shape == (2, 16, frames)
    assert torch.count_nonzero(out.v) == 0


def test_zero_gates_make_blocks_identity():
    torch.manual_seed(0)
    m = DiT(SMALL)
    z = torch.randn(1, 4, 5)
    out = m(z, None, 0.5, text=torch.randn(1, 2, 8))
    # every residual branch is gated off, so the tap equals the input projection
    x_in = m.in_proj(torch.cat([z, torch.zeros_like(z)], 1).transpose(1, 2))
    assert torch.equal(out.repa_hidden, x_in.transpose(1, 2))


def test_global_adaln_structure():
    # with one layer both variants hold the same 11 modulation vectors
    for layers in (2, 3, 6):
        cfg = DitConfig(layers=layers, width=32, heads=4, latent_dim=8, text_dim=32)
        glob = DiT(cfg)
        per = DiT(DitConfig(**{**cfg.__dict__, "global_adaln": False}))
        assert len(glob.adaln_parameter_groups()) == 1
        assert dit.count_parameters(glob) < dit.count_parameters(per)


def test_same_time_embedding_same_modulation():
    m = _live_model()
    t_emb = m.time_embed(torch.tensor([0.4], dtype=torch.float64))
    a, b = m.global_adaln(t_emb), m.global_adaln(t_emb)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_shape_mismatch():
    m = DiT(SMALL)
    with pytest.raises(dit.ShapeMismatch):
        m(torch.zeros(1, 3, 5), None, 0.5)
    with pytest.raises(dit.ShapeMismatch):
        m(torch.zeros(1, 4, 5), torch.zeros(1, 4, 6), 0.5)


def test_joint_shift_invariance():
    m = _live_model()
    g = torch.Generator().manual_seed(1)
    z = torch.randn(2, 4, 9, generator=g, dtype=torch.float64)
    ctx = torch.randn(2, 4, 9, generator=g, dtype=torch.float64)
    q = torch.randn(2, 5, 8, generator=g, dtype=torch.float64)
    base = m(z, ctx, 0.3, text=q).v
    for s in (1, 17, 300):
        moved = m(z, ctx, 0.3, text=q, audio_offset=s, text_offset=s).v
        assert torch.max(torch.abs(moved - base)) < 1e-5
    # shifting only one modality changes the cross-attention geometry
    assert torch.max(torch.abs(m(z, ctx, 0.3, text=q, text_offset=5).v - base)) > 1e-6


def test_text_absent_skips_cross_attention():
    m = _live_model()
    z = torch.randn(1, 4, 6, dtype=torch.float64)
    none = m(z, None, 0.5, text=None).v
    dropped = m(z, None, 0.5, text=torch.randn(1, 3, 8, dtype=torch.float64),
                cond_keep=torch.tensor([False])).v
    assert torch.allclose(none, dropped, atol=1e-12)


def test_padding_masks_isolate_items():
    m = _live_model()
    g = torch.Generator().manual_seed(2)
    z = torch.randn(1, 4, 5, generator=g, dtype=torch.float64)
    q = torch.randn(1, 2, 8, generator=g, dtype=torch.float64)
    alone = m(z, None, 0.6, text=q).v
    zp = torch.cat([z, torch.randn(1, 4, 3, dtype=torch.float64)], -1)
    qp = torch.cat([q, torch.randn(1, 4, 8, dtype=torch.float64)], 1)
    am = torch.tensor([[True] * 5 + [False] * 3])
    tm = torch.tensor([[True] * 2 + [False] * 4])
    padded = m(zp, None, 0.6, text=qp, audio_mask=am, text_mask=tm).v
    assert torch.allclose(padded[..., :5], alone, atol=1e-10)


def test_forward_is_deterministic():
    m = _live_model()
    z = torch.randn(2, 4, 6, dtype=torch.float64)
    q = torch.randn(2, 3, 8, dtype=torch.float64)
    assert torch.equal(m(z, z, 0.5, text=q).v, m(z, z, 0.5, text=q).v)


def test_cfm_gradient_through_dit_matches_finite_differences():
    m = _live_model(seed=4)
    g = torch.Generator().manual_seed(5)
    z0 = torch.randn(1, 4, 6, generator=g, dtype=torch.float64)
    z1 = torch.randn(1, 4, 6, generator=g, dtype=torch.float64)
    q = torch.randn(1, 3, 8, generator=g, dtype=torch.float64)
    mask = torch.tensor([[1, 1, 0, 0, 0, 1]], dtype=torch.float64)
    t = torch.tensor([0.35], dtype=torch.float64)

    def loss():
        z_t = flowmatch.interpolate(z0, z1, t)
        v = m(z_t, flowmatch.make_context(z1, mask), t, text=q).v
        return flowmatch.cfm_loss(v, z0, z1, mask)

    # h = 1e-4 keeps round-off below 1e-5 relative for the smallest picked gradients
    assert check_gradients(loss, list(m.parameters()), n_coords=32, seed=1, h=1e-4) < 1e-4
