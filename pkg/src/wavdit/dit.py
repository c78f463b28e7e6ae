"""Velocity network: a DiT with global AdaLN, QK-Norm, RoPE and text cross-attention.

Latents enter and leave as ``[B, D, T]``; internally the transformer works on
``[B, T, width]``. The noisy latent and the context latent are concatenated
along channels before the input projection, and that projection is added
back to the last hidden state (long skip).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-6
ROPE_BASE = 10000.0
TIME_SCALE = 1000.0
N_MOD = 9  # (shift, scale, gate) x (self-attn, cross-attn, mlp)


class OddHeadDim(ValueError):
    pass


class OutOfRange(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class DitConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    repa_layer: int = 8
    latent_dim: int = 64
    text_dim: int = 64
    mlp_ratio: int = 4
    global_adaln: bool = True

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if (self.width // self.heads) % 2:
            raise OddHeadDim("RoPE needs an even head dimension")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        self.repa_layer = max(1, min(self.repa_layer, self.layers))


@dataclass
class ModelOutput:
    v: torch.Tensor            # [B, D, T]
    repa_hidden: torch.Tensor  # [B, width, T]


def timestep_frequencies(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding (sin half, cos half) before the MLP."""
    t = torch.as_tensor(t, dtype=torch.get_default_dtype()).reshape(-1)
    if (t < 0).any() or (t > 1).any():
        raise OutOfRange("timestep must lie in [0, 1]")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = TIME_SCALE * t[:, None] * freqs[None]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def qk_norm(x: torch.Tensor, gain: torch.Tensor | None = None, eps: float = NORM_EPS) -> torch.Tensor:
    """RMS-normalize the last axis: ``x / sqrt(mean(x^2) + eps) * gain``."""
    y = x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps)
    return y if gain is None else y * gain


def rope_apply(x: torch.Tensor, positions, base: float = ROPE_BASE) -> torch.Tensor:
    """Rotate consecutive pairs ``(x[2i], x[2i+1])`` by ``pos * base^(-2i/d)``.

    ``x``: ``[..., T, d]``; ``positions``: ``[T]`` or broadcastable ``[..., T]``.
    """
    d = x.shape[-1]
    if d % 2:
        raise OddHeadDim(f"head dimension {d} is odd")
    pos = torch.as_tensor(positions, dtype=x.dtype)
    inv = base ** (-torch.arange(0, d, 2, dtype=x.dtype) / d)
    ang = pos[..., None] * inv
    cos, sin = torch.cos(ang), torch.sin(ang)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None, :]) + shift[:, None, :]


def plain_norm(x):
    return F.layer_norm(x, x.shape[-1:], eps=NORM_EPS)


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.width = width
        self.mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))

    def forward(self, t):
        f = timestep_frequencies(t, self.width).to(self.mlp[0].weight.dtype)
        return self.mlp(f)


class AdaLNHead(nn.Module):
    """SiLU -> Linear producing ``n_out`` modulation vectors; zero-initialized."""

    def __init__(self, width: int, n_out: int):
        super().__init__()
        self.n_out = n_out
        self.proj = nn.Linear(width, n_out * width)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, t_emb):
        return self.proj(F.silu(t_emb)).chunk(self.n_out, dim=-1)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        kv_dim = kv_dim or width
        self.to_q = nn.Linear(width, width)
        self.to_k = nn.Linear(kv_dim, width)
        self.to_v = nn.Linear(kv_dim, width)
        self.q_gain = nn.Parameter(torch.ones(self.head_dim))
        self.k_gain = nn.Parameter(torch.ones(self.head_dim))
        self.out = nn.Linear(width, width)

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, x, q_pos, kv=None, k_pos=None, key_mask=None):
        kv = x if kv is None else kv
        k_pos = q_pos if k_pos is None else k_pos
        q = rope_apply(qk_norm(self._split(self.to_q(x)), self.q_gain), q_pos[:, None, :])
        k = rope_apply(qk_norm(self._split(self.to_k(kv)), self.k_gain), k_pos[:, None, :])
        v = self._split(self.to_v(kv))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        b, h, n, d = att.shape
        return self.out(att.transpose(1, 2).reshape(b, n, h * d))


class DiTBlock(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        w = cfg.width
        self.self_attn = Attention(w, cfg.heads)
        self.cross_attn = Attention(w, cfg.heads, kv_dim=cfg.text_dim)
        self.mlp = nn.Sequential(nn.Linear(w, cfg.mlp_ratio * w), nn.GELU(approximate="tanh"),
                                 nn.Linear(cfg.mlp_ratio * w, w))
        self.adaln = None if cfg.global_adaln else AdaLNHead(w, N_MOD)

    def forward(self, h, mods, t_emb, pos, audio_mask, text=None, text_pos=None, text_mask=None,
                text_keep=None):
        if self.adaln is not None:
            mods = self.adaln(t_emb)
        sh1, sc1, g1, sh2, sc2, g2, sh3, sc3, g3 = mods
        h = h + g1[:, None] * self.self_attn(modulate(plain_norm(h), sh1, sc1), pos, key_mask=audio_mask)
        if text is not None:
            ca = self.cross_attn(modulate(plain_norm(h), sh2, sc2), pos, kv=text,
                                 k_pos=text_pos, key_mask=text_mask)
            if text_keep is not None:
                ca = ca * text_keep[:, None, None]
            h = h + g2[:, None] * ca
        h = h + g3[:, None] * self.mlp(modulate(plain_norm(h), sh3, sc3))
        return h


class DiT(nn.Module):
    def __init__(self, cfg: DitConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DitConfig()
        w = cfg.width
        self.in_proj = nn.Linear(2 * cfg.latent_dim, w)
        self.time_embed = TimestepEmbedder(w)
        # shared head: 9 block modulations + final (shift, scale)
        self.global_adaln = AdaLNHead(w, N_MOD + 2) if cfg.global_adaln else None
        self.final_adaln = None if cfg.global_adaln else AdaLNHead(w, 2)
        self.blocks = nn.ModuleList(DiTBlock(cfg) for _ in range(cfg.layers))
        self.out_proj = nn.Linear(w, cfg.latent_dim)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def adaln_parameter_groups(self) -> list[nn.Module]:
        heads = [m for m in self.modules() if isinstance(m, AdaLNHead)]
        return heads

    def forward(self, z_t, z_ctx, t, text=None, audio_mask=None, text_mask=None,
                cond_keep=None, audio_offset=0, text_offset=0) -> ModelOutput:
        """
        z_t, z_ctx: ``[B, D, T]`` (``z_ctx`` may be None: no audio context).
        t: scalar or ``[B]``.
        text: refined text representation ``[B, L, E]`` or None (cross-attention skipped).
        audio_mask, text_mask: boolean validity masks for padded batches.
        cond_keep: ``[B]`` bool; False drops both z_ctx and text for that item.
        """
        if z_t.dim() != 3 or z_t.shape[1] != self.cfg.latent_dim:
            raise ShapeMismatch(f"z_t must be [B, {self.cfg.latent_dim}, T], got {tuple(z_t.shape)}")
        b, _, n = z_t.shape
        if z_ctx is None:
            z_ctx = torch.zeros_like(z_t)
        elif z_ctx.shape != z_t.shape:
            raise ShapeMismatch(f"z_ctx {tuple(z_ctx.shape)} vs z_t {tuple(z_t.shape)}")
        keep = None
        if cond_keep is not None:
            keep = cond_keep.to(z_t.dtype)
            z_ctx = z_ctx * keep[:, None, None]
        x = torch.cat([z_t, z_ctx], dim=1).transpose(1, 2)
        x_in = self.in_proj(x)

        t = torch.as_tensor(t, dtype=z_t.dtype).reshape(-1).expand(b)
        t_emb = self.time_embed(t)
        if self.global_adaln is not None:
            mods = self.global_adaln(t_emb)
            block_mods, final_mods = mods[:N_MOD], mods[N_MOD:]
        else:
            block_mods = None
            final_mods = self.final_adaln(t_emb)

        pos = (torch.arange(n, dtype=z_t.dtype) + audio_offset).expand(b, n)
        text_pos = None
        if text is not None:
            if text.dim() == 2:
                text = text[None].expand(b, *text.shape)
            text = text.to(z_t.dtype)
            text_pos = (torch.arange(text.shape[1], dtype=z_t.dtype) + text_offset).expand(b, text.shape[1])

        h = x_in
        repa = None
        for i, blk in enumerate(self.blocks, 1):
            h = blk(h, block_mods, t_emb, pos, audio_mask, text, text_pos, text_mask, keep)
            if i == self.cfg.repa_layer:
                repa = h
        h = h + x_in
        shift, scale = final_mods
        v = self.out_proj(modulate(plain_norm(h), shift, scale))
        return ModelOutput(v.transpose(1, 2), repa.transpose(1, 2))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
