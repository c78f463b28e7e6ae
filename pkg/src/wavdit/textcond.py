"""Text conditioning: dual-embedding combination and ConvNeXt V2 refinement.

The pretrained multilingual LM is replaced by :class:`ToyTextEncoder` (an
embedding table plus a small bidirectional transformer); precomputed LM
features can be read with :func:`load_text_features` instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorio import read_tensor, write_tensor

LN_EPS = 1e-6


class UnknownToken(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class TextFeatures:
    raw_embedding: torch.Tensor  # [L, E] or [B, L, E]
    last_hidden: torch.Tensor

    def __post_init__(self):
        if self.raw_embedding.shape != self.last_hidden.shape:
            raise ShapeMismatch(
                f"raw {tuple(self.raw_embedding.shape)} vs hidden {tuple(self.last_hidden.shape)}")


def layer_norm(v: torch.Tensor, eps: float = LN_EPS) -> torch.Tensor:
    """Non-parametric layer norm over the last axis."""
    mean = v.mean(dim=-1, keepdim=True)
    var = v.var(dim=-1, unbiased=False, keepdim=True)
    return (v - mean) / torch.sqrt(var + eps)


def combine_embeddings(f: TextFeatures) -> torch.Tensor:
    """``q = LN(last_hidden) + LN(raw_embedding)``."""
    return layer_norm(f.last_hidden) + layer_norm(f.raw_embedding)


def sinusoid_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = pos * freqs[None]
    out = torch.zeros(length, dim, dtype=torch.float64)
    out[:, :half] = torch.sin(ang)
    out[:, half:2 * half] = torch.cos(ang)
    return out.to(dtype)


class ToyTextEncoder(nn.Module):
    """Stand-in for a pretrained LM: embedding lookup + 2-layer bidirectional encoder."""

    def __init__(self, vocab_size: int, dim: int, layers: int = 2, heads: int = 2):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embed.weight, std=1.0)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=4 * dim, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> TextFeatures:
        """``tokens``: ``[L]`` or ``[B, L]`` ids; ``mask`` marks valid positions."""
        squeeze = tokens.dim() == 1
        if squeeze:
            tokens = tokens[None]
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise UnknownToken(f"token ids must lie in [0, {self.vocab_size})")
        raw = self.embed(tokens)
        pos = sinusoid_positions(tokens.shape[1], raw.shape[-1], raw.dtype)
        pad = None if mask is None else ~mask
        hid = self.encoder(raw + pos, src_key_padding_mask=pad)
        if squeeze:
            raw, hid = raw[0], hid[0]
        return TextFeatures(raw, hid)


def write_text_features(stem: str | Path, f: TextFeatures) -> None:
    stem = Path(stem)
    write_tensor(stem.with_name(stem.name + ".raw.f32"), f.raw_embedding.detach().cpu().numpy())
    write_tensor(stem.with_name(stem.name + ".hid.f32"), f.last_hidden.detach().cpu().numpy())


def load_text_features(stem: str | Path) -> TextFeatures:
    """Read ``<stem>.raw.f32`` / ``<stem>.hid.f32`` and their ``.json`` manifests."""
    stem = Path(stem)
    raw, _ = read_tensor(stem.with_name(stem.name + ".raw.f32"))
    hid, _ = read_tensor(stem.with_name(stem.name + ".hid.f32"))
    if raw.ndim != 2 or raw.shape != hid.shape:
        raise ShapeMismatch(f"{stem}: raw {raw.shape} vs hidden {hid.shape}")
    return TextFeatures(torch.from_numpy(raw.copy()), torch.from_numpy(hid.copy()))


class GRN(nn.Module):
    """Global response normalization over the sequence axis (ConvNeXt V2)."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(dim))
        self.beta = nn.Parameter(torch.zeros(dim))

    def forward(self, x, mask=None):
        if mask is not None:
            x = x * mask[..., None]
        gx = torch.sqrt((x ** 2).sum(dim=1, keepdim=True) + 1e-12)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, kernel: int = 7, expand: int = 4):
        super().__init__()
        self.dwconv = nn.Conv1d(dim, dim, kernel, padding=kernel // 2, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.pw1 = nn.Linear(dim, expand * dim)
        self.grn = GRN(expand * dim)
        self.pw2 = nn.Linear(expand * dim, dim)

    def forward(self, x, mask=None):
        if mask is not None:
            x = x * mask[..., None]
        h = self.dwconv(x.transpose(1, 2)).transpose(1, 2)
        h = self.pw1(self.norm(h))
        h = self.grn(F.gelu(h), mask)
        return x + self.pw2(h)


class TextRefiner(nn.Module):
    def __init__(self, dim: int, blocks: int = 4, kernel: int = 7):
        super().__init__()
        self.blocks = nn.ModuleList(ConvNeXtBlock(dim, kernel) for _ in range(blocks))

    def zero_init_(self):
        for b in self.blocks:
            nn.init.zeros_(b.pw2.weight)
            nn.init.zeros_(b.pw2.bias)
        return self

    def forward(self, q: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = q.dim() == 2
        if squeeze:
            q = q[None]
            mask = None if mask is None else mask[None]
        for block in self.blocks:
            q = block(q, mask)
        if mask is not None:
            q = q * mask[..., None]
        return q[0] if squeeze else q


class TextConditioner(nn.Module):
    """tokens (or external features) -> refined text representation ``q``."""

    def __init__(self, vocab_size: int, dim: int, refine_blocks: int = 4,
                 encoder_layers: int = 2, encoder_heads: int = 2, feature_dim: int | None = None):
        super().__init__()
        self.encoder = ToyTextEncoder(vocab_size, dim, encoder_layers, encoder_heads)
        self.adapter = nn.Linear(feature_dim, dim) if feature_dim and feature_dim != dim else None
        self.refiner = TextRefiner(dim, refine_blocks)

    def from_features(self, f: TextFeatures, mask=None) -> torch.Tensor:
        """Condition on precomputed encoder features (the adapter maps their width)."""
        q = combine_embeddings(f)
        if self.adapter is not None:
            q = self.adapter(q)
        return self.refiner(q, mask)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        # the built-in encoder already emits `dim`-wide features
        return self.refiner(combine_embeddings(self.encoder(tokens, mask)), mask)


def pad_tokens(seqs: list[list[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad token lists; returns ``(ids [B, L], valid mask [B, L])``."""
    length = max(len(s) for s in seqs)
    ids = np.zeros((len(seqs), length), dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return torch.from_numpy(ids), torch.from_numpy(mask)
