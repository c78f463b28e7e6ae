"""Training-side flow matching: interpolation, span masks, dropout and losses."""

from __future__ import annotations

import numpy as np
import torch

MASK_RANGE = (0.7, 1.0)


class ShapeMismatch(ValueError):
    pass


class AllVisible(ValueError):
    pass


def interpolate(z0, z1, t):
    """Rectified-flow path ``(1 - t) z0 + t z1``; ``t`` may be per-item ``[B]``."""
    if z0.shape != z1.shape:
        raise ShapeMismatch(f"z0 {tuple(z0.shape)} vs z1 {tuple(z1.shape)}")
    t = torch.as_tensor(t, dtype=z0.dtype)
    if ((t < 0) | (t > 1)).any():
        raise ValueError("t must lie in [0, 1]")
    if t.dim() == 1 and z0.dim() > 1:
        t = t.reshape(-1, *([1] * (z0.dim() - 1)))
    return (1 - t) * z0 + t * z1


def make_span_mask(n_frames: int, rng: np.random.Generator, ratio: float | None = None,
                   ratio_range: tuple[float, float] = MASK_RANGE) -> np.ndarray:
    """Binary frame mask, 1 = visible context, with one contiguous zero span.

    The masked fraction is drawn from ``U[ratio_range]`` unless ``ratio`` is
    given; the span start is uniform over the valid offsets.
    """
    if n_frames < 1:
        raise ValueError("need at least one frame")
    if ratio is None:
        ratio = rng.uniform(*ratio_range)
    span = int(round(ratio * n_frames))
    span = min(max(span, 1), n_frames)
    start = int(rng.integers(0, n_frames - span + 1))
    m = np.ones(n_frames, dtype=np.float32)
    m[start:start + span] = 0.0
    return m


def make_context(z1: torch.Tensor, mask) -> torch.Tensor:
    """``m * z1`` with the frame mask broadcast over channels (``[..., D, T]``)."""
    mask = torch.as_tensor(mask, dtype=z1.dtype)
    if mask.shape[-1] != z1.shape[-1]:
        raise ShapeMismatch(f"mask of {mask.shape[-1]} frames for latent of {z1.shape[-1]}")
    return z1 * mask.unsqueeze(-2)


def cond_dropout(rng: np.random.Generator, p: float = 0.1) -> bool:
    """One coin per item: True drops audio context and text together."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    return bool(rng.random() < p)


def cfm_loss(v_pred, z0, z1, mask, valid=None) -> torch.Tensor:
    """Masked velocity regression ``mean_{m=0} ((z1 - z0) - v)^2``.

    Shapes ``[D, T]`` with mask ``[T]``, or ``[B, D, T]`` with mask ``[B, T]``;
    batched inputs are reduced per item first and then averaged, and
    ``valid`` (``[B, T]``) excludes padding frames.
    """
    if not (v_pred.shape == z0.shape == z1.shape):
        raise ShapeMismatch("v_pred, z0 and z1 must share a shape")
    target = (1.0 - torch.as_tensor(mask, dtype=v_pred.dtype))
    if valid is not None:
        target = target * torch.as_tensor(valid, dtype=v_pred.dtype)
    sq = ((z1 - z0) - v_pred) ** 2
    if v_pred.dim() == 2:
        count = target.sum() * v_pred.shape[0]
        if count == 0:
            raise AllVisible("mask has no generation frames")
        return (sq * target[None]).sum() / count
    counts = target.sum(dim=-1) * v_pred.shape[1]
    if (counts == 0).any():
        raise AllVisible("an item in the batch has no generation frames")
    per_item = (sq * target[:, None, :]).sum(dim=(1, 2)) / counts
    return per_item.mean()


def resample_nearest(feats: torch.Tensor, n_frames: int) -> torch.Tensor:
    """Nearest-frame resampling of ``[..., C, T_src]`` to ``n_frames``."""
    src = feats.shape[-1]
    idx = torch.clamp(((torch.arange(n_frames) + 0.5) * src / n_frames).long(), max=src - 1)
    return feats[..., idx]


def repa_loss(repa_hidden: torch.Tensor, target_feats: torch.Tensor, proj: torch.nn.Module,
              valid=None) -> torch.Tensor:
    """Mean L1 between ``proj(hidden)`` and frame-aligned target features.

    ``repa_hidden``: ``[B, width, T]``; ``target_feats``: ``[B, C, T_src]``,
    resampled to ``T`` frames first.
    """
    if target_feats.shape[-1] != repa_hidden.shape[-1]:
        target_feats = resample_nearest(target_feats, repa_hidden.shape[-1])
    pred = proj(repa_hidden.transpose(-1, -2)).transpose(-1, -2)
    if pred.shape != target_feats.shape:
        raise ShapeMismatch(f"projected {tuple(pred.shape)} vs targets {tuple(target_feats.shape)}")
    err = torch.abs(pred - target_feats.to(pred.dtype))
    if valid is None:
        return err.mean()
    w = torch.as_tensor(valid, dtype=pred.dtype).unsqueeze(-2)
    return (err * w).sum() / (w.sum() * err.shape[-2])

