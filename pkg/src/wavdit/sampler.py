"""Euler ODE sampling with context overwriting, CFG and adaptive projection guidance.

A *model* here is any callable ``model(z_t, t, z_ctx, q) -> v`` on single
utterances, with ``z_t``/``z_ctx``/``v`` shaped ``[D, T]`` and ``z_ctx`` or
``q`` possibly ``None`` (condition absent). :class:`DitVelocity` adapts a
trained :class:`~wavdit.dit.DiT` to that interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

GUIDANCE_MODES = ("none", "cfg", "apg")


class TDegenerate(ValueError):
    pass


class EmptyGenRegion(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


@dataclass
class SamplerConfig:
    nfe: int = 16
    guidance: str = "apg"
    alpha: float = 4.0
    eta: float = 0.5
    beta: float = -0.3
    t_clip: float = 1e-3

    def __post_init__(self):
        if self.nfe < 1:
            raise ValueError("nfe must be >= 1")
        if not 0.0 < self.t_clip < 0.1:
            raise ValueError("t_clip must lie in (0, 0.1)")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"guidance must be one of {GUIDANCE_MODES}")


@dataclass
class GuidanceState:
    momentum: torch.Tensor | None = None

    def reset(self):
        self.momentum = None


@dataclass
class InferenceRequest:
    prompt_latent: torch.Tensor   # [D, T_ctx]
    text: torch.Tensor | None     # [L, E]
    total_frames: int
    seed: int = 0

    def __post_init__(self):
        t_ctx = self.prompt_latent.shape[-1]
        if not self.total_frames > t_ctx >= 0:
            raise ValueError(f"need total_frames > T_ctx >= 0, got {self.total_frames} and {t_ctx}")

    @property
    def ctx_frames(self) -> int:
        return self.prompt_latent.shape[-1]


@dataclass
class ModelInput:
    z_t: torch.Tensor
    z_ctx: torch.Tensor | None
    t: float
    q: torch.Tensor | None
    ctx_present: bool = True
    frame_offset: int = 0  # index of z_t[:, 0] in the full sequence


def estimate_duration(ctx_frames: int, prompt_chars: int, target_chars: int,
                      override: int | None = None) -> int:
    """Total frames from the prompt's frames-per-character rate."""
    if override is not None:
        return int(override)
    if prompt_chars <= 0:
        raise ValueError("prompt_chars must be positive")
    return ctx_frames + int(round(ctx_frames * target_chars / prompt_chars))


def overwrite_ctx(z_t: torch.Tensor, z_ctx: torch.Tensor, z0_ctx: torch.Tensor, t: float) -> torch.Tensor:
    """Replace the first ``T_ctx`` frames with ``t z_ctx + (1 - t) z0_ctx``."""
    n = z_ctx.shape[-1]
    if n > z_t.shape[-1] or z0_ctx.shape != z_ctx.shape or z_ctx.shape[:-1] != z_t.shape[:-1]:
        raise ShapeMismatch(f"context {tuple(z_ctx.shape)} does not fit latent {tuple(z_t.shape)}")
    out = z_t.clone()
    out[..., :n] = t * z_ctx + (1 - t) * z0_ctx
    return out


def make_uncond_input(z_t: torch.Tensor, ctx_frames: int, t: float = 0.0) -> ModelInput:
    """Drop the prompt frames entirely; text and context are absent."""
    if ctx_frames >= z_t.shape[-1]:
        raise EmptyGenRegion("no generation frames left after removing the prompt")
    return ModelInput(z_t[..., ctx_frames:], None, t, None, ctx_present=False, frame_offset=ctx_frames)


def cfg_velocity(v_c: torch.Tensor, v_u: torch.Tensor, alpha: float) -> torch.Tensor:
    if v_c.shape != v_u.shape:
        raise ShapeMismatch(f"v_c {tuple(v_c.shape)} vs v_u {tuple(v_u.shape)}")
    return v_c + alpha * (v_c - v_u)


def project(delta: torch.Tensor, ref: torch.Tensor, floor: float = 1e-12):
    """Split ``delta`` into components parallel and orthogonal to ``ref``."""
    denom = torch.sum(ref * ref)
    if denom < floor:
        parallel = torch.zeros_like(delta)
    else:
        parallel = torch.sum(delta * ref) / denom * ref
    return parallel, delta - parallel


def apg_velocity(v_c, v_u, z_t, t: float, cfg: SamplerConfig, state: GuidanceState) -> torch.Tensor:
    """Adaptive projection guidance on one utterance's generation region.

    Velocities are mapped to clean-sample predictions ``mu = z + (1 - t) v``;
    the guidance difference goes through the reverse-momentum accumulator,
    is split against the conditional ``mu``, recombined with ``alpha`` on the
    orthogonal and ``eta`` on the parallel part, and mapped back.
    """
    if v_c.shape != v_u.shape or v_c.shape != z_t.shape:
        raise ShapeMismatch("v_c, v_u and z_t must share a shape")
    if t >= 1.0 - cfg.t_clip:
        raise TDegenerate(f"t={t} too close to 1 for the sample-domain back-map")
    mu_c = z_t + (1 - t) * v_c
    mu_u = z_t + (1 - t) * v_u
    delta = mu_c - mu_u
    if state.momentum is None:
        state.momentum = torch.zeros_like(delta)
    state.momentum = delta + cfg.beta * state.momentum
    parallel, orth = project(state.momentum, mu_c)
    mu_apg = mu_c + cfg.alpha * orth + cfg.eta * parallel
    return (mu_apg - z_t) / (1 - t)


def call_model(model: Callable, inp: ModelInput) -> torch.Tensor:
    return model(inp.z_t, inp.t, inp.z_ctx, inp.q)


def euler_solve(model: Callable, req: InferenceRequest, cfg: SamplerConfig | None = None,
                callback: Callable | None = None, overwrite: bool = True) -> torch.Tensor:
    """Integrate ``dz = v dt`` from noise on the grid ``t_i = i / nfe``.

    Returns the generation-region latent ``[D, T - T_ctx]``. ``callback`` is
    called as ``callback(step, t, z)`` after the context overwrite of each
    step. ``overwrite=False`` reproduces the uncorrected sampler (context
    frames then follow the model's own velocities).
    """
    cfg = cfg or SamplerConfig()
    prompt = req.prompt_latent
    d, n_ctx = prompt.shape
    n = req.total_frames
    gen = torch.Generator().manual_seed(req.seed)
    z0 = torch.randn((d, n), generator=gen, dtype=torch.float64).to(prompt.dtype)
    z0_ctx = z0[:, :n_ctx]
    ctx_full = torch.zeros_like(z0)
    ctx_full[:, :n_ctx] = prompt
    state = GuidanceState()
    dt = 1.0 / cfg.nfe
    z = z0.clone()
    for i in range(cfg.nfe):
        t = i / cfg.nfe
        if overwrite or i == 0:
            z = overwrite_ctx(z, prompt, z0_ctx, t)
        if callback is not None:
            callback(i, t, z)
        v_c = model(z, t, ctx_full, req.text)
        v = v_c.clone()
        if cfg.guidance != "none":
            unc = make_uncond_input(z, n_ctx, t)
            v_u = call_model(model, unc)
            v_c_gen = v_c[:, n_ctx:]
            if cfg.guidance == "cfg":
                v[:, n_ctx:] = cfg_velocity(v_c_gen, v_u, cfg.alpha)
            else:
                v[:, n_ctx:] = apg_velocity(v_c_gen, v_u, unc.z_t, t, cfg, state)
        if overwrite:
            # context frames are reset by the overwrite at the next step
            z = z.clone()
            z[:, n_ctx:] = z[:, n_ctx:] + v[:, n_ctx:] * dt
        else:
            z = z + v * dt
    return z[:, n_ctx:]


@dataclass
class DitVelocity:
    """Single-utterance callable around a DiT (``[D, T]`` in, ``[D, T]`` out)."""

    dit: torch.nn.Module
    calls: int = field(default=0)

    @torch.no_grad()
    def __call__(self, z_t, t, z_ctx, q):
        self.calls += 1
        dtype = next(self.dit.parameters()).dtype
        text = None if q is None else q[None].to(dtype)
        ctx = None if z_ctx is None else z_ctx[None].to(dtype)
        out = self.dit(z_t[None].to(dtype), ctx, torch.tensor([t], dtype=dtype), text)
        return out.v[0].to(z_t.dtype)
