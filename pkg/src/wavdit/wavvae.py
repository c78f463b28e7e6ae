"""Fully convolutional waveform VAE with parameter-free shortcut paths.

Encoder: input conv -> N strided Oobleck blocks -> projection to D channels
-> (mu, logvar) bottleneck. Every stage carries a parameter-free shortcut
(space-to-channel fold + channel averaging on the way down, channel-to-space
unfold + channel tiling on the way up) that is added to the learned branch.
The decoder mirrors the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm

from . import spectral
from .spectral import StftConfig


class ShapeError(ValueError):
    pass


class Indivisible(ShapeError):
    pass


class NonPositiveAlpha(ValueError):
    pass


STRIDE_PRESETS = {
    # R: (strides, channels)
    1024: ((4, 4, 8, 8), (16, 32, 64, 128, 256)),
    2048: ((4, 4, 8, 16), (16, 32, 64, 128, 256)),
    3072: ((4, 4, 12, 16), (16, 32, 64, 192, 256)),
}


@dataclass
class VaeConfig:
    strides: tuple[int, ...] = (4, 4, 8, 16)
    channels: tuple[int, ...] = (16, 32, 64, 128, 256)
    latent_dim: int = 64
    kernel: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)
    snake_alpha_init: float = 1.0
    sample_rate: int = 24000
    disc_ffts: tuple[int, ...] = (512, 1024, 2048)
    disc_channels: int = 16

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        self.dilations = tuple(int(d) for d in self.dilations)
        self.disc_ffts = tuple(int(n) for n in self.disc_ffts)
        self.validate()

    @classmethod
    def preset(cls, hop: int = 2048, latent_dim: int = 64, **kw) -> "VaeConfig":
        strides, channels = STRIDE_PRESETS[hop]
        return cls(strides=strides, channels=channels, latent_dim=latent_dim, **kw)

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def validate(self) -> None:
        n = len(self.strides)
        if len(self.channels) != n + 1:
            raise ShapeError(f"need {n + 1} channel counts for {n} blocks")
        if self.latent_dim <= 0 or self.sample_rate <= 0:
            raise ShapeError("latent_dim and sample_rate must be positive")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ShapeError("encoder channels must be strictly increasing")
        for s, c_in, c_out in zip(self.strides, self.channels, self.channels[1:]):
            if s < 1 or (c_in * s) % c_out:
                raise Indivisible(f"down shortcut {c_in}x{s} -> {c_out} does not divide")
            if c_out % s or (c_in * s) % c_out:
                raise Indivisible(f"up shortcut {c_out}/{s} -> {c_in} does not divide")
        top = self.channels[-1]
        if top % self.latent_dim and self.latent_dim % top:
            raise Indivisible(f"projection shortcut between {top} and {self.latent_dim} channels")
        if top % self.latent_dim:
            raise Indivisible("latent_dim must divide the deepest channel count")


# ---------------------------------------------------------------------------
# parameter-free pieces


def snake(h: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    """``h + sin^2(alpha h) / alpha`` with ``alpha`` broadcast over channels."""
    alpha = torch.as_tensor(alpha, dtype=h.dtype)
    if (alpha <= 0).any():
        raise NonPositiveAlpha("snake alpha must be positive")
    if alpha.dim() == 1 and h.dim() == 3:
        alpha = alpha[None, :, None]
    return h + torch.sin(alpha * h) ** 2 / alpha


def shortcut_down(h: torch.Tensor, stride: int, c_out: int) -> torch.Tensor:
    """Fold ``stride`` consecutive steps into channels, then average channel groups.

    ``[B, C, T] -> [B, C*s, T/s]`` where channel ``c*s + j`` carries time
    ``t*s + j`` of channel ``c``; consecutive groups of ``C*s/c_out`` channels
    are then averaged.
    """
    b, c, t = h.shape
    if t % stride or (c * stride) % c_out:
        raise Indivisible(f"cannot fold [{c}, {t}] by {stride} into {c_out} channels")
    folded = h.reshape(b, c, t // stride, stride).transpose(2, 3).reshape(b, c * stride, t // stride)
    group = c * stride // c_out
    if group == 1:
        return folded
    return folded.reshape(b, c_out, group, t // stride).mean(dim=2)


def shortcut_up(h: torch.Tensor, stride: int, c_out: int) -> torch.Tensor:
    """Inverse of the fold in :func:`shortcut_down`, then tile channels to ``c_out``."""
    b, c, t = h.shape
    if c % stride:
        raise Indivisible(f"{c} channels cannot unfold by {stride}")
    base = c // stride
    if c_out % base:
        raise Indivisible(f"cannot tile {base} channels up to {c_out}")
    unfolded = h.reshape(b, base, stride, t).transpose(2, 3).reshape(b, base, t * stride)
    reps = c_out // base
    return unfolded if reps == 1 else unfolded.repeat(1, reps, 1)


def reparameterize(mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    return mu + torch.exp(0.5 * logvar) * eps


# ---------------------------------------------------------------------------
# learned layers


def wn_conv(c_in, c_out, kernel, stride=1, dilation=1, padding=0) -> nn.Module:
    return weight_norm(nn.Conv1d(c_in, c_out, kernel, stride=stride, dilation=dilation, padding=padding))


def wn_conv_transpose(c_in, c_out, stride) -> nn.Module:
    padding = (stride + 1) // 2
    out_pad = 2 * padding - stride
    return weight_norm(nn.ConvTranspose1d(c_in, c_out, 2 * stride, stride=stride,
                                          padding=padding, output_padding=out_pad))


class Snake(nn.Module):
    def __init__(self, channels: int, alpha_init: float = 1.0):
        super().__init__()
        # stored in log space so the learned alpha stays positive
        self.log_alpha = nn.Parameter(torch.full((channels,), math.log(alpha_init)))

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()

    def forward(self, h):
        return snake(h, self.alpha)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, kernel: int = 7, dilation: int = 1, alpha_init: float = 1.0):
        super().__init__()
        if dilation < 1:
            raise ValueError("dilation must be >= 1")
        pad = dilation * (kernel - 1) // 2
        self.act1 = Snake(channels, alpha_init)
        self.conv = wn_conv(channels, channels, kernel, dilation=dilation, padding=pad)
        self.act2 = Snake(channels, alpha_init)
        self.proj = wn_conv(channels, channels, 1)

    def forward(self, h):
        y = self.proj(self.act2(self.conv(self.act1(h))))
        if y.shape != h.shape:
            raise ShapeError(f"residual branch produced {tuple(y.shape)} for input {tuple(h.shape)}")
        return h + y


def residual_stack(channels, kernel, dilations, alpha_init):
    return nn.Sequential(*(ResidualUnit(channels, kernel, d, alpha_init) for d in dilations))


class EncoderBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, cfg: VaeConfig):
        super().__init__()
        self.stride, self.c_out = stride, c_out
        self.res = residual_stack(c_in, cfg.kernel, cfg.dilations, cfg.snake_alpha_init)
        self.act = Snake(c_in, cfg.snake_alpha_init)
        self.down = wn_conv(c_in, c_out, 2 * stride, stride=stride, padding=(stride + 1) // 2)

    def forward(self, h):
        return self.down(self.act(self.res(h))) + shortcut_down(h, self.stride, self.c_out)


class DecoderBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, cfg: VaeConfig):
        super().__init__()
        self.stride, self.c_out = stride, c_out
        self.act = Snake(c_in, cfg.snake_alpha_init)
        self.up = wn_conv_transpose(c_in, c_out, stride)
        self.res = residual_stack(c_out, cfg.kernel, cfg.dilations, cfg.snake_alpha_init)

    def forward(self, h):
        return self.res(self.up(self.act(h))) + shortcut_up(h, self.stride, self.c_out)


@dataclass
class LatentPacket:
    mu: torch.Tensor
    logvar: torch.Tensor
    z: torch.Tensor
    eps: torch.Tensor | None = field(default=None, repr=False)


class Encoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.inp = wn_conv(1, ch[0], cfg.kernel, padding=cfg.kernel // 2)
        self.blocks = nn.ModuleList(
            EncoderBlock(a, b, s, cfg) for a, b, s in zip(ch, ch[1:], cfg.strides))
        self.act = Snake(ch[-1], cfg.snake_alpha_init)
        self.proj = wn_conv(ch[-1], cfg.latent_dim, 3, padding=1)
        self.bottleneck = wn_conv(cfg.latent_dim, 2 * cfg.latent_dim, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pre-bottleneck features ``[B, D, T/R]`` for an input ``[B, 1, T]``."""
        h = self.inp(x) + shortcut_up(x, 1, self.cfg.channels[0])
        for block in self.blocks:
            h = block(h)
        return self.proj(self.act(h)) + shortcut_down(h, 1, self.cfg.latent_dim)

    def forward(self, x):
        mu, logvar = self.bottleneck(self.features(x)).chunk(2, dim=1)
        return mu, logvar


class Decoder(nn.Module):
    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels[::-1]
        strides = cfg.strides[::-1]
        self.inp = wn_conv(cfg.latent_dim, ch[0], cfg.kernel, padding=cfg.kernel // 2)
        self.blocks = nn.ModuleList(DecoderBlock(a, b, s, cfg) for a, b, s in zip(ch, ch[1:], strides))
        self.act = Snake(ch[-1], cfg.snake_alpha_init)
        self.out = wn_conv(ch[-1], 1, cfg.kernel, padding=cfg.kernel // 2)

    def pre_activation(self, z: torch.Tensor) -> torch.Tensor:
        h = self.inp(z) + shortcut_up(z, 1, self.cfg.channels[-1])
        for block in self.blocks:
            h = block(h)
        return self.out(self.act(h)) + shortcut_down(h, 1, 1)

    def forward(self, z):
        return torch.tanh(self.pre_activation(z))


class WavVAE(nn.Module):
    def __init__(self, cfg: VaeConfig | None = None):
        super().__init__()
        self.cfg = cfg or VaeConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    @property
    def hop(self) -> int:
        return self.cfg.hop

    def pad(self, x: torch.Tensor) -> torch.Tensor:
        """Pad the time axis up to a multiple of the hop (reflection when possible)."""
        extra = (-x.shape[-1]) % self.hop
        if extra == 0:
            return x
        mode = "reflect" if extra < x.shape[-1] else "constant"
        return F.pad(x, (0, extra), mode=mode)

    def encode(self, x: torch.Tensor, generator: torch.Generator | None = None,
               sample: bool = True) -> LatentPacket:
        """``x``: ``[B, T]`` or ``[B, 1, T]`` waveform batch."""
        if x.dim() == 2:
            x = x[:, None, :]
        mu, logvar = self.encoder(self.pad(x))
        if not sample:
            return LatentPacket(mu, logvar, mu)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return LatentPacket(mu, logvar, reparameterize(mu, logvar, eps), eps)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, D, F] -> [B, F * R]`` waveform."""
        if not torch.isfinite(z).all():
            raise ValueError("latent contains non-finite values")
        return self.decoder(z)[:, 0, :]

    def forward(self, x, generator=None):
        packet = self.encode(x, generator)
        return self.decode(packet.z), packet


def zero_learnable_(module: nn.Module) -> nn.Module:
    """Zero every conv weight (weight-norm gain) and bias; snake alphas are kept."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Conv2d)):
                if hasattr(m, "parametrizations"):
                    m.parametrizations.weight.original0.zero_()
                else:
                    m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
    return module


# ---------------------------------------------------------------------------
# discriminator and losses


@dataclass
class DiscOutput:
    logits: list[torch.Tensor]
    features: list[list[torch.Tensor]]


class StftDiscriminator(nn.Module):
    """2-D conv stack over the stacked real/imag spectrogram at one resolution."""

    def __init__(self, fft_size: int, channels: int = 16, n_layers: int = 4):
        super().__init__()
        self.cfg = StftConfig(fft_size, fft_size // 4, fft_size)
        layers = [weight_norm(nn.Conv2d(2, channels, (3, 9), padding=(1, 4)))]
        for _ in range(n_layers - 1):
            layers.append(weight_norm(nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4))))
        self.layers = nn.ModuleList(layers)
        self.out = weight_norm(nn.Conv2d(channels, 1, (3, 3), padding=(1, 1)))

    def forward(self, x: torch.Tensor):
        spec = spectral.stft(x, self.cfg).bins  # [B, F, frames]
        h = torch.stack([spec.real, spec.imag], dim=1).transpose(2, 3)  # [B, 2, frames, F]
        feats = []
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
            feats.append(h)
        return self.out(h), feats


class MultiScaleStftDiscriminator(nn.Module):
    def __init__(self, ffts=(512, 1024, 2048), channels: int = 16):
        super().__init__()
        self.scales = nn.ModuleList(StftDiscriminator(n, channels) for n in ffts)

    def forward(self, x: torch.Tensor) -> DiscOutput:
        if x.dim() == 3:
            x = x[:, 0, :]
        logits, feats = [], []
        for d in self.scales:
            lg, ft = d(x)
            logits.append(lg)
            feats.append(ft)
        return DiscOutput(logits, feats)


@dataclass
class LossWeights:
    spec: float = 1.0
    mel: float = 1.0
    time: float = 10.0
    kl: float = 0.01
    adv: float = 1.0
    fm: float = 2.0

    def as_dict(self):
        return {"spec": self.spec, "mel": self.mel, "time": self.time,
                "kl": self.kl, "adv": self.adv, "fm": self.fm}


RECON_TERMS = ("spec", "mel", "time")


def adversarial_loss(fake: DiscOutput) -> torch.Tensor:
    return sum(torch.mean(F.relu(1.0 - lg)) for lg in fake.logits) / len(fake.logits)


def feature_matching_loss(real: DiscOutput, fake: DiscOutput) -> torch.Tensor:
    total, count = 0.0, 0
    for fr, ff in zip(real.features, fake.features):
        for a, b in zip(fr, ff):
            total = total + torch.mean(torch.abs(a.detach() - b))
            count += 1
    return total / count


def generator_loss(x, x_hat, packet: LatentPacket, disc: tuple[DiscOutput, DiscOutput] | None,
                   weights: LossWeights | None = None, phase: str = "warmup",
                   stft_cfgs=spectral.DEFAULT_STFT_CONFIGS, mel_scales=spectral.DEFAULT_MEL_SCALES,
                   sample_rate: int = 24000, log_eps: float = spectral.LOG_EPS):
    """Weighted generator objective; returns ``(total, {term: unweighted value})``.

    In the ``warmup`` phase the adversarial and feature-matching terms are
    reported as exact zeros and never touch the discriminator.
    """
    if phase not in ("warmup", "adversarial"):
        raise ValueError(f"unknown phase {phase!r}")
    weights = weights or LossWeights()
    x, x_hat = spectral._pair(x, x_hat)
    terms = {
        "spec": spectral.multires_stft_loss(x, x_hat, stft_cfgs, log_eps),
        "mel": spectral.multiscale_mel_loss(x, x_hat, mel_scales, sample_rate, log_eps),
        "time": spectral.l1_time_loss(x, x_hat),
        "kl": spectral.kl_loss(packet.mu, packet.logvar),
    }
    zero = torch.zeros((), dtype=x_hat.dtype)
    if phase == "adversarial":
        if disc is None:
            raise ValueError("adversarial phase needs discriminator outputs")
        real, fake = disc
        terms["adv"] = adversarial_loss(fake)
        terms["fm"] = feature_matching_loss(real, fake)
    else:
        terms["adv"] = zero
        terms["fm"] = zero
    w = weights.as_dict()
    total = sum(w[k] * v for k, v in terms.items())
    return total, terms


def discriminator_loss(disc_real: DiscOutput, disc_fake: DiscOutput) -> torch.Tensor:
    if len(disc_real.logits) != len(disc_fake.logits):
        raise ShapeError("real and fake discriminator outputs have different scale counts")
    total = 0.0
    for lr, lf in zip(disc_real.logits, disc_fake.logits):
        total = total + torch.mean(F.relu(1.0 - lr)) + torch.mean(F.relu(1.0 + lf))
    return total / len(disc_real.logits)
