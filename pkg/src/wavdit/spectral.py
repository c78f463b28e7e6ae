"""STFT, mel filterbank and the reconstruction losses of the VAE generator.

Everything here is written against torch tensors of shape ``[..., T]`` so the
losses are differentiable; numpy arrays and :class:`Waveform` objects are
accepted and converted.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .signalio import Waveform

LOG_EPS = 1e-5
_MAG_FLOOR = 1e-14


class SpectralError(Exception):
    pass


class SignalTooShort(SpectralError):
    pass


class NonColaWindow(SpectralError):
    pass


class InvalidRange(SpectralError):
    pass


class LengthMismatch(SpectralError):
    pass


class NonFinite(SpectralError):
    pass


@dataclass(frozen=True)
class StftConfig:
    fft_size: int
    hop: int
    win: int

    def __post_init__(self):
        if not (0 < self.hop <= self.win <= self.fft_size):
            raise ValueError(f"need 0 < hop <= win <= fft_size, got {self}")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def is_cola(self) -> bool:
        return _is_cola(self.win, self.hop)


DEFAULT_STFT_CONFIGS = tuple(StftConfig(n, n // 4, n) for n in (512, 1024, 2048))
DEFAULT_MEL_SCALES = tuple(zip(DEFAULT_STFT_CONFIGS, (40, 80, 160)))


@dataclass
class Spectrogram:
    bins: torch.Tensor  # complex, [..., n_bins, frames]
    config: StftConfig
    length: int


def as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, Waveform):
        x = x.samples
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(x)
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    if dtype is not None:
        x = x.to(dtype)
    elif not torch.is_floating_point(x):
        x = x.to(torch.get_default_dtype())
    return x


def hann(win: int, dtype=torch.float64) -> torch.Tensor:
    return torch.hann_window(win, periodic=True, dtype=dtype)


@lru_cache(maxsize=None)
def _is_cola(win: int, hop: int) -> bool:
    # constant overlap-add of the analysis window itself
    w = hann(win).numpy()
    acc = np.zeros(win + hop * (win // hop + 2))
    for start in range(0, len(acc) - win + 1, hop):
        acc[start:start + win] += w
    interior = acc[win:len(acc) - win]
    return interior.size > 0 and np.ptp(interior) < 1e-9 * interior.max()


def _window(cfg: StftConfig, x: torch.Tensor) -> torch.Tensor:
    return hann(cfg.win, dtype=x.dtype)


def stft(x, cfg: StftConfig) -> Spectrogram:
    """Centered (reflect-padded) Hann-windowed STFT over the last axis."""
    x = as_tensor(x)
    n = x.shape[-1]
    if n < cfg.win or n <= cfg.fft_size // 2:
        raise SignalTooShort(f"signal of {n} samples is shorter than the {cfg.fft_size}-point window")
    lead = x.shape[:-1]
    flat = x.reshape(-1, n)
    spec = torch.stft(flat, n_fft=cfg.fft_size, hop_length=cfg.hop, win_length=cfg.win,
                      window=_window(cfg, flat), center=True, pad_mode="reflect",
                      return_complex=True)
    return Spectrogram(spec.reshape(*lead, *spec.shape[-2:]), cfg, n)


def istft(s: Spectrogram) -> torch.Tensor:
    """Overlap-add inverse with window-square normalization."""
    cfg = s.config
    if not cfg.is_cola():
        raise NonColaWindow(f"Hann window of {cfg.win} is not COLA at hop {cfg.hop}")
    lead = s.bins.shape[:-2]
    flat = s.bins.reshape(-1, *s.bins.shape[-2:])
    win = hann(cfg.win, dtype=flat.real.dtype)
    out = torch.istft(flat, n_fft=cfg.fft_size, hop_length=cfg.hop, win_length=cfg.win,
                      window=win, center=True, length=s.length)
    return out.reshape(*lead, s.length)


def magnitude(x, cfg: StftConfig) -> torch.Tensor:
    z = stft(x, cfg).bins
    power = z.real ** 2 + z.imag ** 2
    return torch.sqrt(power.clamp_min(_MAG_FLOOR))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, sample_rate: float, fft_size: int,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """Triangular HTK-mel filters, shape ``[n_mels, fft_size // 2 + 1]``.

    A filter narrower than the bin spacing would otherwise be empty; it is
    collapsed onto the bin nearest its centre.
    """
    if f_max is None:
        f_max = sample_rate / 2.0
    if not (0.0 <= f_min < f_max <= sample_rate / 2.0):
        raise InvalidRange(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got ({f_min}, {f_max})")
    if n_mels < 1:
        raise InvalidRange("n_mels must be positive")
    n_bins = fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    fb = np.zeros((n_mels, n_bins))
    for i in range(n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
        if not fb[i].any():
            fb[i, int(np.argmin(np.abs(bin_hz - mid)))] = 1.0
    return fb


@lru_cache(maxsize=32)
def _cached_filterbank(n_mels, sample_rate, fft_size):
    return torch.from_numpy(mel_filterbank(n_mels, sample_rate, fft_size))


def log_mel(x, cfg: StftConfig, n_mels: int, sample_rate: float = 24000,
            eps: float = LOG_EPS) -> torch.Tensor:
    """``log(mel @ |S| + eps)``, shape ``[..., n_mels, frames]``."""
    mag = magnitude(x, cfg)
    fb = _cached_filterbank(n_mels, float(sample_rate), cfg.fft_size).to(mag.dtype)
    return torch.log(torch.matmul(fb, mag) + eps)


def _pair(x, x_hat):
    x = as_tensor(x)
    x_hat = as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise LengthMismatch(f"shape {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if x_hat.dtype != x.dtype:
        x = x.to(x_hat.dtype)
    return x, x_hat


def spectral_convergence(mag: torch.Tensor, mag_hat: torch.Tensor) -> torch.Tensor:
    return torch.linalg.vector_norm(mag - mag_hat) / torch.linalg.vector_norm(mag)


def multires_stft_loss(x, x_hat, cfgs=DEFAULT_STFT_CONFIGS, eps: float = LOG_EPS) -> torch.Tensor:
    """Mean over resolutions of spectral convergence + log-magnitude L1."""
    x, x_hat = _pair(x, x_hat)
    total = 0.0
    for cfg in cfgs:
        mag, mag_hat = magnitude(x, cfg), magnitude(x_hat, cfg)
        sc = spectral_convergence(mag, mag_hat)
        log_l1 = torch.mean(torch.abs(torch.log(mag + eps) - torch.log(mag_hat + eps)))
        total = total + sc + log_l1
    return total / len(cfgs)


def multiscale_mel_loss(x, x_hat, scales=DEFAULT_MEL_SCALES, sample_rate: float = 24000,
                        eps: float = LOG_EPS) -> torch.Tensor:
    x, x_hat = _pair(x, x_hat)
    total = 0.0
    for cfg, n_mels in scales:
        diff = log_mel(x, cfg, n_mels, sample_rate, eps) - log_mel(x_hat, cfg, n_mels, sample_rate, eps)
        total = total + torch.mean(torch.abs(diff))
    return total / len(scales)


def l1_time_loss(x, x_hat) -> torch.Tensor:
    x, x_hat = _pair(x, x_hat)
    return torch.mean(torch.abs(x - x_hat))


def kl_loss(mu, logvar) -> torch.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)), averaged over elements."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise LengthMismatch(f"shape {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    if not (torch.isfinite(mu).all() and torch.isfinite(logvar).all()):
        raise NonFinite("kl_loss received non-finite statistics")
    return torch.mean(-0.5 * (1.0 + logvar - mu ** 2 - torch.exp(logvar)))
