"""Desk-scale evaluation: VAE reconstruction metrics and TTS token accuracy.

Reports are plain JSON with per-utterance entries and aggregates that are
the arithmetic mean of those entries. Wall-clock figures go to a separate
sidecar file so the report itself is reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from . import signalio, spectral
from .sampler import DitVelocity, InferenceRequest, SamplerConfig, estimate_duration, euler_solve
from .spectral import DEFAULT_STFT_CONFIGS, StftConfig

SI_SDR_CAP = 100.0
LOG_EPS = 1e-5
BAND = (0.95 * signalio.PHONE_FREQS[0], 1.05 * signalio.PHONE_FREQS[-1])


# ---------------------------------------------------------------------------
# metrics


def log_spectral_distance(x, x_hat, cfgs=DEFAULT_STFT_CONFIGS) -> float:
    """Mean over resolutions of the frame-averaged RMS log-magnitude difference."""
    x, x_hat = spectral._pair(torch.as_tensor(np.asarray(x), dtype=torch.float64),
                              torch.as_tensor(np.asarray(x_hat), dtype=torch.float64))
    vals = []
    for cfg in cfgs:
        d = torch.log(spectral.magnitude(x, cfg) + LOG_EPS) - torch.log(spectral.magnitude(x_hat, cfg) + LOG_EPS)
        vals.append(float(torch.sqrt((d ** 2).mean(dim=-2)).mean()))
    return float(np.mean(vals))


def si_sdr(ref, est, cap: float = SI_SDR_CAP) -> float:
    """Scale-invariant SDR in dB, capped at ``cap`` (a perfect estimate reports ``cap``)."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"length mismatch {ref.shape} vs {est.shape}")
    energy = float(ref @ ref)
    if energy == 0.0:
        raise ValueError("reference signal is silent")
    target = (float(est @ ref) / energy) * ref
    noise = est - target
    num, den = float(target @ target), float(noise @ noise)
    if den == 0.0:
        return cap
    if num == 0.0:
        return -cap
    return float(min(cap, max(-cap, 10.0 * math.log10(num / den))))


def dominant_frequency(seg: np.ndarray, sample_rate: int, band=BAND) -> float:
    """Frequency of the largest Hann-windowed FFT bin inside ``band``."""
    seg = np.asarray(seg, dtype=np.float64)
    n = len(seg)
    spec = np.abs(np.fft.rfft(seg * np.hanning(n)))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    if not sel.any():
        raise ValueError("segment too short to resolve the phone band")
    return float(freqs[sel][np.argmax(spec[sel])])


def nearest_token(freq: float) -> int:
    return int(np.argmin(np.abs(np.log(signalio.PHONE_FREQS / freq))))


def token_hits(wave: np.ndarray, tokens, sample_rate: int) -> list[int]:
    """Per-token 0/1 hits: equal-share segments scored by their FFT peak."""
    hits = []
    for (a, b), tok in zip(signalio.phone_boundaries(len(wave), len(tokens)), tokens):
        hits.append(int(nearest_token(dominant_frequency(wave[a:b], sample_rate)) == int(tok)))
    return hits


def mel_distance(x, ref, sample_rate: int, n_mels: int = 80, fft: int = 1024) -> float:
    """Mean |log-mel| difference after stretching ``ref`` frames onto ``x`` frames."""
    cfg = StftConfig(fft, fft // 4, fft)
    a = spectral.log_mel(torch.as_tensor(np.asarray(x), dtype=torch.float64), cfg, n_mels, sample_rate)
    b = spectral.log_mel(torch.as_tensor(np.asarray(ref), dtype=torch.float64), cfg, n_mels, sample_rate)
    from .flowmatch import resample_nearest
    b = resample_nearest(b, a.shape[-1])
    return float(torch.mean(torch.abs(a - b)))


def aggregate(entries: list[dict], keys) -> dict:
    return {k: float(np.mean([e[k] for e in entries])) for k in keys}


# ---------------------------------------------------------------------------
# report builders


@torch.no_grad()
def evaluate_vae(vae, items, sample_rate: int) -> dict:
    entries = []
    for i, it in enumerate(items):
        x = torch.tensor(it.waveform.samples, dtype=torch.float32)[None]
        y = vae.decode(vae.encode(x, sample=False).mu)[0, :x.shape[1]].double().numpy()
        ref = it.waveform.samples
        entries.append({"index": i, "lsd": log_spectral_distance(ref, y), "si_sdr": si_sdr(ref, y),
                        "token_accuracy": float(np.mean(token_hits(y, it.tokens, sample_rate)))})
    return {"per_utterance": entries,
            "aggregate": aggregate(entries, ("lsd", "si_sdr", "token_accuracy"))}


@torch.no_grad()
def synthesize(vae, tts, prompt_wave: np.ndarray, prompt_tokens, target_tokens,
               sampler: SamplerConfig, seed: int, total_frames: int | None = None) -> np.ndarray:
    """Zero-shot continuation: encode the prompt, sample the target region, decode it."""
    x = torch.tensor(prompt_wave, dtype=torch.float32)[None]
    ctx = vae.encode(x, sample=False).mu[0] * tts.latent_scale
    q = tts.cond(torch.tensor([list(prompt_tokens) + list(target_tokens)]))[0]
    n_ctx = ctx.shape[-1]
    total = estimate_duration(n_ctx, len(prompt_tokens), len(target_tokens), total_frames)
    req = InferenceRequest(ctx, q, total, seed)
    z_gen = euler_solve(DitVelocity(tts.dit), req, sampler)
    return vae.decode((z_gen / tts.latent_scale)[None])[0].double().numpy()


def evaluate_tts(vae, tts, items, sampler: SamplerConfig, n_pairs: int, seed: int,
                 sample_rate: int) -> dict:
    """Prompt with test item ``i`` and synthesize the text of item ``i + 1``."""
    entries = []
    n = len(items)
    for i in range(min(n_pairs, n)):
        prompt, target = items[i], items[(i + 1) % n]
        wave = synthesize(vae, tts, prompt.waveform.samples, prompt.tokens, target.tokens,
                          sampler, seed + i)
        hits = token_hits(wave, target.tokens, sample_rate)
        entries.append({"index": i, "target_tokens": list(target.tokens), "hits": hits,
                        "token_accuracy": float(np.mean(hits)),
                        "mel_distance": mel_distance(wave, target.waveform.samples, sample_rate)})
    return {"per_utterance": entries,
            "aggregate": aggregate(entries, ("token_accuracy", "mel_distance")),
            "chance_level": 1.0 / signalio.VOCAB_SIZE}


def write_report(report: dict, path: str | Path, runtime: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if runtime is not None:
        side = path.with_name(path.stem + ".runtime.json")
        side.write_text(json.dumps(runtime, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path
