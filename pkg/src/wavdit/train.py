"""Training loops: the two-stage waveform VAE and the flow-matching TTS model.

Both loops are deterministic for a fixed config, seed and thread count.
Randomness comes from one numpy Generator (batch composition, masks,
timesteps, dropout coins) and one torch Generator (reparameterization and
flow noise); both are saved in every checkpoint so a resumed run continues
bit-identically.
"""

from __future__ import annotations

import base64
import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import flowmatch, signalio, spectral
from .checkpoint import load_checkpoint, load_module, module_tensors, save_checkpoint
from .config import RunConfig
from .dit import DiT, DitConfig
from .optim import AdamW, clip_grad_norm, lr_schedule
from .spectral import StftConfig
from .textcond import TextConditioner, pad_tokens
from .wavvae import (LossWeights, MultiScaleStftDiscriminator, VaeConfig, WavVAE,
                     discriminator_loss, generator_loss)

TEST_SEED_OFFSET = 100_003


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# data


def load_corpora(cfg: RunConfig) -> tuple[list, list]:
    """``(train, test)`` corpus items as configured in ``[data]``."""
    d = cfg.data
    if d.source == "manifest":
        return signalio.read_corpus(d.train_manifest), signalio.read_corpus(d.test_manifest)
    train = signalio.synth_corpus(d.n_train, cfg.seed, d.sample_rate)
    test = signalio.synth_corpus(d.n_test, cfg.seed + TEST_SEED_OFFSET, d.sample_rate)
    return train, test


def vae_clips(items, seconds: float) -> np.ndarray:
    clips = [c.samples for it in items for c in signalio.segment(it.waveform, seconds)]
    if not clips:
        raise ValueError("no corpus item is long enough for one VAE clip")
    return np.stack(clips).astype(np.float32)


def vae_config(cfg: RunConfig) -> VaeConfig:
    v = cfg.vae
    return VaeConfig(strides=tuple(v.strides), channels=tuple(v.channels), latent_dim=v.latent_dim,
                     kernel=v.kernel, dilations=tuple(v.dilations), snake_alpha_init=v.snake_alpha_init,
                     sample_rate=cfg.data.sample_rate, disc_ffts=tuple(v.disc_ffts),
                     disc_channels=v.disc_channels)


def loss_weights(cfg: RunConfig) -> LossWeights:
    v = cfg.vae
    return LossWeights(v.lambda_spec, v.lambda_mel, v.lambda_time, v.lambda_kl, v.lambda_adv, v.lambda_fm)


def loss_resolutions(cfg: RunConfig):
    stft_cfgs = tuple(StftConfig(n, n // 4, n) for n in cfg.vae.stft_ffts)
    mel_scales = tuple((StftConfig(n, n // 4, n), m) for n, m in zip(cfg.vae.stft_ffts, cfg.vae.mel_bins))
    return stft_cfgs, mel_scales


# ---------------------------------------------------------------------------
# shared plumbing


class CurveWriter:
    """Appends ``step,term,value`` rows; values use ``repr`` so reruns are byte-identical."""

    def __init__(self, path: Path, append: bool = False):
        self.path = path
        new = not (append and path.exists())
        self.fh = open(path, "a" if not new else "w", newline="", encoding="utf-8")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.writer.writerow(["step", "term", "value"])

    def log(self, step: int, terms: dict) -> None:
        for name in sorted(terms):
            self.writer.writerow([step, name, repr(float(terms[name]))])

    def close(self):
        self.fh.close()


def read_curves(path: str | Path) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["term"], []).append((int(row["step"]), float(row["value"])))
    return out


def _rng_state(rng: np.random.Generator, gen: torch.Generator) -> dict:
    return {"numpy": rng.bit_generator.state,
            "torch": base64.b64encode(gen.get_state().numpy().tobytes()).decode("ascii")}


def _restore_rng(meta: dict, rng: np.random.Generator, gen: torch.Generator) -> None:
    rng.bit_generator.state = meta["numpy"]
    raw = np.frombuffer(base64.b64decode(meta["torch"]), dtype=np.uint8).copy()
    gen.set_state(torch.from_numpy(raw))


def _diverged(out_dir: Path, step: int, reason: str, terms: dict | None = None) -> TrainingDiverged:
    """Write ``diverged.json`` and return the exception to raise."""
    dump = {"step": step, "reason": reason, "terms": {k: float(v) for k, v in (terms or {}).items()}}
    (out_dir / "diverged.json").write_text(json.dumps(dump, indent=1, sort_keys=True) + "\n")
    return TrainingDiverged(f"step {step}: {reason}")


def _check_finite(terms: dict, step: int, out_dir: Path) -> None:
    bad = sorted(k for k, v in terms.items() if not math.isfinite(float(v)))
    if bad:
        raise _diverged(out_dir, step, f"non-finite loss terms {bad}", terms)


def _named(module: torch.nn.Module) -> dict:
    return {n: p for n, p in module.named_parameters()}


# ---------------------------------------------------------------------------
# VAE


@dataclass
class VaeRun:
    vae: WavVAE
    disc: MultiScaleStftDiscriminator
    step: int
    checkpoint: Path
    curves: Path


def build_vae(cfg: RunConfig) -> tuple[WavVAE, MultiScaleStftDiscriminator]:
    torch.manual_seed(cfg.seed)
    vcfg = vae_config(cfg)
    vae = WavVAE(vcfg)
    disc = MultiScaleStftDiscriminator(vcfg.disc_ffts, vcfg.disc_channels)
    return vae, disc


def load_vae(path: str | Path) -> tuple[WavVAE, dict]:
    """Rebuild the autoencoder stored in a VAE checkpoint (discriminator ignored)."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ValueError(f"{path} is not a VAE checkpoint")
    vae = WavVAE(VaeConfig(**meta["vae_config"]))
    load_module("vae", vae, tensors)
    vae.eval()
    return vae, meta


def _vae_config_dict(vcfg: VaeConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in vcfg.__dict__.items()}


def train_vae(cfg: RunConfig, out_dir: str | Path, resume: str | Path | None = None,
              progress=None) -> VaeRun:
    """Warmup on reconstruction terms, then alternate discriminator/generator steps.

    Writes ``curves.csv`` and a checkpoint directory ``checkpoint/`` into
    ``out_dir``. ``resume`` continues from an earlier checkpoint of the same
    recipe up to ``cfg.vae.steps``.
    """
    v = cfg.vae
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_items, _ = load_corpora(cfg)
    clips = torch.from_numpy(vae_clips(train_items, cfg.data.vae_clip_seconds))

    vae, disc = build_vae(cfg)
    weights = loss_weights(cfg)
    stft_cfgs, mel_scales = loss_resolutions(cfg)
    g_params, d_params = _named(vae), _named(disc)
    g_opt = AdamW(g_params, v.beta1, v.beta2, v.weight_decay)
    d_opt = AdamW(d_params, v.beta1, v.beta2, v.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    step = 0
    if resume is not None:
        tensors, meta = load_checkpoint(resume)
        load_module("vae", vae, tensors)
        load_module("disc", disc, tensors)
        g_opt.load_state_tensors("opt_g", tensors, meta["opt_steps"]["g"])
        d_opt.load_state_tensors("opt_d", tensors, meta["opt_steps"]["d"])
        _restore_rng(meta["rng"], rng, gen)
        step = meta["step"]
    curves = CurveWriter(out_dir / "curves.csv", append=resume is not None)

    try:
        while step < v.steps:
            step += 1
            idx = rng.integers(0, clips.shape[0], size=v.batch_size)
            x = clips[idx]
            adversarial = step > v.warmup_steps
            try:
                packet = vae.encode(x, generator=gen)
                x_hat = vae.decode(packet.z)
            except ValueError as exc:  # exploded parameters fail the layers' own checks
                raise _diverged(out_dir, step, str(exc)) from exc
            terms_d = {}
            if adversarial:
                d_loss = discriminator_loss(disc(x), disc(x_hat.detach()))
                d_grads = dict(zip(d_params, torch.autograd.grad(d_loss, list(d_params.values()))))
                clip_grad_norm(d_grads, v.max_grad_norm)
                if not d_opt.step(d_grads, v.lr):
                    raise _diverged(out_dir, step, "non-finite discriminator gradient")
                terms_d["disc"] = d_loss.detach()
                total, terms = generator_loss(x, x_hat, packet, (disc(x), disc(x_hat)), weights,
                                              "adversarial", stft_cfgs, mel_scales,
                                              cfg.data.sample_rate, v.log_eps)
            else:
                total, terms = generator_loss(x, x_hat, packet, None, weights, "warmup",
                                              stft_cfgs, mel_scales, cfg.data.sample_rate, v.log_eps)
                terms_d["disc"] = 0.0
            record = {k: t.detach() for k, t in terms.items()}
            record["recon"] = sum(getattr(weights, k) * record[k] for k in ("spec", "mel", "time"))
            record["total"] = total.detach()
            record.update(terms_d)
            _check_finite(record, step, out_dir)
            g_grads = dict(zip(g_params, torch.autograd.grad(total, list(g_params.values()))))
            clip_grad_norm(g_grads, v.max_grad_norm)
            if not g_opt.step(g_grads, v.lr):
                raise _diverged(out_dir, step, "non-finite generator gradient", record)
            curves.log(step, record)
            if progress is not None:
                progress(step, record)
    finally:
        curves.close()

    tensors = {**module_tensors("vae", vae), **module_tensors("disc", disc),
               **g_opt.state_tensors("opt_g"), **d_opt.state_tensors("opt_d")}
    meta = {"kind": "vae", "step": step, "config_digest": cfg.digest(),
            "vae_config": _vae_config_dict(vae.cfg),
            "opt_steps": {"g": g_opt.state["step"], "d": d_opt.state["step"]},
            "rng": _rng_state(rng, gen)}
    ckpt = save_checkpoint(out_dir / "checkpoint", tensors, meta)
    return VaeRun(vae, disc, step, ckpt, out_dir / "curves.csv")


# ---------------------------------------------------------------------------
# TTS


def dit_config(cfg: RunConfig, latent_dim: int) -> DitConfig:
    t = cfg.tts
    return DitConfig(layers=t.layers, width=t.width, heads=t.heads, repa_layer=t.repa_layer,
                     latent_dim=latent_dim, text_dim=t.width, mlp_ratio=t.mlp_ratio)


@dataclass
class TtsModel:
    dit: DiT
    cond: TextConditioner
    repa_proj: torch.nn.Linear
    latent_scale: float

    def modules(self) -> dict:
        return {"dit": self.dit, "cond": self.cond, "repa_proj": self.repa_proj}

    def named_parameters(self) -> dict:
        return {f"{p}.{n}": t for p, m in self.modules().items() for n, t in m.named_parameters()}


def build_tts(cfg: RunConfig, latent_dim: int, latent_scale: float = 1.0) -> TtsModel:
    torch.manual_seed(cfg.seed + 1)
    t = cfg.tts
    dit = DiT(dit_config(cfg, latent_dim))
    cond = TextConditioner(signalio.VOCAB_SIZE, t.width, t.refine_blocks, t.encoder_layers, t.encoder_heads)
    proj = torch.nn.Linear(t.width, t.repa_mels)
    return TtsModel(dit, cond, proj, latent_scale)


def load_tts(path: str | Path, cfg: RunConfig | None = None) -> tuple[TtsModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "tts":
        raise ValueError(f"{path} is not a TTS checkpoint")
    from .config import from_dict
    run_cfg = cfg or from_dict(meta["config"])
    model = build_tts(run_cfg, meta["latent_dim"], meta["latent_scale"])
    for prefix, module in model.modules().items():
        load_module(prefix, module, tensors)
        module.eval()
    return model, meta


def repa_features(wave: np.ndarray, hop: int, n_mels: int, sample_rate: int) -> torch.Tensor:
    """Log-mel frames ``[n_mels, frames]`` at the latent hop (the REPA target stand-in)."""
    fft = max(hop, 256)
    x = torch.from_numpy(np.asarray(wave, dtype=np.float64))
    return spectral.log_mel(x, StftConfig(fft, hop, fft), n_mels, sample_rate).float()


@torch.no_grad()
def encode_items(vae: WavVAE, items, use_mu: bool = True, generator=None) -> list[torch.Tensor]:
    """Per-item latents ``[D, frames]`` (bottleneck mean by default)."""
    out = []
    for it in items:
        x = torch.tensor(it.waveform.samples, dtype=torch.float32)[None]
        pk = vae.encode(x, generator=generator, sample=not use_mu)
        out.append(pk.z[0])
    return out


@dataclass
class TtsBatch:
    z1: torch.Tensor       # [B, D, T]
    z0: torch.Tensor       # [B, D, T]
    t: torch.Tensor        # [B]
    mask: torch.Tensor     # [B, T], 1 = visible context (padding counts as visible)
    valid: torch.Tensor    # [B, T]
    keep: torch.Tensor     # [B] bool, False = conditions dropped
    tokens: torch.Tensor   # [B, L]
    token_mask: torch.Tensor
    repa: torch.Tensor     # [B, n_mels, T]


def make_tts_batch(latents, token_seqs, feats, idx, rng: np.random.Generator,
                   gen: torch.Generator, cfg: RunConfig) -> TtsBatch:
    t_cfg = cfg.tts
    lengths = [latents[i].shape[-1] for i in idx]
    n = max(lengths)
    d = latents[idx[0]].shape[0]
    b = len(idx)
    z1 = torch.zeros(b, d, n)
    repa = torch.zeros(b, feats[idx[0]].shape[0], n)
    mask = torch.ones(b, n)
    valid = torch.zeros(b, n)
    keep = torch.ones(b, dtype=torch.bool)
    for j, (i, length) in enumerate(zip(idx, lengths)):
        z1[j, :, :length] = latents[i]
        repa[j, :, :length] = flowmatch.resample_nearest(feats[i], length)
        mask[j, :length] = torch.from_numpy(
            flowmatch.make_span_mask(length, rng, ratio_range=(t_cfg.mask_min, t_cfg.mask_max)))
        valid[j, :length] = 1.0
        keep[j] = not flowmatch.cond_dropout(rng, t_cfg.drop_prob)
    t = torch.from_numpy(rng.uniform(0.0, 1.0, size=b).astype(np.float32))
    z0 = torch.randn(z1.shape, generator=gen)
    tokens, token_mask = pad_tokens([token_seqs[i] for i in idx])
    return TtsBatch(z1, z0, t, mask, valid, keep, tokens, token_mask, repa)


def tts_loss(model: TtsModel, batch: TtsBatch, lambda_repa: float):
    """``(total, cfm, repa)`` for one prepared batch."""
    z_t = flowmatch.interpolate(batch.z0, batch.z1, batch.t)
    z_ctx = flowmatch.make_context(batch.z1, batch.mask)
    q = model.cond(batch.tokens, batch.token_mask)
    out = model.dit(z_t, z_ctx, batch.t, q, audio_mask=batch.valid.bool(),
                    text_mask=batch.token_mask, cond_keep=batch.keep)
    l_cfm = flowmatch.cfm_loss(out.v, batch.z0, batch.z1, batch.mask, batch.valid)
    l_repa = flowmatch.repa_loss(out.repa_hidden, batch.repa, model.repa_proj, batch.valid)
    return l_cfm + lambda_repa * l_repa, l_cfm, l_repa


@dataclass
class TtsData:
    latents: list
    tokens: list
    feats: list
    latent_scale: float


def prepare_tts_data(cfg: RunConfig, vae: WavVAE, items) -> TtsData:
    raw = encode_items(vae, items, cfg.tts.use_mu, torch.Generator().manual_seed(cfg.seed))
    scale = 1.0 / float(torch.cat([z.reshape(-1) for z in raw]).double().std())
    latents = [z * scale for z in raw]
    hop = vae.hop
    feats = []
    for it in items:
        x = vae.pad(torch.tensor(it.waveform.samples)[None, None])[0, 0].numpy()
        feats.append(repa_features(x, hop, cfg.tts.repa_mels, cfg.data.sample_rate))
    stacked = torch.cat(feats, dim=1)
    mean, std = stacked.mean(dim=1, keepdim=True), stacked.std(dim=1, keepdim=True) + 1e-5
    feats = [(f - mean) / std for f in feats]
    return TtsData(latents, [list(it.tokens) for it in items], feats, scale)


@dataclass
class TtsRun:
    model: TtsModel
    step: int
    checkpoint: Path
    curves: Path


def train_tts(cfg: RunConfig, vae_ckpt: str | Path, out_dir: str | Path, progress=None) -> TtsRun:
    """Flow-matching training of the DiT (plus text conditioner) on frozen VAE latents."""
    t_cfg = cfg.tts
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vae, _ = load_vae(vae_ckpt)
    train_items, _ = load_corpora(cfg)
    data = prepare_tts_data(cfg, vae, train_items)
    model = build_tts(cfg, vae.cfg.latent_dim, data.latent_scale)
    params = model.named_parameters()
    opt = AdamW(params, t_cfg.beta1, t_cfg.beta2, t_cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 2)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    curves = CurveWriter(out_dir / "curves.csv")
    step = 0
    try:
        while step < t_cfg.steps:
            step += 1
            idx = [int(i) for i in rng.integers(0, len(train_items), size=t_cfg.batch_size)]
            batch = make_tts_batch(data.latents, data.tokens, data.feats, idx, rng, gen, cfg)
            total, l_cfm, l_repa = tts_loss(model, batch, t_cfg.lambda_repa)
            lr = lr_schedule(step, t_cfg.warmup, t_cfg.lr_hi, t_cfg.lr_lo, t_cfg.steps)
            record = {"cfm": l_cfm.detach(), "repa": l_repa.detach(), "total": total.detach(), "lr": lr}
            _check_finite(record, step, out_dir)
            grads = dict(zip(params, torch.autograd.grad(total, list(params.values()), allow_unused=True)))
            record["grad_norm"] = clip_grad_norm(grads, t_cfg.max_grad_norm)
            if not opt.step(grads, lr):
                raise _diverged(out_dir, step, "non-finite gradient", record)
            curves.log(step, record)
            if progress is not None:
                progress(step, record)
    finally:
        curves.close()

    tensors = {}
    for prefix, module in model.modules().items():
        tensors.update(module_tensors(prefix, module))
    tensors.update(opt.state_tensors("opt"))
    meta = {"kind": "tts", "step": step, "config_digest": cfg.digest(), "config": cfg.to_dict(),
            "latent_dim": vae.cfg.latent_dim, "latent_scale": data.latent_scale,
            "opt_step": opt.state["step"], "rng": _rng_state(rng, gen)}
    ckpt = save_checkpoint(out_dir / "checkpoint", tensors, meta)
    return TtsRun(model, step, ckpt, out_dir / "curves.csv")
