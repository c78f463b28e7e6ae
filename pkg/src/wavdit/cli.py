"""Command-line entry point: ``wavdit <command> [options]``.

Commands: ``vae-train``, ``vae-encode``, ``vae-decode``, ``tts-train``,
``tts-infer`` and ``eval``. Every command accepts ``--config`` (TOML; the
bundled toy recipe when omitted) and ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import torch

from . import evaluate, signalio, tensorio, train
from .config import ConfigError, apply_overrides, load_config


def _tokens(text: str) -> list[int]:
    try:
        toks = [int(t) for t in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"tokens must be integers: {text!r}") from exc
    if not toks:
        raise argparse.ArgumentTypeError("need at least one token")
    return toks


def _config(args, extra: dict | None = None):
    overrides = {"seed": args.seed}
    overrides.update(extra or {})
    return apply_overrides(load_config(args.config), overrides)


def _sampler_overrides(args) -> dict:
    return {f"sampler.{k}": getattr(args, k) for k in ("nfe", "guidance", "alpha", "eta", "beta")}


def _progress(every: int):
    t0 = time.time()

    def report(step, record):
        if step == 1 or step % every == 0:
            terms = " ".join(f"{k}={float(v):.4g}" for k, v in sorted(record.items()))
            print(f"[{time.time() - t0:7.1f}s] step {step}: {terms}", file=sys.stderr, flush=True)
    return report


def cmd_vae_train(args):
    cfg = _config(args, {"vae.steps": args.steps})
    run = train.train_vae(cfg, args.out, resume=args.resume, progress=_progress(args.log_every))
    print(run.checkpoint)


def cmd_vae_encode(args):
    vae, _ = train.load_vae(args.vae_ckpt)
    wave = signalio.read_wav(args.wav)
    with torch.no_grad():
        mu = vae.encode(torch.tensor(wave.samples, dtype=torch.float32)[None], sample=False).mu[0]
    out = tensorio.write_tensor(args.out, mu.numpy(), frame_rate=wave.sample_rate / vae.hop,
                                sample_rate=wave.sample_rate)
    print(out)


def cmd_vae_decode(args):
    vae, _ = train.load_vae(args.vae_ckpt)
    latent, meta = tensorio.read_tensor(args.latent)
    if latent.ndim != 2 or latent.shape[0] != vae.cfg.latent_dim:
        raise SystemExit(f"latent must be [{vae.cfg.latent_dim}, frames], got {list(latent.shape)}")
    with torch.no_grad():
        y = vae.decode(torch.from_numpy(latent)[None])[0].double().numpy()
    rate = int(meta.get("sample_rate", vae.cfg.sample_rate))
    signalio.write_wav(signalio.Waveform(y, rate), args.out)
    print(args.out)


def cmd_tts_train(args):
    cfg = _config(args, {"tts.steps": args.steps})
    run = train.train_tts(cfg, args.vae_ckpt, args.out, progress=_progress(args.log_every))
    print(run.checkpoint)


def cmd_tts_infer(args):
    cfg = _config(args, _sampler_overrides(args))
    vae, _ = train.load_vae(args.vae_ckpt)
    tts, _ = train.load_tts(args.tts_ckpt, cfg)
    prompt = signalio.read_wav(args.prompt_wav)
    wave = evaluate.synthesize(vae, tts, prompt.samples, args.prompt_tokens, args.target_tokens,
                               cfg.sampler.build(), cfg.seed, args.duration_frames)
    signalio.write_wav(signalio.Waveform(wave, prompt.sample_rate), args.out)
    print(args.out)


def cmd_eval(args):
    cfg = _config(args, _sampler_overrides(args))
    t0 = time.time()
    train_items, test_items = train.load_corpora(cfg)
    items = test_items if args.split == "test" else train_items
    vae, _ = train.load_vae(args.vae_ckpt)
    report = {"config_digest": cfg.digest(), "split": args.split,
              "vae": evaluate.evaluate_vae(vae, items[:cfg.eval.n_pairs], cfg.data.sample_rate)}
    runtime = {"vae_seconds": time.time() - t0}
    if args.tts_ckpt:
        t1 = time.time()
        tts, _ = train.load_tts(args.tts_ckpt, cfg)
        report["tts"] = evaluate.evaluate_tts(vae, tts, items, cfg.sampler.build(), cfg.eval.n_pairs,
                                              cfg.seed, cfg.data.sample_rate)
        report["sampler"] = cfg.to_dict()["sampler"]
        runtime["tts_seconds"] = time.time() - t1
    runtime["total_seconds"] = time.time() - t0
    evaluate.write_report(report, args.out, runtime)
    print(json.dumps({k: v["aggregate"] for k, v in report.items() if isinstance(v, dict) and "aggregate" in v}))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wavdit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", type=Path, default=None, help="TOML run config (default: bundled toy recipe)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads (fixed for determinism)")

    def sampler_flags(sp):
        sp.add_argument("--nfe", type=int, default=None)
        sp.add_argument("--guidance", choices=("none", "cfg", "apg"), default=None)
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--eta", type=float, default=None)
        sp.add_argument("--beta", type=float, default=None)

    sp = sub.add_parser("vae-train", help="train the waveform VAE")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--resume", type=Path, default=None, help="checkpoint directory to continue from")
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_vae_train)

    sp = sub.add_parser("vae-encode", help="wav -> latent tensor file (bottleneck mean)")
    common(sp)
    sp.add_argument("--vae-ckpt", type=Path, required=True)
    sp.add_argument("--wav", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_vae_encode)

    sp = sub.add_parser("vae-decode", help="latent tensor file -> wav")
    common(sp)
    sp.add_argument("--vae-ckpt", type=Path, required=True)
    sp.add_argument("--latent", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_vae_decode)

    sp = sub.add_parser("tts-train", help="train the flow-matching DiT on frozen VAE latents")
    common(sp)
    sp.add_argument("--vae-ckpt", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_tts_train)

    sp = sub.add_parser("tts-infer", help="continue a prompt wav with new token text")
    common(sp)
    sampler_flags(sp)
    sp.add_argument("--vae-ckpt", type=Path, required=True)
    sp.add_argument("--tts-ckpt", type=Path, required=True)
    sp.add_argument("--prompt-wav", type=Path, required=True)
    sp.add_argument("--prompt-tokens", type=_tokens, required=True)
    sp.add_argument("--target-tokens", type=_tokens, required=True)
    sp.add_argument("--duration-frames", type=int, default=None, help="total frames incl. prompt")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_tts_infer)

    sp = sub.add_parser("eval", help="write a JSON evaluation report")
    common(sp)
    sampler_flags(sp)
    sp.add_argument("--vae-ckpt", type=Path, required=True)
    sp.add_argument("--tts-ckpt", type=Path, default=None)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(args.threads)
    try:
        args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
