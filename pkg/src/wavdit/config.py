"""Run configuration: a TOML document with ``data``, ``vae``, ``tts``, ``sampler``
and ``eval`` sections plus a top-level ``seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import tomli

from .sampler import SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synth"          # "synth" or "manifest"
    n_train: int = 256
    n_test: int = 32
    train_manifest: str = ""
    test_manifest: str = ""
    sample_rate: int = 24000
    vae_clip_seconds: float = 0.256

    def validate(self):
        if self.source not in ("synth", "manifest"):
            raise ConfigError("data.source must be 'synth' or 'manifest'")
        if self.source == "manifest" and not (self.train_manifest and self.test_manifest):
            raise ConfigError("manifest source needs data.train_manifest and data.test_manifest")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("corpus sizes must be positive")


@dataclass
class VaeSection:
    hop: int = 2048
    strides: list = field(default_factory=lambda: [4, 4, 8, 16])
    channels: list = field(default_factory=lambda: [16, 32, 64, 128, 256])
    latent_dim: int = 64
    kernel: int = 7
    dilations: list = field(default_factory=lambda: [1, 3, 9])
    snake_alpha_init: float = 1.0
    disc_ffts: list = field(default_factory=lambda: [512, 1024, 2048])
    disc_channels: int = 16
    lambda_spec: float = 1.0
    lambda_mel: float = 1.0
    lambda_time: float = 10.0
    lambda_kl: float = 0.01
    lambda_adv: float = 1.0
    lambda_fm: float = 2.0
    log_eps: float = 1e-5
    stft_ffts: list = field(default_factory=lambda: [512, 1024, 2048])
    mel_bins: list = field(default_factory=lambda: [40, 80, 160])
    steps: int = 2000
    warmup_steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.8
    beta2: float = 0.99
    weight_decay: float = 0.0
    max_grad_norm: float = 10.0

    def validate(self):
        if len(self.stft_ffts) != len(self.mel_bins):
            raise ConfigError("vae.stft_ffts and vae.mel_bins must have equal length")
        if self.warmup_steps < 0 or self.steps < 1:
            raise ConfigError("vae.steps must be positive and warmup_steps non-negative")
        import math
        if math.prod(self.strides) != self.hop:
            raise ConfigError(f"product of vae.strides is {math.prod(self.strides)}, vae.hop says {self.hop}")


@dataclass
class TtsSection:
    layers: int = 4
    width: int = 64
    heads: int = 4
    repa_layer: int = 8
    mlp_ratio: int = 4
    refine_blocks: int = 4
    encoder_layers: int = 2
    encoder_heads: int = 2
    steps: int = 2000
    batch_size: int = 8
    lr_hi: float = 1e-4
    lr_lo: float = 1e-5
    warmup: int = 1000
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    drop_prob: float = 0.1
    lambda_repa: float = 0.5
    repa_mels: int = 32
    mask_min: float = 0.7
    mask_max: float = 1.0
    use_mu: bool = True

    def validate(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError("tts.drop_prob must lie in [0, 1]")
        if not 0.0 < self.mask_min <= self.mask_max <= 1.0:
            raise ConfigError("need 0 < tts.mask_min <= tts.mask_max <= 1")
        if self.steps <= self.warmup:
            raise ConfigError("tts.steps must exceed tts.warmup")


@dataclass
class SamplerSection:
    nfe: int = 16
    guidance: str = "apg"
    alpha: float = 4.0
    eta: float = 0.5
    beta: float = -0.3
    t_clip: float = 1e-3

    def validate(self):
        self.build()

    def build(self) -> SamplerConfig:
        return SamplerConfig(**dataclasses.asdict(self))


@dataclass
class EvalSection:
    n_pairs: int = 32

    def validate(self):
        if self.n_pairs < 1:
            raise ConfigError("eval.n_pairs must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    vae: VaeSection = field(default_factory=VaeSection)
    tts: TtsSection = field(default_factory=TtsSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> "RunConfig":
        for name in ("data", "vae", "tts", "sampler", "eval"):
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"data": DataSection, "vae": VaeSection, "tts": TtsSection,
             "sampler": SamplerSection, "eval": EvalSection}


def _coerce(section: str, cls, values: dict) -> Any:
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = cls()
    for key, value in values.items():
        default = getattr(out, key)
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{section}] {key} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{section}] {key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{section}] {key} must be a number")
            value = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list):
                raise ConfigError(f"[{section}] {key} must be a list")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{section}] {key} must be a string")
        setattr(out, key, value)
    return out


def from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    if "seed" in doc:
        if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool):
            raise ConfigError("seed must be an integer")
        cfg.seed = doc["seed"]
    for name, cls in _SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        setattr(cfg, name, _coerce(name, cls, section))
    return cfg.validate()


def load_config(path: str | Path | None = None) -> RunConfig:
    """Parse a TOML config; ``None`` loads the bundled default recipe."""
    if path is None:
        text = resources.files("wavdit").joinpath("configs/default.toml").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return from_dict(doc)


def apply_overrides(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Set dotted keys such as ``{"tts.steps": 10, "seed": 3}`` and revalidate."""
    doc = cfg.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        *path, leaf = dotted.split(".")
        node = doc
        for part in path:
            if part not in node:
                raise ConfigError(f"unknown section {part!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown key {dotted!r}")
        node[leaf] = value
    return from_dict(doc)
