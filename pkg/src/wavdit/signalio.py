"""Audio file I/O, fixed-length segmentation and the synthetic phone corpus.

The synthetic corpus stands in for transcribed speech: every utterance is a
sequence of enveloped sinusoids ("phones") drawn from a fixed inventory of
32 frequencies, and its token sequence is the ordered list of inventory
indices. That gives an exact audio/text alignment to test against.
"""

from __future__ import annotations

import json
import os
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_SAMPLE_RATE = 24000

# 32 phones spaced 1.5 semitones apart, 110 Hz .. ~1608 Hz
PHONE_FREQS = 110.0 * 2.0 ** (np.arange(32) / 8.0)
VOCAB_SIZE = len(PHONE_FREQS)
PEAK_LIMIT = 0.95


class SignalError(Exception):
    pass


class MalformedHeader(SignalError):
    pass


class UnsupportedFormat(SignalError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class CorpusItem:
    waveform: Waveform
    tokens: list[int]
    token_texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("a corpus item needs at least one token")
        if any(t < 0 or t >= VOCAB_SIZE for t in self.tokens):
            raise ValueError(f"token ids must lie in [0, {VOCAB_SIZE})")
        if not self.token_texts:
            self.token_texts = [token_symbol(t) for t in self.tokens]


def token_symbol(token: int) -> str:
    return f"ph{token:02d}"


def read_wav(path: str | os.PathLike) -> Waveform:
    """Read a 16-bit PCM mono RIFF/WAVE file; samples are divided by 32768."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise MalformedHeader(f"{path}: not a RIFF/WAVE container")
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from exc
        raise MalformedHeader(f"{path}: {msg}") from exc
    except (EOFError, struct.error) as exc:
        raise MalformedHeader(f"{path}: truncated header") from exc
    if n_channels != 1:
        raise UnsupportedFormat(f"{path}: {n_channels} channels, only mono is supported")
    if width != 2:
        raise UnsupportedFormat(f"{path}: {8 * width}-bit samples, only 16-bit is supported")
    pcm = np.frombuffer(frames, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    # Scale by 32768 and saturate, so that read -> write is lossless for every
    # int16 value while +1.0 still maps to 32767.
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    return np.clip(np.rint(x * 32768.0), -32768, 32767).astype("<i2")


def write_wav(w: Waveform, path: str | os.PathLike) -> None:
    if not np.all(np.isfinite(w.samples)):
        raise ValueError("cannot write non-finite samples")
    pcm = to_pcm16(w.samples)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(w.sample_rate))
        wf.writeframes(pcm.tobytes())


def segment(w: Waveform, seconds: float) -> list[Waveform]:
    """Split into consecutive chunks of ``floor(seconds * sample_rate)`` samples.

    A trailing remainder shorter than half a chunk is dropped, a longer one is
    zero-padded to a full chunk.
    """
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    size = int(np.floor(seconds * w.sample_rate))
    if size < 1:
        raise ValueError("chunk length rounds to zero samples")
    x = w.samples
    n_full, rem = divmod(len(x), size)
    chunks = [Waveform(x[i * size:(i + 1) * size].copy(), w.sample_rate) for i in range(n_full)]
    if rem and 2 * rem >= size:
        tail = np.zeros(size)
        tail[:rem] = x[n_full * size:]
        chunks.append(Waveform(tail, w.sample_rate))
    return chunks


def _envelope(n: int, ramp: int) -> np.ndarray:
    env = np.ones(n)
    ramp = min(ramp, n // 2)
    if ramp > 0:
        rise = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = rise
        env[n - ramp:] = rise[::-1]
    return env


def synth_item(rng: np.random.Generator, sample_rate: int = DEFAULT_SAMPLE_RATE,
               tokens: list[int] | None = None) -> CorpusItem:
    """Draw one utterance; phones are 1.0-1.33 s long so items last 1-4 s."""
    if tokens is None:
        n_phones = int(rng.integers(1, 4))
        tokens = [int(k) for k in rng.integers(0, VOCAB_SIZE, size=n_phones)]
    else:
        n_phones = len(tokens)
    lengths = [int(round(rng.uniform(1.0, 4.0 / 3.0) * sample_rate)) for _ in range(n_phones)]
    pieces = []
    for tok, n in zip(tokens, lengths):
        amp = rng.uniform(0.3, 0.6)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        t = np.arange(n) / sample_rate
        tone = amp * np.sin(2.0 * np.pi * PHONE_FREQS[tok] * t + phase)
        pieces.append(tone * _envelope(n, int(0.02 * sample_rate)))
    x = np.concatenate(pieces)
    x = x + 0.003 * rng.standard_normal(x.shape[0])
    peak = np.max(np.abs(x))
    if peak > PEAK_LIMIT:
        x *= PEAK_LIMIT / peak
    return CorpusItem(Waveform(x, sample_rate), tokens)


def synth_corpus(n_items: int, seed: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> list[CorpusItem]:
    if n_items <= 0:
        raise ValueError("n_items must be positive")
    rng = np.random.default_rng(seed)
    return [synth_item(rng, sample_rate) for _ in range(n_items)]


def phone_boundaries(n_samples: int, n_tokens: int) -> list[tuple[int, int]]:
    """Equal-share sample ranges used to score per-token content."""
    edges = np.linspace(0, n_samples, n_tokens + 1).round().astype(int)
    return list(zip(edges[:-1], edges[1:]))


def write_corpus(items: list[CorpusItem], directory: str | os.PathLike) -> Path:
    """Write ``item_XXXXX.wav`` files plus a JSON-lines manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for i, item in enumerate(items):
            name = f"item_{i:05d}.wav"
            write_wav(item.waveform, directory / name)
            fh.write(json.dumps({"wav": name, "tokens": list(item.tokens)}) + "\n")
    return manifest


def read_corpus(manifest: str | os.PathLike) -> list[CorpusItem]:
    """Load a JSON-lines manifest; relative wav paths resolve against its directory."""
    manifest = Path(manifest)
    items = []
    with open(manifest, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                wav_path = Path(rec["wav"])
                tokens = [int(t) for t in rec["tokens"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise SignalError(f"{manifest}:{line_no}: bad manifest record") from exc
            if not wav_path.is_absolute():
                wav_path = manifest.parent / wav_path
            items.append(CorpusItem(read_wav(wav_path), tokens))
    return items
