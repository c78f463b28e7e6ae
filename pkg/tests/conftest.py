import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from wavdit.config import RunConfig, apply_overrides  # noqa: E402

# Small enough that a few optimizer steps of either model take about a second.
TINY = {
    "data.n_train": 4, "data.n_test": 2,
    "vae.strides": [8, 16, 16], "vae.channels": [2, 8, 16, 32], "vae.latent_dim": 4,
    "vae.dilations": [1], "vae.disc_ffts": [256], "vae.disc_channels": 4,
    "vae.stft_ffts": [256, 512], "vae.mel_bins": [16, 32],
    "vae.steps": 3, "vae.warmup_steps": 1, "vae.batch_size": 2,
    "tts.layers": 2, "tts.width": 16, "tts.heads": 2, "tts.refine_blocks": 1,
    "tts.encoder_layers": 1, "tts.steps": 3, "tts.warmup": 1, "tts.batch_size": 2, "tts.repa_mels": 8,
    "sampler.nfe": 2, "eval.n_pairs": 2,
}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def tiny_cfg():
    return apply_overrides(RunConfig(), TINY)


# ---------------------------------------------------------------------------
# acceptance verdict lines, repeated in the terminal summary

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_VERDICTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """``verdict(criterion, ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    def record(criterion: str, ok: bool, detail: str):
        line = f"criterion {criterion:<4} {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        number = int("".join(ch for ch in criterion if ch.isdigit()))
        request.config.stash[_VERDICTS].append(((number, criterion), line))
        assert ok, line
    return record
