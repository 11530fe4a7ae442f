import hashlib
import json
from pathlib import Path

import pytest
import torch

import vshuffle
from vshuffle import denoiser, textures
from vshuffle.features import AttentionTap

TRAIN_STEPS = 2000
TRAIN_SEED = 0
_SOURCES = ("gradcore.py", "denoiser.py", "textures.py", "container.py")


def _model_key() -> str:
    h = hashlib.sha256(f"{TRAIN_STEPS}:{TRAIN_SEED}".encode())
    root = Path(vshuffle.__file__).parent
    for name in _SOURCES:
        h.update((root / name).read_bytes())
    h.update(torch.__version__.encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained(request):
    """The 32x32 micro-denoiser trained on the default texture set, cached across sessions.

    Returns ``(model, summary)`` where summary holds the smoothed initial and
    final training losses.
    """
    cache_dir = Path(request.config.cache.mkdir("vshuffle-model"))
    key = _model_key()
    ckpt, meta = cache_dir / f"{key}.vshf", cache_dir / f"{key}.json"
    if ckpt.exists() and meta.exists():
        return denoiser.load_checkpoint(ckpt), json.loads(meta.read_text())
    data = textures.default_training_set(TRAIN_SEED)
    model, report = denoiser.train(denoiser.init_model(seed=TRAIN_SEED), data, TRAIN_STEPS, seed=TRAIN_SEED)
    summary = {"initial": report.initial, "final": report.final, "steps": TRAIN_STEPS}
    denoiser.save_checkpoint(model, ckpt)
    meta.write_text(json.dumps(summary))
    return model, summary


@pytest.fixture(scope="session")
def trained_model(trained):
    return trained[0]


@pytest.fixture(scope="session")
def trained_checkpoint(trained, request):
    return Path(request.config.cache.mkdir("vshuffle-model")) / f"{_model_key()}.vshf"


def make_taps(blocks, h=2, s=6, d=3, seed=0, dtype=torch.float64, stream="synthetic"):
    """Random taps with independent Q, K, V per block."""
    g = torch.Generator().manual_seed(seed)
    taps = []
    for b in blocks:
        q, k, v = (torch.randn(h, s, d, generator=g, dtype=dtype) for _ in range(3))
        taps.append(AttentionTap(b, 0, stream, q, k, v, None, (1, s)))
    return taps


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[str, str] = {}


def record_criterion(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[name] = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
    print(ACCEPTANCE[name])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE.values():
            terminalreporter.write_line(line)
