import os
from pathlib import Path

import pytest

from embedtune.experiments import ReferenceSpec, cached_reference_checkpoint
from embedtune.model import ModelConfig, Vocabulary, random_checkpoint

ROOT = Path(__file__).resolve().parent.parent
CACHE_DIR = Path(os.environ.get("EMBEDTUNE_CACHE", ROOT / ".cache"))

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


@pytest.fixture(scope="session")
def ascii_vocab():
    return Vocabulary([chr(c) for c in range(32, 127)] + ["\n"])


@pytest.fixture(scope="session")
def tiny_vocab():
    return Vocabulary(list("abcdefgh \n"))


@pytest.fixture(scope="session")
def tiny_ckpt(tiny_vocab):
    cfg = ModelConfig(d=16, n_layers=2, heads=2, d_ff=32, max_seq=48, vocab_size=len(tiny_vocab))
    return random_checkpoint(cfg, tiny_vocab, seed=3)


@pytest.fixture(scope="session")
def reference_ckpt():
    """Pretrained desk-scale sentiment checkpoint (built once, then cached)."""
    return cached_reference_checkpoint(CACHE_DIR, ReferenceSpec())
