import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import desk  # noqa: E402
from charattack.data import Alphabet, ParallelCorpus, WordVocab, build_vocabs  # noqa: E402
from charattack.model import ModelConfig, TranslationModel  # noqa: E402

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def desk_splits():
    return desk.corpus()


@pytest.fixture(scope="session")
def desk_vanilla(desk_splits):
    return desk.train_desk(desk_splits)


@pytest.fixture(scope="session")
def desk_adversarial(desk_splits):
    return desk.train_desk(desk_splits, mode="white-fids")


def tiny_model(seed=0, hidden=8, max_chars=6, dtype="float64", init_scale=0.3, **kw):
    """A small float64 model over a hand-made vocabulary, for fast unit tests."""
    corpus = ParallelCorpus(
        [["nacht", "gut"], ["guten", "morgen"], ["die", "katze"], ["gute", "nacht"], ["der", "hund", "bellt"]],
        [["good", "night"], ["good", "morning"], ["the", "cat"], ["good", "night"], ["the", "dog", "barks"]],
    )
    alphabet, vocab = build_vocabs(corpus)
    cfg = ModelConfig(char_dim=6, conv_widths=(1, 2, 3), filters_per_width=3, hidden=hidden, target_dim=5,
                      max_chars=max_chars, init_scale=init_scale, dtype=dtype, **kw)
    return TranslationModel(cfg, alphabet, vocab, seed=seed), corpus


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["ACCEPTANCE", "tiny_model", "Alphabet", "WordVocab"]
