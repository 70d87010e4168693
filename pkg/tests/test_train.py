import math

import numpy as np
import pytest

from charattack.data import ParallelCorpus, build_vocabs
from charattack.editops import edited_word
from charattack.model import ModelConfig, TranslationModel
from charattack.noise import NoiseDistribution
from charattack.train import (
    Channels, TrainConfig, TrainingDiverged, adv_train, corpus_loss, ensemble_batch, train, white_fids_batch,
)

from conftest import tiny_model

COPY_WORDS = ["haus", "katze", "hund", "baum", "weg", "tag", "licht", "see"]


def copy_task():
    rng = np.random.default_rng(0)
    src = [list(rng.choice(COPY_WORDS, size=rng.integers(1, 4))) for _ in range(50)]
    corpus = ParallelCorpus(src, [list(s) for s in src])
    alphabet, vocab = build_vocabs(corpus)
    cfg = ModelConfig(char_dim=8, conv_widths=(1, 2, 3), filters_per_width=4, hidden=64, target_dim=16,
                      max_chars=8, init_scale=0.3)
    return TranslationModel(cfg, alphabet, vocab, seed=0), corpus


COPY_TRAIN = dict(epochs=30, optimizer="adam", learning_rate=0.003, batch_size=10)


@pytest.fixture(scope="module")
def copied():
    model, corpus = copy_task()
    ckpt, report = train(model, corpus, TrainConfig(**COPY_TRAIN))
    return model, corpus, ckpt, report


def test_copy_task_is_learned(copied):
    model, corpus, _, _ = copied
    out = model.translate(corpus.source)
    exact = sum(o == t for o, t in zip(out, corpus.target))
    assert exact >= 0.9 * len(corpus)


def test_loss_decreases(copied):
    losses = [e.clean_loss for e in copied[3].epochs]
    rises = sum(b > a for a, b in zip(losses, losses[1:]))
    assert rises <= 0.02 * len(losses)
    assert losses[-1] < 0.1 * losses[0]


def test_same_seed_gives_identical_checkpoints(copied):
    model, corpus = copy_task()
    ckpt, report = train(model, corpus, TrainConfig(**COPY_TRAIN))
    for k, v in copied[2].params.items():
        np.testing.assert_array_equal(ckpt.params[k], v)
    assert report.to_tsv(timing=False) == copied[3].to_tsv(timing=False)
    assert "seconds" in report.to_tsv() and "seconds" not in report.to_tsv(timing=False)


def _grids(model, corpus):
    return [model.encode(s) for s in corpus.source], [model.vocab.encode_target(t) for t in corpus.target]


def test_white_fids_batch_is_one_pass_with_oov_edits(tiny):
    model, corpus = tiny
    grids, targets = _grids(model, corpus)
    model.counter.reset()
    adv, edits = white_fids_batch(model, grids, targets, NoiseDistribution.uniform(), np.random.default_rng(0),
                                  return_edits=True)
    assert (model.counter.forward, model.counter.backward) == (len(grids), len(grids))
    for g, a, ops in zip(grids, adv, edits):
        assert sorted(op.i for op in ops) == list(range(g.m))
        assert all(not model.vocab.has_source(edited_word(g, op)) for op in ops)
        assert a.m == g.m and all(not model.vocab.has_source(w) for w in a.words())


def test_white_fids_follows_the_kind_distribution(tiny):
    model, corpus = tiny
    grids, targets = _grids(model, corpus)
    only_swaps = NoiseDistribution((0.0, 0.0, 0.0, 1.0))
    _, edits = white_fids_batch(model, grids, targets, only_swaps, np.random.default_rng(0), return_edits=True)
    assert all(op.kind.name == "SWAP" for ops in edits for op in ops)


def test_generation_pass_accounting():
    cfg = dict(epochs=1, batch_size=2, seed=0)
    model, corpus = tiny_model()
    _, report = adv_train(model, corpus, TrainConfig(mode="white-fids", **cfg))
    batches = math.ceil(len(corpus) / 2)
    assert (report.generation_forward, report.generation_backward) == (batches, batches)
    model, corpus = tiny_model()
    channels = Channels("abcdefghijklmnopqrstuvwxyz")
    _, report = adv_train(model, corpus, TrainConfig(mode="black-fids", **cfg), channels=channels)
    assert (report.generation_forward, report.generation_backward) == (0, 0)
    assert report.epochs[0].adversarial_loss is not None
    with pytest.raises(ValueError):
        adv_train(model, corpus, TrainConfig(mode="none", **cfg))
    with pytest.raises(ValueError):
        train(model, corpus, TrainConfig(mode="black-nat", **cfg), channels=channels)


def test_ensemble_assignment():
    rng = np.random.default_rng(0)
    assert ensemble_batch(10, 1.0, (), rng) == ["white"] * 10
    assert ensemble_batch(5, 0.0, ("nat", "rand"), rng) == ["nat", "rand", "nat", "rand", "nat"]
    n, p = 4000, 0.3
    whites = ensemble_batch(n, p, ("nat",), rng).count("white")
    assert abs(whites - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    with pytest.raises(ValueError):
        ensemble_batch(3, 0.5, (), rng)


def test_ensemble_training_runs(tiny):
    model, corpus = tiny
    channels = Channels("abcdefghijklmnopqrstuvwxyz", lexicon={"nacht": ["nahct"]})
    cfg = TrainConfig(epochs=1, batch_size=5, mode="ensemble", white_fraction=0.5, black_sources=("nat", "rand"))
    _, report = train(model, corpus, cfg, channels=channels)
    assert report.generation_backward <= 1


def test_divergence_is_reported(tiny):
    model, corpus = tiny
    model.params["out.b"][:] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0, batch 0"):
        train(model, corpus, TrainConfig(epochs=1))


def test_dev_loss_and_decay(tiny):
    model, corpus = tiny
    grids, targets = _grids(model, corpus)
    before = corpus_loss(model, grids, targets)
    _, report = train(model, corpus, TrainConfig(epochs=3, batch_size=1, optimizer="adam", learning_rate=0.01),
                      dev=corpus)
    assert report.epochs[-1].dev_loss == pytest.approx(corpus_loss(model, grids, targets))
    assert report.epochs[-1].dev_loss < before


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(epochs=0), dict(optimizer="rmsprop"),
                                 dict(mode="fancy"), dict(mixing=(0.7, 0.7)), dict(white_fraction=2.0),
                                 dict(clip=0), dict(weight_decay=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)
