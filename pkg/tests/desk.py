"""The desk-scale setup shared by the slow tests: corpus, model and training recipe."""

from __future__ import annotations

from charattack.data import build_vocabs
from charattack.desk import make_desk_corpus
from charattack.model import ModelConfig, TranslationModel
from charattack.train import TrainConfig, train

CORPUS = dict(pairs=2000, seed=0, extra_syllables=1)
MODEL = dict(hidden=128, dtype="float32", max_chars=16, init_scale=0.3, dropout=0.3)
TRAIN = dict(epochs=10, optimizer="adam", learning_rate=0.005, batch_size=16, seed=0)


def corpus():
    return make_desk_corpus(**CORPUS)


def fresh_model(splits, seed: int = 0) -> TranslationModel:
    alphabet, vocab = build_vocabs(splits["train"])
    return TranslationModel(ModelConfig(**MODEL), alphabet, vocab, seed=seed)


def train_desk(splits, **overrides):
    """Train the desk model; returns (float64 model for attacks, checkpoint, report)."""
    model = fresh_model(splits, overrides.get("seed", 0))
    cfg = TrainConfig(**{**TRAIN, **overrides})
    ckpt, report = train(model, splits["train"], cfg, dev=splits["dev"])
    return TranslationModel.from_checkpoint(ckpt, dtype="float64"), ckpt, report
