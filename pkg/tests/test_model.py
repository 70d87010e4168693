import itertools
import math

import numpy as np
import pytest

from charattack.data import BOUNDARY_ID, EOS_ID, ParallelCorpus, build_vocabs
from charattack.model import (
    GoldTarget, ModelConfig, TranslationModel, decode, input_gradient, loss, step_distribution,
)

from conftest import tiny_model


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _lstm(x, h, c, wx, wh, b):
    hid = h.shape[0]
    z = x @ wx + h @ wh + b
    i, f, o = _sigmoid(z[:hid]), _sigmoid(z[hid:2 * hid]), _sigmoid(z[2 * hid:3 * hid])
    g = np.tanh(z[3 * hid:])
    c = f * c + i * g
    return o * np.tanh(c), c


def reference_loss(model, words, target_ids):
    """The network written out one word and one step at a time with plain numpy."""
    cfg, p = model.config, model.params
    grid = model.encode(words)
    feats = []
    for i in range(grid.m):
        rows = [p["char_emb"][BOUNDARY_ID]] + [p["char_emb"][c] for c in grid.ids[i]]
        pooled = []
        for w in cfg.conv_widths:
            best = None
            for s in range(len(rows) - w + 1):
                window = np.concatenate(rows[s:s + w])
                act = np.tanh(window @ p[f"conv{w}.W"] + p[f"conv{w}.b"]) - 1e-3 * s
                best = act if best is None else np.maximum(best, act)
            pooled.append(best)
        y = np.concatenate(pooled)
        t = _sigmoid(y @ p["hw0.Wt"] + p["hw0.bt"])
        y = t * np.maximum(y @ p["hw0.Wh"] + p["hw0.bh"], 0) + (1 - t) * y
        feats.append(y)
    h = c = np.zeros(cfg.hidden)
    enc = []
    for y in feats:
        h, c = _lstm(y, h, c, p["enc0.Wx"], p["enc0.Wh"], p["enc0.b"])
        enc.append(h)
    enc = np.array(enc)
    total = 0.0
    for prev, gold in zip([1] + list(target_ids), list(target_ids) + [EOS_ID]):
        h, c = _lstm(p["tgt_emb"][prev], h, c, p["dec0.Wx"], p["dec0.Wh"], p["dec0.b"])
        scores = enc @ p["att.Wa"] @ h
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        htil = np.tanh(np.concatenate([alpha @ enc, h]) @ p["att.Wc"])
        logits = htil @ p["out.W"] + p["out.b"]
        total -= logits[gold] - (logits.max() + math.log(np.exp(logits - logits.max()).sum()))
    return total


def test_loss_matches_straight_line_reference(tiny):
    model, corpus = tiny
    for src, tgt in corpus:
        ids = model.vocab.encode_target(tgt)
        assert loss(model, model.encode(src), ids) == pytest.approx(reference_loss(model, src, ids), rel=1e-10)


def test_small_init_loss_is_near_uniform():
    model, corpus = tiny_model(init_scale=1e-3)
    for src, tgt in corpus:
        steps = len(tgt) + 1
        expected = steps * math.log(model.vocab.target_size)
        assert abs(loss(model, model.encode(src), model.vocab.encode_target(tgt)) - expected) < 0.05 * expected


def test_loss_nonnegative_and_finite(tiny):
    model, corpus = tiny
    rng = np.random.default_rng(0)
    for _ in range(20):
        src = corpus.source[rng.integers(len(corpus))]
        tgt = list(rng.integers(0, model.vocab.target_size, size=rng.integers(0, 5)))
        value = loss(model, model.encode(src), tgt)
        assert np.isfinite(value) and value >= 0


def test_padding_does_not_change_values(tiny):
    model, corpus = tiny
    grids = [model.encode(s) for s in corpus.source]
    objs = [GoldTarget(model.vocab.encode_target(t)) for t in corpus.target]
    batched = model.objectives(grids, objs)
    alone = [model.objectives([g], [o])[0] for g, o in zip(grids, objs)]
    np.testing.assert_allclose(batched, alone, rtol=1e-12)
    _, grads = model.objective_and_gradients(grids, objs)
    for g, o, gx in zip(grids, objs, grads):
        np.testing.assert_allclose(gx, input_gradient(model, g, o), rtol=1e-10, atol=1e-14)


def test_pass_counter(tiny):
    model, corpus = tiny
    grids = [model.encode(s) for s in corpus.source[:3]]
    objs = [GoldTarget([3])] * 3
    model.counter.reset()
    model.objectives(grids, objs)
    assert (model.counter.forward, model.counter.backward) == (3, 0)
    model.objective_and_gradients(grids, objs)
    assert (model.counter.forward, model.counter.backward) == (6, 3)
    model.greedy_decode(grids)
    assert model.counter.forward == 9


def test_forced_decode_scores(tiny):
    model, corpus = tiny
    grid = model.encode(corpus.source[0])
    ids = model.vocab.encode_target(corpus.target[0])
    assert model.sequence_logprob(grid, ids) == pytest.approx(-loss(model, grid, ids), rel=1e-12)
    greedy = decode(model, grid)
    assert model.sequence_logprob(grid, greedy.ids, greedy.finished) == pytest.approx(greedy.score, rel=1e-10)


def test_greedy_respects_length_cap(tiny):
    model, corpus = tiny
    for src in corpus.source:
        r = decode(model, model.encode(src))
        assert len(r.ids) <= 2 * len(src) + 5
        assert len(r.distributions) == len(r.ids) + (1 if r.finished else 0)


def test_beam_never_below_greedy(tiny):
    model, corpus = tiny
    for src in corpus.source:
        grid = model.encode(src)
        greedy = model.greedy_decode([grid])[0]
        for width in (2, 4):
            assert model.beam_decode(grid, width).score >= greedy.score - 1e-12
    with pytest.raises(ValueError):
        model.beam_decode(model.encode(corpus.source[0]), 0)


def test_beam_matches_exhaustive_search_on_short_outputs():
    corpus = ParallelCorpus([["ab", "ba"], ["a", "bb"]], [["x", "y"], ["y"]])
    alphabet, vocab = build_vocabs(corpus)
    assert vocab.target_size == 5
    rng = np.random.default_rng(0)
    agree = 0
    for trial in range(100):
        cfg = ModelConfig(char_dim=4, conv_widths=(1, 2), filters_per_width=2, hidden=6, target_dim=4,
                          max_chars=4, init_scale=1.0)
        model = TranslationModel(cfg, alphabet, vocab, seed=trial)
        words = ["".join(rng.choice(list("ab"), size=rng.integers(1, 4))) for _ in range(rng.integers(1, 4))]
        grid = model.encode(words)
        best = max(model.sequence_logprob(grid, list(seq))
                   for k in range(4) for seq in itertools.product([0, 1, 3, 4], repeat=k))
        agree += model.beam_decode(grid, 4).score >= best - 1e-9
    assert agree >= 90


def test_step_distribution(tiny):
    model, corpus = tiny
    r = decode(model, model.encode(corpus.source[1]))
    for t, k in enumerate(r.ids):
        dist = step_distribution(r, t)
        assert dist.sum() == pytest.approx(1.0)
        assert dist.argmax() == k
    with pytest.raises(IndexError):
        step_distribution(r, len(r.distributions))


def test_checkpoint_round_trip_preserves_outputs(tiny):
    model, corpus = tiny
    back = TranslationModel.from_checkpoint(model.to_checkpoint())
    assert back.translate(corpus.source) == model.translate(corpus.source)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=0)
    with pytest.raises(ValueError):
        ModelConfig(conv_widths=(1, 30), max_chars=20)
    with pytest.raises(ValueError):
        ModelConfig(conv_activation="gelu")
    assert ModelConfig().filters(5) == 50 and ModelConfig(filters_per_width=25).filters(3) == 64
