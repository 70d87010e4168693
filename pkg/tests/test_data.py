import numpy as np
import pytest

from charattack.data import (
    BOUNDARY_ID, PAD_ID, UNK_CHAR_ID, UNK_ID, Alphabet, CheckpointError, CorpusError, ParallelCorpus,
    build_vocabs, encode_sentence, load_checkpoint, load_corpus, load_lexicon, save_checkpoint,
)
from charattack.desk import make_desk_corpus
from charattack.train import TrainConfig, train

from conftest import tiny_model


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def test_load_three_line_corpus(tmp_path):
    _write(tmp_path / "a.src", ["das haus", "die katze schläft", "gut"])
    _write(tmp_path / "a.tgt", ["the house", "the cat sleeps", "good"])
    corpus = load_corpus(tmp_path / "a.src", tmp_path / "a.tgt")
    assert len(corpus) == 3
    assert corpus.source[1] == ["die", "katze", "schläft"]
    assert corpus.target[2] == ["good"]


def test_line_count_mismatch(tmp_path):
    _write(tmp_path / "a.src", ["w"] * 10)
    _write(tmp_path / "a.tgt", ["w"] * 9)
    with pytest.raises(CorpusError, match="line count mismatch 10 vs 9"):
        load_corpus(tmp_path / "a.src", tmp_path / "a.tgt")


def test_bad_inputs(tmp_path):
    (tmp_path / "bad.src").write_bytes(b"ok\n\xff\xfe\n")
    _write(tmp_path / "ok.tgt", ["a", "b"])
    with pytest.raises(CorpusError, match="line 2"):
        load_corpus(tmp_path / "bad.src", tmp_path / "ok.tgt")
    _write(tmp_path / "blank.src", ["a", "  "])
    with pytest.raises(CorpusError, match="empty sentence"):
        load_corpus(tmp_path / "blank.src", tmp_path / "ok.tgt")
    with pytest.raises(FileNotFoundError):
        load_corpus(tmp_path / "missing.src", tmp_path / "ok.tgt")


def test_desk_corpus_size_and_determinism():
    a = make_desk_corpus(pairs=2000, seed=0)
    assert sum(len(c) for c in a.values()) == 2000
    assert [len(a[k]) for k in ("train", "dev", "test")] == [1600, 200, 200]
    b = make_desk_corpus(pairs=2000, seed=0)
    assert a["test"].source == b["test"].source and a["test"].target == b["test"].target
    assert make_desk_corpus(pairs=50, seed=1)["train"].source != make_desk_corpus(pairs=50, seed=0)["train"].source


def test_alphabet_from_two_chars():
    alphabet, vocab = build_vocabs(ParallelCorpus([["ab", "ba"]], [["x"]]))
    assert alphabet.chars[alphabet.first_real:] == ("a", "b")
    assert len(alphabet) == 5
    assert alphabet.index("z") == UNK_CHAR_ID
    assert vocab.has_source("ab") and not vocab.has_source("aa")


def test_target_cap_keeps_most_frequent():
    corpus = ParallelCorpus([["a"]] * 4, [["x", "y"], ["x", "z"], ["x", "y"], ["w"]])
    _, vocab = build_vocabs(corpus, target_cap=2)
    assert vocab.target[3:] == ("x", "y")
    assert vocab.encode_target(["z", "x"]) == [UNK_ID, vocab.target_id("x")]
    _, vocab = build_vocabs(corpus, min_freq=2)
    assert vocab.target[3:] == ("x", "y")


def test_encode_pads_to_n():
    alphabet = Alphabet.from_chars("ab")
    grid = encode_sentence(["ab"], alphabet, n=4)
    a, b = alphabet.index("a"), alphabet.index("b")
    assert grid.ids.tolist() == [[a, b, PAD_ID, PAD_ID]]
    one_hot = grid.one_hot
    assert one_hot.shape == (1, 4, len(alphabet))
    np.testing.assert_array_equal(one_hot.sum(-1), np.ones((1, 4)))
    assert one_hot[0, 0, a] == 1 and one_hot[0, 2, PAD_ID] == 1
    assert BOUNDARY_ID not in grid.ids


def test_encode_round_trip_and_truncation():
    alphabet = Alphabet.from_chars("abcdefgh")
    words = ["abc", "h", "gfedcba"]
    grid = encode_sentence(words, alphabet, n=8)
    assert grid.words() == words and grid.m == 3 and grid.n == 8
    assert encode_sentence(["abcdefgh"], alphabet, n=5).words() == ["abcde"]
    assert encode_sentence(["axb"], alphabet, n=5).ids[0, 1] == UNK_CHAR_ID
    assert grid == encode_sentence(words, alphabet, n=8)
    assert hash(grid) == hash(encode_sentence(words, alphabet, n=8))
    with pytest.raises(ValueError):
        encode_sentence([], alphabet)


def test_target_round_trip(tiny):
    model, corpus = tiny
    for t in corpus.target:
        assert model.vocab.decode_target(model.vocab.encode_target(t)) == t


def test_lexicon(tmp_path):
    (tmp_path / "lex.tsv").write_text("nacht\tnahct nacht nachht\n\nhaus\thuas\n", encoding="utf-8")
    assert load_lexicon(tmp_path / "lex.tsv") == {"nacht": ["nahct", "nachht"], "haus": ["huas"]}
    (tmp_path / "bad.tsv").write_text("no separator\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_lexicon(tmp_path / "bad.tsv")


def test_checkpoint_round_trip(tmp_path, tiny):
    model, _ = tiny
    ckpt = model.to_checkpoint({"epoch": 3}, {"m.w": np.arange(4.0)})
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.config == ckpt.config and back.metadata == {"epoch": 3}
    assert back.alphabet == model.alphabet and back.vocab.target == model.vocab.target
    assert set(back.params) == set(ckpt.params)
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    np.testing.assert_array_equal(back.optimizer_state["m.w"], np.arange(4.0))


def test_not_a_checkpoint(tmp_path, tiny):
    (tmp_path / "junk").write_bytes(b"hello world")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk")
    model, _ = tiny
    save_checkpoint(model.to_checkpoint({}), tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"xx")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(tmp_path / "long.ckpt")


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = dict(batch_size=2, optimizer="adam", learning_rate=0.01, seed=3)
    full, corpus = tiny_model()
    ckpt_full, _ = train(full, corpus, TrainConfig(epochs=4, **cfg), dev=corpus)

    first, _ = tiny_model()
    ckpt_half, _ = train(first, corpus, TrainConfig(epochs=2, **cfg), dev=corpus)
    save_checkpoint(ckpt_half, tmp_path / "half.ckpt")
    second, _ = tiny_model(seed=99)  # parameters come from the checkpoint
    ckpt_resumed, report = train(second, corpus, TrainConfig(epochs=4, **cfg), dev=corpus,
                                 resume=load_checkpoint(tmp_path / "half.ckpt"))
    assert [e.epoch for e in report.epochs] == [1, 2, 3, 4]
    for k, v in ckpt_full.params.items():
        np.testing.assert_array_equal(ckpt_resumed.params[k], v)
