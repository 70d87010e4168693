from types import SimpleNamespace

import pytest
import sacrebleu
from hypothesis import given, settings
from hypothesis import strategies as st

from charattack import metrics
from charattack.metrics import (
    ALPHAS, InvalidRecord, bleu, corpus_bleu, efficiency, format_report, make_record, perfect_mute, perfect_push,
    sign_test, success, success_rates,
)

words = st.lists(st.sampled_from(["the", "cat", "sat", "on", "mat", "a", "dog"]), min_size=1, max_size=12)


def oracle(candidate, reference):
    """Reference BLEU from sacrebleu with the same smoothing, on pre-split words."""
    score = sacrebleu.sentence_bleu(" ".join(candidate), [" ".join(reference)], smooth_method="add-k",
                                    smooth_value=1, tokenize="none", use_effective_order=False)
    return score.score / 100


def test_identity_and_zero_overlap():
    assert bleu(["the", "cat"], ["the", "cat"]).value == 1.0
    assert bleu(["a", "dog"], ["the", "cat"]).value == 0.0
    assert bleu([], ["the", "cat"]).value == 0.0
    with pytest.raises(ValueError):
        bleu(["x"], [])


def test_fixed_pair_matches_independent_oracle():
    cand, ref = "the cat sat on the mat".split(), "the cat is on the mat".split()
    assert bleu(cand, ref).value == pytest.approx(oracle(cand, ref), abs=1e-9)


def test_argument_order_matters():
    a, b = ["the", "cat", "sat"], ["the", "cat", "sat", "on", "the", "mat"]
    assert bleu(a, b).value != bleu(b, a).value
    assert bleu(a, b).brevity_penalty < 1.0 == bleu(b, a).brevity_penalty


@settings(max_examples=200, deadline=None)
@given(words)
def test_bleu_of_a_sentence_with_itself_is_one(a):
    assert bleu(a, a).value == pytest.approx(1.0)


@settings(max_examples=200, deadline=None)
@given(words, words)
def test_bleu_matches_oracle_and_lies_in_unit_interval(a, b):
    value = bleu(a, b).value
    assert 0.0 <= value <= 1.0
    assert value == pytest.approx(oracle(a, b), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(words, words)
def test_corpus_of_one_sentence(a, b):
    assert corpus_bleu([a], [b]).value == bleu(a, b).value


def test_corpus_bleu_pools_counts():
    cands = [["the", "cat", "sat"], ["on", "a", "mat"]]
    refs = [["the", "cat", "sat", "down"], ["on", "the", "mat"]]
    expected = sacrebleu.corpus_bleu([" ".join(c) for c in cands], [[" ".join(r) for r in refs]],
                                     smooth_method="add-k", smooth_value=1, tokenize="none").score / 100
    assert corpus_bleu(cands, refs).value == pytest.approx(expected, abs=1e-9)
    with pytest.raises(ValueError):
        corpus_bleu(cands, refs[:1])


def test_perfect_mute_and_push():
    t = ["good", "morning"]
    assert perfect_mute(t, 1) == ["good", "UNK"]
    assert perfect_mute(perfect_mute(t, 1), 1) == perfect_mute(t, 1)
    assert perfect_push(t, 1, "attack") == ["good", "attack"]
    assert perfect_mute(perfect_push(t, 1, "attack"), 1) == perfect_mute(t, 1)
    assert t == ["good", "morning"]
    with pytest.raises(IndexError):
        perfect_mute(t, 2)
    with pytest.raises(ValueError):
        perfect_push(t, 0, "good")


def test_success_gate_and_identity():
    clean = "the cat sat on the mat".split()
    perfect = perfect_mute(clean, 1)
    assert all(success(clean, perfect, perfect, True, a) for a in ALPHAS)
    assert not any(success(clean, perfect, perfect, False, a) for a in ALPHAS)
    with pytest.raises(ValueError):
        success(clean, perfect, perfect, True, 0.0)


def test_ratio_of_052_succeeds_up_to_052(monkeypatch):
    monkeypatch.setattr(metrics, "bleu_ratio", lambda *args: 0.52)
    assert [success([], [], [], True, a) for a in ALPHAS] == [1, 1, 1, 1, 1, 0, 0, 0, 0, 0]
    assert success([], [], [], True, 0.52) == 1 and success([], [], [], True, 0.53) == 0


def test_invalid_records_are_counted_apart():
    clean = ["good"]
    perfect = perfect_mute(clean, 0)
    with pytest.raises(InvalidRecord):
        success(clean, ["x"], perfect, True, 0.5)
    rec = make_record(0, clean, ["x"], perfect, True)
    assert not rec.valid
    ok = make_record(1, ["a", "b", "c"], ["a", "UNK", "c"], ["a", "UNK", "c"], True)
    assert success_rates([rec, ok])[1.0] == 1.0
    assert "# invalid_records\t1" in format_report([rec, ok])


@settings(max_examples=100, deadline=None)
@given(words, words, st.booleans())
def test_success_is_monotone_in_alpha(clean, adv, goal):
    rec = make_record(0, clean, adv, perfect_mute(clean, 0), goal)
    if rec.valid:
        bits = [rec.bits[a] for a in ALPHAS]
        assert bits == sorted(bits, reverse=True)


def test_efficiency():
    fail = SimpleNamespace(edits=[1, 2, 3], queries=4)
    win = SimpleNamespace(edits=[1, 2], queries=3)
    rec = lambda goal: SimpleNamespace(goal=goal)  # noqa: E731
    none = efficiency([rec(False), rec(False)], [fail, fail])
    assert none.mean_changes is None and none.mean_queries == 4.0
    one = efficiency([rec(True), rec(False)], [win, fail])
    assert one.mean_changes == 2.0 and one.mean_queries == 3.5 and one.successes == 1
    with pytest.raises(ValueError):
        efficiency([rec(True)], [])


def test_sign_test():
    t = sign_test([2, 3, 4, 5, 1], [1, 1, 1, 1, 1])
    assert (t.wins, t.losses, t.ties) == (4, 0, 1)
    assert t.p_value == pytest.approx(1 / 16)
    assert sign_test([1, 1], [1, 1]).p_value == 1.0


def test_report_columns_are_stable():
    rec = make_record(3, ["a", "b"], ["a", "UNK"], ["a", "UNK"], True)
    lines = format_report([rec], header={"config": "abc"}).splitlines()
    assert lines[0] == "# config\tabc"
    assert lines[1].split("\t")[:5] == ["sentence_id", "goal", "bleu_adv", "bleu_perfect", "ratio"]
    assert lines[2].split("\t")[:2] == ["3", "1"]
