"""BLEU, the BLEU-ratio success metric for controlled/targeted attacks, and efficiency stats."""

from __future__ import annotations

import io
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from scipy import stats

from .data import UNK

ALPHAS = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass(frozen=True)
class BleuScore:
    value: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    candidate_length: int
    reference_length: int


@dataclass
class _Stats:
    matches: list[int]
    totals: list[int]
    cand_len: int = 0
    ref_len: int = 0

    def add(self, other: "_Stats"):
        self.matches = [a + b for a, b in zip(self.matches, other.matches)]
        self.totals = [a + b for a, b in zip(self.totals, other.totals)]
        self.cand_len += other.cand_len
        self.ref_len += other.ref_len


def _ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[k:k + n]) for k in range(len(words) - n + 1))


def _stats(candidate: Sequence[str], reference: Sequence[str], max_n: int) -> _Stats:
    if not reference:
        raise ValueError("BLEU needs a nonempty reference")
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand, ref = _ngrams(candidate, n), _ngrams(reference, n)
        matches.append(sum(min(c, ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return _Stats(matches, totals, len(candidate), len(reference))


def _combine(s: _Stats, smoothing: float) -> BleuScore:
    if s.cand_len == 0 or s.matches[0] == 0:
        return BleuScore(0.0, tuple(0.0 for _ in s.matches), 0.0 if s.cand_len == 0 else 1.0,
                         s.cand_len, s.ref_len)
    precisions = [s.matches[0] / s.totals[0]]
    for m, t in zip(s.matches[1:], s.totals[1:]):
        precisions.append((m + smoothing) / (t + smoothing))
    bp = 1.0 if s.cand_len >= s.ref_len else math.exp(1.0 - s.ref_len / s.cand_len)
    if min(precisions) == 0.0:
        value = 0.0
    else:
        value = bp * math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    return BleuScore(value, tuple(precisions), bp, s.cand_len, s.ref_len)


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4, smoothing: float = 1.0) -> BleuScore:
    """Sentence BLEU; higher-order precisions get ``smoothing`` added to both counts."""
    return _combine(_stats(candidate, reference, max_n), smoothing)


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4,
                smoothing: float = 1.0) -> BleuScore:
    """BLEU over n-gram counts and lengths summed across the corpus."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not references:
        raise ValueError("empty corpus")
    total = _Stats([0] * max_n, [0] * max_n)
    for c, r in zip(candidates, references):
        total.add(_stats(c, r, max_n))
    return _combine(total, smoothing)


# success metric


def _check_position(words: Sequence[str], t: int):
    if not 0 <= t < len(words):
        raise IndexError(f"position {t} outside a translation of {len(words)} words")


def perfect_mute(translation: Sequence[str], t: int) -> list[str]:
    _check_position(translation, t)
    out = list(translation)
    out[t] = UNK
    return out


def perfect_push(translation: Sequence[str], t: int, word: str) -> list[str]:
    _check_position(translation, t)
    if translation[t] == word:
        raise ValueError(f"{word!r} is already at position {t}")
    out = list(translation)
    out[t] = word
    return out


class InvalidRecord(ValueError):
    """BLEU(T, T_p) is zero, so the BLEU ratio is undefined."""


def bleu_ratio(clean: Sequence[str], adversarial: Sequence[str], perfect: Sequence[str]) -> float:
    denom = bleu(perfect, clean).value
    if denom == 0.0:
        raise InvalidRecord("BLEU of the perfect translation is zero")
    return bleu(adversarial, clean).value / denom


def success(clean: Sequence[str], adversarial: Sequence[str], perfect: Sequence[str], goal: bool,
            alpha: float) -> int:
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    ratio = bleu_ratio(clean, adversarial, perfect)
    return int(bool(goal) and ratio >= alpha)


@dataclass
class SuccessRecord:
    sentence_id: int
    goal: bool
    bleu_adv: float
    bleu_perfect: float
    ratio: float | None
    bits: dict[float, int] = field(default_factory=dict)
    ungated: dict[float, int] = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return self.ratio is not None


def make_record(sentence_id: int, clean: Sequence[str], adversarial: Sequence[str], perfect: Sequence[str],
                goal: bool, alphas: Sequence[float] = ALPHAS) -> SuccessRecord:
    b_adv = bleu(adversarial, clean).value
    b_p = bleu(perfect, clean).value
    if b_p == 0.0:
        return SuccessRecord(sentence_id, bool(goal), b_adv, b_p, None)
    ratio = b_adv / b_p
    return SuccessRecord(sentence_id, bool(goal), b_adv, b_p, ratio,
                         {a: int(bool(goal) and ratio >= a) for a in alphas},
                         {a: int(ratio >= a) for a in alphas})


def success_rates(records: Iterable[SuccessRecord], alphas: Sequence[float] = ALPHAS,
                  gated: bool = True) -> dict[float, float]:
    """Fraction of valid records that succeed at each alpha (invalid records are excluded)."""
    valid = [r for r in records if r.valid]
    if not valid:
        return {a: float("nan") for a in alphas}
    return {a: sum((r.bits if gated else r.ungated)[a] for r in valid) / len(valid) for a in alphas}


@dataclass(frozen=True)
class EfficiencyStats:
    mean_changes: float | None
    mean_queries: float
    attacks: int
    successes: int


def efficiency(records: Sequence[SuccessRecord], results: Sequence) -> EfficiencyStats:
    """Mean edits over goal-satisfying attacks and mean queries over all attacks."""
    if len(records) != len(results):
        raise ValueError("records and results are not aligned")
    changes = [len(res.edits) for rec, res in zip(records, results) if rec.goal]
    queries = [res.queries for res in results]
    return EfficiencyStats(sum(changes) / len(changes) if changes else None,
                           sum(queries) / len(queries) if queries else 0.0, len(results), len(changes))


@dataclass(frozen=True)
class SignTest:
    wins: int
    losses: int
    ties: int
    p_value: float


def sign_test(a: Sequence[float], b: Sequence[float], alternative: str = "greater") -> SignTest:
    """Paired sign test of a against b; ties are dropped."""
    if len(a) != len(b):
        raise ValueError("paired samples differ in length")
    wins = sum(x > y for x, y in zip(a, b))
    losses = sum(x < y for x, y in zip(a, b))
    ties = len(a) - wins - losses
    if wins + losses == 0:
        return SignTest(0, 0, ties, 1.0)
    p = stats.binomtest(wins, wins + losses, 0.5, alternative=alternative).pvalue
    return SignTest(wins, losses, ties, float(p))


def _fmt(x) -> str:
    if x is None:
        return "NA"
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6f}"
    return str(x)


def format_report(records: Sequence[SuccessRecord], alphas: Sequence[float] = ALPHAS,
                  efficiency_stats: EfficiencyStats | None = None, header: dict | None = None) -> str:
    """TSV rows per sentence followed by a ``#``-prefixed summary block."""
    out = io.StringIO()
    for k, v in (header or {}).items():
        out.write(f"# {k}\t{v}\n")
    cols = ["sentence_id", "goal", "bleu_adv", "bleu_perfect", "ratio"] + [f"alpha_{a:.1f}" for a in alphas]
    out.write("\t".join(cols) + "\n")
    for r in records:
        bits = [_fmt(r.bits[a]) if r.valid else "NA" for a in alphas]
        out.write("\t".join([str(r.sentence_id), str(int(r.goal)), _fmt(r.bleu_adv), _fmt(r.bleu_perfect),
                             _fmt(r.ratio)] + bits) + "\n")
    gated, plain = success_rates(records, alphas), success_rates(records, alphas, gated=False)
    out.write("# summary\talpha\tsuccess_rate\tratio_only_rate\n")
    for a in alphas:
        out.write(f"# success\t{a:.1f}\t{_fmt(gated[a])}\t{_fmt(plain[a])}\n")
    out.write(f"# invalid_records\t{sum(not r.valid for r in records)}\n")
    if efficiency_stats is not None:
        out.write(f"# mean_changes\t{_fmt(efficiency_stats.mean_changes)}\n")
        out.write(f"# mean_queries\t{_fmt(efficiency_stats.mean_queries)}\n")
    return out.getvalue()
