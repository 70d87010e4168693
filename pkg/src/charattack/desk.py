"""A small synthetic parallel corpus for desk-scale experiments.

The source side is a made-up language with a plural suffix on nouns and
adjectives after nouns; the target side puts adjectives first and uses
separate plural word forms. Content words have a second, less frequent
translation, so the target is not a function of the source and a trained
model stays uncertain. Word forms are random syllable strings drawn
from a seeded generator, so the corpus is reproducible from its seed.
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ParallelCorpus

_SRC_ONSETS = ("b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "kr", "st", "tr")
_SRC_VOWELS = ("a", "e", "i", "o", "u")
_TGT_ONSETS = ("b", "c", "d", "h", "j", "l", "m", "n", "p", "r", "s", "t", "w", "y", "ch", "sh", "th")
_TGT_VOWELS = ("a", "e", "i", "o", "u", "y", "ai", "ou")
_SRC_PLURAL = "en"


@dataclass(frozen=True)
class DeskLexicon:
    nouns: tuple[tuple[str, str, str], ...]  # source stem, target singular, target plural
    adjectives: tuple[tuple[str, str], ...]
    verbs: tuple[tuple[str, str], ...]
    determiners: tuple[tuple[str, str], ...]
    synonyms: dict = field(default_factory=dict)  # target word -> alternative
    synonym_rate: float = 0.0

    def render(self, word: str, rng: np.random.Generator) -> str:
        alt = self.synonyms.get(word)
        if alt is not None and rng.random() < self.synonym_rate:
            return alt
        return word


def _words(rng: np.random.Generator, count: int, onsets, vowels, syllables: tuple[int, int], taken: set) -> list[str]:
    out = []
    while len(out) < count:
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(onsets[rng.integers(len(onsets))] + vowels[rng.integers(len(vowels))] for _ in range(k))
        if rng.random() < 0.4:
            w += onsets[rng.integers(len(onsets))][0]
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_lexicon(seed: int = 0, nouns: int = 60, adjectives: int = 30, verbs: int = 30,
                 synonym_rate: float = 0.25, extra_syllables: int = 0, noun_synonyms: bool = True) -> DeskLexicon:
    rng = np.random.default_rng([seed, 7])
    src_taken: set[str] = set()
    tgt_taken: set[str] = set()
    x = extra_syllables
    n_src = _words(rng, nouns, _SRC_ONSETS, _SRC_VOWELS, (1 + x, 3 + x), src_taken)
    a_src = _words(rng, adjectives, _SRC_ONSETS, _SRC_VOWELS, (2 + x, 3 + x), src_taken)
    v_src = _words(rng, verbs, _SRC_ONSETS, _SRC_VOWELS, (2 + x, 3 + x), src_taken)
    d_src = _words(rng, 3, _SRC_ONSETS, _SRC_VOWELS, (1, 1), src_taken)
    n_tgt = _words(rng, nouns, _TGT_ONSETS, _TGT_VOWELS, (1, 2), tgt_taken)
    n_tgt_pl = []
    for w in n_tgt:
        pl = w + "s"
        tgt_taken.add(pl)
        n_tgt_pl.append(pl)
    a_tgt = _words(rng, adjectives, _TGT_ONSETS, _TGT_VOWELS, (1, 3), tgt_taken)
    v_tgt = _words(rng, verbs, _TGT_ONSETS, _TGT_VOWELS, (1, 3), tgt_taken)
    d_tgt = _words(rng, 3, _TGT_ONSETS, _TGT_VOWELS, (1, 1), tgt_taken)
    synonyms = {}
    if synonym_rate > 0:
        if noun_synonyms:
            alt_n = _words(rng, nouns, _TGT_ONSETS, _TGT_VOWELS, (1, 2), tgt_taken)
            for sg, pl, alt in zip(n_tgt, n_tgt_pl, alt_n):
                synonyms[sg], synonyms[pl] = alt, alt + "s"
        for w, alt in zip(a_tgt + v_tgt, _words(rng, adjectives + verbs, _TGT_ONSETS, _TGT_VOWELS, (1, 3), tgt_taken)):
            synonyms[w] = alt
    return DeskLexicon(tuple(zip(n_src, n_tgt, n_tgt_pl)), tuple(zip(a_src, a_tgt)),
                       tuple(zip(v_src, v_tgt)), tuple(zip(d_src, d_tgt)), synonyms, synonym_rate)


def _noun_phrase(lex: DeskLexicon, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    det_s, det_t = lex.determiners[rng.integers(len(lex.determiners))]
    stem, sg, pl = lex.nouns[rng.integers(len(lex.nouns))]
    plural = rng.random() < 0.4
    src, tgt = [det_s, stem + _SRC_PLURAL if plural else stem], [det_t]
    if rng.random() < 0.6:
        adj_s, adj_t = lex.adjectives[rng.integers(len(lex.adjectives))]
        src.append(adj_s)
        tgt.append(lex.render(adj_t, rng))
    tgt.append(lex.render(pl if plural else sg, rng))
    return src, tgt


def sample_pair(lex: DeskLexicon, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    subj_s, subj_t = _noun_phrase(lex, rng)
    verb_s, verb_t = lex.verbs[rng.integers(len(lex.verbs))]
    src, tgt = subj_s + [verb_s], subj_t + [lex.render(verb_t, rng)]
    if rng.random() < 0.7:
        obj_s, obj_t = _noun_phrase(lex, rng)
        src += obj_s
        tgt += obj_t
    return src, tgt


def make_desk_corpus(pairs: int = 2000, seed: int = 0, splits=(0.8, 0.1, 0.1),
                     **lexicon) -> dict[str, ParallelCorpus]:
    """Train/dev/test splits of synthetic sentence pairs with distinct source sides."""
    if abs(sum(splits) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    lex = make_lexicon(seed, **lexicon)
    rng = np.random.default_rng([seed, 11])
    seen, src, tgt = set(), [], []
    attempts = 0
    while len(src) < pairs:
        s, t = sample_pair(lex, rng)
        attempts += 1
        if attempts > 50 * pairs:
            raise RuntimeError(f"could only draw {len(src)} distinct pairs")
        if tuple(s) in seen:
            continue
        seen.add(tuple(s))
        src.append(s)
        tgt.append(t)
    full = ParallelCorpus(src, tgt)
    n_train = int(round(splits[0] * pairs))
    n_dev = int(round(splits[1] * pairs))
    return {"train": full.subset(range(n_train), "train"),
            "dev": full.subset(range(n_train, n_train + n_dev), "dev"),
            "test": full.subset(range(n_train + n_dev, pairs), "test")}


def write_desk_corpus(out_dir, **kwargs) -> dict[str, ParallelCorpus]:
    """Write ``{train,dev,test}.{src,tgt}`` into ``out_dir`` (the layout the CLI reads)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = make_desk_corpus(**kwargs)
    for name, corpus in splits.items():
        corpus.write(out / f"{name}.src", out / f"{name}.tgt")
    return splits


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m charattack.desk",
                                     description="Write the synthetic desk corpus as plain text files.")
    parser.add_argument("out_dir")
    parser.add_argument("--pairs", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--extra-syllables", type=int, default=1)
    args = parser.parse_args(argv)
    splits = write_desk_corpus(args.out_dir, pairs=args.pairs, seed=args.seed, extra_syllables=args.extra_syllables)
    print(" ".join(f"{k}={len(v)}" for k, v in splits.items()))


if __name__ == "__main__":
    main()
