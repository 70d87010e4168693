"""Black-box noise channels and FIDS (flip/insert/delete/swap) distribution fitting."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .editops import Kind

KINDS = (Kind.FLIP, Kind.INSERT, Kind.DELETE, Kind.SWAP)


@dataclass(frozen=True)
class KeyboardLayout:
    neighbors: Mapping[str, str]

    def __post_init__(self):
        for ch, nbs in self.neighbors.items():
            for nb in nbs:
                if ch not in self.neighbors.get(nb, ""):
                    raise ValueError(f"layout adjacency is not symmetric: {ch!r} -> {nb!r}")

    def of(self, ch: str) -> str:
        if ch in self.neighbors:
            return self.neighbors[ch]
        low = ch.lower()
        if low != ch and low in self.neighbors:
            return self.neighbors[low].upper()
        return ""


def load_layout(path=None) -> KeyboardLayout:
    """Read ``char<TAB>neighbors`` lines; without a path, the bundled QWERTY layout."""
    if path is None:
        text = resources.files("charattack").joinpath("resources/qwerty.tsv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ch, nbs = line.split("\t")
        except ValueError:
            raise ValueError(f"layout line {lineno}: expected char<TAB>neighbors") from None
        if len(ch) != 1 or not nbs:
            raise ValueError(f"layout line {lineno}: bad entry {line!r}")
        table[ch] = nbs
    return KeyboardLayout(table)


@dataclass(frozen=True)
class NoiseDistribution:
    """Probabilities of flip, insert, delete and swap (in that order)."""

    probs: tuple[float, float, float, float]
    residual: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.shape != (4,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a distribution over four kinds: {self.probs}")

    @classmethod
    def uniform(cls) -> "NoiseDistribution":
        return cls((0.25, 0.25, 0.25, 0.25))

    def prob(self, kind: Kind) -> float:
        return self.probs[int(kind)]

    def sample(self, rng: np.random.Generator, allowed: Sequence[Kind] = KINDS) -> Kind:
        p = np.array([self.probs[int(k)] for k in allowed])
        if p.sum() <= 0:
            p = np.ones(len(allowed))
        return allowed[rng.choice(len(allowed), p=p / p.sum())]


def key_noise(word: str, layout: KeyboardLayout, rng: np.random.Generator) -> str:
    """Replace one random character by a random keyboard neighbour.

    Words with no character on the layout come back unchanged.
    """
    positions = [k for k, ch in enumerate(word) if layout.of(ch)]
    if not positions:
        return word
    k = positions[rng.integers(len(positions))]
    nbs = layout.of(word[k])
    return word[:k] + nbs[rng.integers(len(nbs))] + word[k + 1:]


def rand_scramble(word: str, rng: np.random.Generator, interior: bool = False) -> str:
    """Random permutation of the characters, redrawn while it reproduces the word.

    With ``interior`` the first and last characters stay in place. Words that
    no permutation can change come back unchanged.
    """
    lo, hi = (1, len(word) - 1) if interior else (0, len(word))
    middle = word[lo:hi]
    if len(set(middle)) < 2:
        return word
    chars = list(middle)
    while True:
        perm = "".join(chars[k] for k in rng.permutation(len(chars)))
        if perm != middle:
            return word[:lo] + perm + word[hi:]


def nat_noise(word: str, lexicon: Mapping[str, Sequence[str]], rng: np.random.Generator) -> str:
    variants = lexicon.get(word)
    if not variants:
        return word
    return variants[rng.integers(len(variants))]


def valid_kinds(word: str) -> list[Kind]:
    kinds = [Kind.FLIP, Kind.INSERT]
    if len(word) > 1:
        kinds.append(Kind.DELETE)
        if len(set(word)) > 1:
            kinds.append(Kind.SWAP)
    return kinds


def fids_edit(word: str, kind: Kind, charset: str, rng: np.random.Generator) -> str:
    """One random edit of the given kind, drawn uniformly over its valid choices."""
    n = len(word)
    if kind == Kind.FLIP:
        choices = [(j, c) for j in range(n) for c in charset if c != word[j]]
        j, c = choices[rng.integers(len(choices))]
        return word[:j] + c + word[j + 1:]
    if kind == Kind.INSERT:
        j = int(rng.integers(n + 1))
        c = charset[rng.integers(len(charset))]
        return word[:j] + c + word[j:]
    if kind == Kind.DELETE:
        if n < 2:
            raise ValueError("cannot delete from a one-character word")
        j = int(rng.integers(n))
        return word[:j] + word[j + 1:]
    spots = [j for j in range(n - 1) if word[j] != word[j + 1]]
    if not spots:
        raise ValueError(f"no swap changes {word!r}")
    j = spots[rng.integers(len(spots))]
    return word[:j] + word[j + 1] + word[j] + word[j + 2:]


def fids_noise(word: str, dist: NoiseDistribution, charset: str, rng: np.random.Generator) -> str:
    kind = dist.sample(rng, valid_kinds(word))
    return fids_edit(word, kind, charset, rng)


def classify_pair(word: str, variant: str) -> Kind | None:
    """The single FIDS edit turning ``word`` into ``variant``, or None for anything else."""
    lw, lv = len(word), len(variant)
    if lw == lv:
        diff = [k for k in range(lw) if word[k] != variant[k]]
        if len(diff) == 1:
            return Kind.FLIP
        if (len(diff) == 2 and diff[1] == diff[0] + 1
                and word[diff[0]] == variant[diff[1]] and word[diff[1]] == variant[diff[0]]):
            return Kind.SWAP
        return None
    if lv == lw + 1:
        longer, shorter, kind = variant, word, Kind.INSERT
    elif lv == lw - 1:
        longer, shorter, kind = word, variant, Kind.DELETE
    else:
        return None
    k = 0
    while k < len(shorter) and shorter[k] == longer[k]:
        k += 1
    return kind if longer[k + 1:] == shorter[k:] else None


def fit_fids_distribution(lexicon: Mapping[str, Sequence[str]]) -> NoiseDistribution:
    """Proportions of single FIDS edits among (word, variant) pairs.

    Pairs that are not one FIDS edit away go to ``residual`` (as a fraction
    of all pairs) and are left out of the proportions.
    """
    counts = np.zeros(4)
    other = 0
    for word, variants in lexicon.items():
        for v in variants:
            kind = classify_pair(word, v)
            if kind is None:
                other += 1
            else:
                counts[int(kind)] += 1
    total = counts.sum() + other
    if total == 0:
        raise ValueError("empty lexicon")
    if counts.sum() == 0:
        raise ValueError("no pair in the lexicon is a single FIDS edit")
    return NoiseDistribution(tuple(float(c) for c in counts / counts.sum()), other / total)


def synthetic_lexicon(words: Sequence[str], dist: NoiseDistribution, pairs: int, charset: str,
                      rng: np.random.Generator) -> dict[str, list[str]]:
    """Lexicon of ``pairs`` (word, variant) entries drawn from known FIDS probabilities."""
    lexicon: dict[str, list[str]] = {}
    for _ in range(pairs):
        w = words[rng.integers(len(words))]
        lexicon.setdefault(w, []).append(fids_noise(w, dist, charset, rng))
    return lexicon


Channel = Callable[[str, np.random.Generator], str]


def make_channel(name: str, *, layout: KeyboardLayout | None = None, lexicon=None,
                 dist: NoiseDistribution | None = None, charset: str = "") -> Channel:
    name = name.lower()
    if name == "key":
        layout = layout or load_layout()
        return lambda w, rng: key_noise(w, layout, rng)
    if name == "rand":
        return lambda w, rng: rand_scramble(w, rng)
    if name == "nat":
        if lexicon is None:
            raise ValueError("nat noise needs a lexicon")
        return lambda w, rng: nat_noise(w, lexicon, rng)
    if name in ("fids", "fids-b"):
        if not charset:
            raise ValueError("fids noise needs a character set")
        d = dist or NoiseDistribution.uniform()
        return lambda w, rng: fids_noise(w, d, charset, rng)
    raise ValueError(f"unknown noise channel {name!r}")


def noise_sentence(words: Sequence[str], channel: Channel, rng: np.random.Generator) -> list[str]:
    return [channel(w, rng) for w in words]
