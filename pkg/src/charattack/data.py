"""Corpora, alphabets, vocabularies, one-hot character grids and checkpoints."""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD = "<pad>"
BOUNDARY = "<w>"
UNK_CHAR = "<?>"
RESERVED_CHARS = (PAD, BOUNDARY, UNK_CHAR)
PAD_ID, BOUNDARY_ID, UNK_CHAR_ID = 0, 1, 2

UNK = "UNK"
BOS = "<s>"
EOS = "</s>"
RESERVED_WORDS = (UNK, BOS, EOS)
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2

DEFAULT_MAX_CHARS = 20


class CorpusError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Alphabet:
    """Characters seen on the source side, after the reserved symbols."""

    chars: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {c: k for k, c in enumerate(self.chars)})

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Alphabet":
        real = sorted(set(chars) - set(RESERVED_CHARS))
        return cls(RESERVED_CHARS + tuple(real))

    def __len__(self):
        return len(self.chars)

    @property
    def first_real(self) -> int:
        return len(RESERVED_CHARS)

    def index(self, ch: str) -> int:
        return self._index.get(ch, UNK_CHAR_ID)

    def char(self, idx: int) -> str:
        if idx == UNK_CHAR_ID:
            return "�"
        return self.chars[idx]


@dataclass(frozen=True)
class WordVocab:
    source: tuple[str, ...]
    target: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_src", frozenset(self.source))
        object.__setattr__(self, "_tgt", {w: k for k, w in enumerate(self.target)})

    @property
    def target_size(self) -> int:
        return len(self.target)

    def has_source(self, word: str) -> bool:
        return word in self._src

    def has_target(self, word: str) -> bool:
        return word in self._tgt

    def target_id(self, word: str) -> int:
        return self._tgt.get(word, UNK_ID)

    def encode_target(self, words: Sequence[str]) -> list[int]:
        return [self._tgt.get(w, UNK_ID) for w in words]

    def decode_target(self, ids: Iterable[int]) -> list[str]:
        return [self.target[k] for k in ids]


@dataclass(frozen=True, eq=False)
class CharGrid:
    """A sentence as an (m, n) array of alphabet indices.

    The one-hot tensor ``one_hot`` is (m, n, |V|); positions past a word's
    length hold PAD.
    """

    ids: np.ndarray
    lengths: np.ndarray
    alphabet: Alphabet = field(repr=False)

    @property
    def m(self) -> int:
        return self.ids.shape[0]

    @property
    def n(self) -> int:
        return self.ids.shape[1]

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros(self.ids.shape + (len(self.alphabet),))
        np.put_along_axis(out, self.ids[..., None], 1.0, axis=-1)
        return out

    def word(self, i: int) -> str:
        return "".join(self.alphabet.char(c) for c in self.ids[i, : self.lengths[i]])

    def words(self) -> list[str]:
        return [self.word(i) for i in range(self.m)]

    def key(self) -> bytes:
        return self.ids.tobytes()

    def __eq__(self, other):
        return isinstance(other, CharGrid) and np.array_equal(self.ids, other.ids) \
            and np.array_equal(self.lengths, other.lengths)

    def __hash__(self):
        return hash(self.key())

    @property
    def total_chars(self) -> int:
        return int(self.lengths.sum())


def encode_sentence(sentence: Sequence[str], alphabet: Alphabet, n: int = DEFAULT_MAX_CHARS) -> CharGrid:
    if not sentence:
        raise ValueError("cannot encode an empty sentence")
    ids = np.full((len(sentence), n), PAD_ID, dtype=np.int64)
    lengths = np.zeros(len(sentence), dtype=np.int64)
    for i, w in enumerate(sentence):
        if not w:
            raise ValueError(f"word {i} is empty")
        w = w[:n]
        ids[i, : len(w)] = [alphabet.index(c) for c in w]
        lengths[i] = len(w)
    return CharGrid(ids, lengths, alphabet)


@dataclass
class ParallelCorpus:
    source: list[list[str]]
    target: list[list[str]]
    split: str = "train"

    def __post_init__(self):
        if len(self.source) != len(self.target):
            raise CorpusError(f"line count mismatch {len(self.source)} vs {len(self.target)}")

    def __len__(self):
        return len(self.source)

    def __iter__(self):
        return iter(zip(self.source, self.target))

    def subset(self, indices: Iterable[int], split: str | None = None) -> "ParallelCorpus":
        idx = list(indices)
        return ParallelCorpus([self.source[k] for k in idx], [self.target[k] for k in idx],
                              split or self.split)

    def write(self, source_path, target_path):
        Path(source_path).write_text("".join(" ".join(s) + "\n" for s in self.source), encoding="utf-8")
        Path(target_path).write_text("".join(" ".join(t) + "\n" for t in self.target), encoding="utf-8")


def _read_lines(path) -> list[list[str]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    sentences = []
    for lineno, raw in enumerate(path.read_bytes().splitlines(), start=1):
        try:
            line = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorpusError(f"{path}: invalid UTF-8 on line {lineno}") from exc
        words = line.split()
        if not words:
            raise CorpusError(f"{path}: empty sentence on line {lineno}")
        sentences.append(words)
    return sentences


def load_corpus(source_path, target_path, split: str = "train") -> ParallelCorpus:
    src = _read_lines(source_path)
    tgt = _read_lines(target_path)
    if len(src) != len(tgt):
        raise CorpusError(f"line count mismatch {len(src)} vs {len(tgt)}")
    return ParallelCorpus(src, tgt, split)


def build_vocabs(corpus: ParallelCorpus, target_cap: int = 50_000, min_freq: int = 1) -> tuple[Alphabet, WordVocab]:
    if len(corpus) == 0:
        raise CorpusError("cannot build vocabularies from an empty corpus")
    chars = {c for sent in corpus.source for w in sent for c in w}
    src_counts = Counter(w for sent in corpus.source for w in sent)
    tgt_counts = Counter(w for sent in corpus.target for w in sent)
    for w in RESERVED_WORDS:
        tgt_counts.pop(w, None)
    ranked = sorted(((-c, w) for w, c in tgt_counts.items() if c >= min_freq))
    target = RESERVED_WORDS + tuple(w for _, w in ranked[:target_cap])
    source = tuple(sorted(w for w, c in src_counts.items() if c >= min_freq))
    return Alphabet.from_chars(chars), WordVocab(source, target)


def load_lexicon(path) -> dict[str, list[str]]:
    """Read ``word<TAB>variant1 variant2 ...`` lines."""
    lexicon: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"{path}: line {lineno} has no tab separator")
        word, rest = line.split("\t", 1)
        variants = [v for v in rest.split() if v != word]
        if variants:
            lexicon.setdefault(word, []).extend(variants)
    return lexicon


# checkpoints

MAGIC = b"CHARADV\x00"
FORMAT_VERSION = 1
_DTYPES = {"<f8": np.float64, "<f4": np.float32, "<i8": np.int64}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    alphabet: Alphabet
    vocab: WordVocab
    metadata: dict = field(default_factory=dict)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _pack_list(items: Sequence[str]) -> bytes:
    return struct.pack("<I", len(items)) + b"".join(_pack_str(s) for s in items)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + k]
        self.pos += k
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def str(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def list(self) -> list[str]:
        return [self.str() for _ in range(self.u32())]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    tensors = list(ckpt.params.items()) + [("optim." + k, v) for k, v in ckpt.optimizer_state.items()]
    out = [MAGIC, struct.pack("<I", ckpt.version),
           _pack_str(json.dumps(ckpt.config, sort_keys=True)),
           _pack_str(json.dumps(ckpt.metadata, sort_keys=True)),
           _pack_list(ckpt.alphabet.chars), _pack_list(ckpt.vocab.source), _pack_list(ckpt.vocab.target),
           struct.pack("<I", len(tensors))]
    payloads = []
    for name, arr in tensors:
        arr = np.asarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        out += [_pack_str(name), _pack_str(dtype), struct.pack("<I", arr.ndim),
                struct.pack(f"<{arr.ndim}I", *arr.shape)]
        payloads.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    Path(path).write_bytes(b"".join(out + payloads))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    r = _Reader(buf)
    r.take(len(MAGIC))
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    config = json.loads(r.str())
    metadata = json.loads(r.str())
    alphabet = Alphabet(tuple(r.list()))
    vocab = WordVocab(tuple(r.list()), tuple(r.list()))
    manifest = []
    for _ in range(r.u32()):
        name, dtype, ndim = r.str(), r.str(), r.u32()
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        manifest.append((name, dtype, shape))
    params, optim = {}, {}
    for name, dtype, shape in manifest:
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(count * np.dtype(dtype).itemsize)
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(_DTYPES[dtype])
        if name.startswith("optim."):
            optim[name[len("optim."):]] = arr
        else:
            params[name] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return Checkpoint(config, params, alphabet, vocab, metadata, optim, version)
