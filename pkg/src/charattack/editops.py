"""Character edit operations on one-hot grids and their first-order gain estimates.

Each edit is a signed sparse change of the one-hot grid. Its estimated effect
on an objective is the inner product of the objective's gradient with that
change, which for a flip a -> b at (i, j) is grad[i, j, b] - grad[i, j, a].
Insert, delete and swap are sequences of such flips over the shifted part of
the word, with PAD entering or leaving at the word's end.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .data import PAD_ID, CharGrid, WordVocab


class Kind(enum.IntEnum):
    FLIP = 0
    INSERT = 1
    DELETE = 2
    SWAP = 3


ALL_KINDS = frozenset(Kind)


class InvalidEdit(ValueError):
    pass


@dataclass(frozen=True)
class EditOp:
    kind: Kind
    i: int
    j: int
    b: int = -1  # alphabet index for flips and inserts

    @property
    def sort_key(self) -> tuple[int, int, int, int]:
        return (self.i, self.j, int(self.kind), self.b)

    def __str__(self):
        arg = f",{self.b}" if self.kind in (Kind.FLIP, Kind.INSERT) else ""
        return f"{self.kind.name.lower()}({self.i},{self.j}{arg})"


def parse_kinds(spec: str | Iterable) -> frozenset[Kind]:
    if isinstance(spec, str):
        spec = [s for s in spec.replace("+", ",").split(",") if s.strip()]
    out = set()
    for s in spec:
        if isinstance(s, Kind):
            out.add(s)
            continue
        name = str(s).strip().upper()
        if name in ("FIDS", "ALL"):
            out |= ALL_KINDS
        elif name[:1] in "FIDS" and len(name) == 1:
            out.add(Kind("FIDS".index(name)))
        else:
            try:
                out.add(Kind[name])
            except KeyError:
                raise ValueError(f"unknown edit kind {s!r}") from None
    if not out:
        raise ValueError("no edit kinds given")
    return frozenset(out)


def validate(grid: CharGrid, op: EditOp) -> None:
    if not 0 <= op.i < grid.m:
        raise InvalidEdit(f"{op}: word index outside 0..{grid.m - 1}")
    length = int(grid.lengths[op.i])
    first_real = grid.alphabet.first_real
    if op.kind == Kind.FLIP:
        if not 0 <= op.j < length:
            raise InvalidEdit(f"{op}: position outside word of length {length}")
        if not first_real <= op.b < len(grid.alphabet):
            raise InvalidEdit(f"{op}: replacement is not a regular character")
        if op.b == grid.ids[op.i, op.j]:
            raise InvalidEdit(f"{op}: replacement equals current character")
    elif op.kind == Kind.INSERT:
        if length >= grid.n:
            raise InvalidEdit(f"{op}: word already has {grid.n} characters")
        if not 0 <= op.j <= length:
            raise InvalidEdit(f"{op}: position outside 0..{length}")
        if not first_real <= op.b < len(grid.alphabet):
            raise InvalidEdit(f"{op}: inserted symbol is not a regular character")
    elif op.kind == Kind.DELETE:
        if length <= 1:
            raise InvalidEdit(f"{op}: cannot delete from a one-character word")
        if not 0 <= op.j < length:
            raise InvalidEdit(f"{op}: position outside word of length {length}")
    elif op.kind == Kind.SWAP:
        if not (0 <= op.j and op.j + 1 < length):
            raise InvalidEdit(f"{op}: swap needs positions {op.j},{op.j + 1} inside length {length}")
    else:
        raise InvalidEdit(f"unknown kind {op.kind}")


def _edit_row(row: np.ndarray, length: int, op: EditOp) -> tuple[np.ndarray, int]:
    row = row.copy()
    j = op.j
    if op.kind == Kind.FLIP:
        row[j] = op.b
    elif op.kind == Kind.SWAP:
        row[j], row[j + 1] = row[j + 1], row[j]
    elif op.kind == Kind.DELETE:
        row[j:length - 1] = row[j + 1:length]
        row[length - 1] = PAD_ID
        length -= 1
    else:
        row[j + 1:length + 1] = row[j:length]
        row[j] = op.b
        length += 1
    return row, length


def apply_edit(grid: CharGrid, op: EditOp) -> CharGrid:
    validate(grid, op)
    ids = grid.ids.copy()
    lengths = grid.lengths.copy()
    ids[op.i], lengths[op.i] = _edit_row(grid.ids[op.i], int(grid.lengths[op.i]), op)
    return CharGrid(ids, lengths, grid.alphabet)


def apply_edits(grid: CharGrid, ops: Iterable[EditOp]) -> CharGrid:
    for op in ops:
        grid = apply_edit(grid, op)
    return grid


def edited_word(grid: CharGrid, op: EditOp) -> str:
    """The string word ``op.i`` becomes, without building a new grid."""
    w = grid.word(op.i)
    ch = grid.alphabet.char(op.b) if op.b >= 0 else ""
    j = op.j
    if op.kind == Kind.FLIP:
        return w[:j] + ch + w[j + 1:]
    if op.kind == Kind.INSERT:
        return w[:j] + ch + w[j:]
    if op.kind == Kind.DELETE:
        return w[:j] + w[j + 1:]
    return w[:j] + w[j + 1] + w[j] + w[j + 2:]


def op_vector(grid: CharGrid, op: EditOp) -> np.ndarray:
    """Dense (m, n, |V|) difference between the edited and the original one-hot grid."""
    return apply_edit(grid, op).one_hot - grid.one_hot


def _norm(count: float, normalize: str | None) -> float:
    if normalize in (None, "none"):
        return 1.0
    if count == 0:
        return 1.0
    if normalize == "l1":
        return 2.0 * count
    if normalize == "l2":
        return float(np.sqrt(2.0 * count))
    raise ValueError(f"unknown normalization {normalize!r}")


def estimate_gain(grad: np.ndarray, grid: CharGrid, op: EditOp, normalize: str | None = None) -> float:
    """First-order estimate of the objective change caused by ``op``.

    Written position by position; ``gain_table`` is the vectorized
    counterpart used by the attacks.
    """
    validate(grid, op)
    i, j = op.i, op.j
    row = list(grid.ids[i])
    length = int(grid.lengths[i])
    n = grid.n
    g = grad[i]

    def flip(p, new):
        old = row[p]
        return (g[p, new] - g[p, old], int(new != old))

    terms = []
    if op.kind == Kind.FLIP:
        terms.append(flip(j, op.b))
    elif op.kind == Kind.SWAP:
        terms += [flip(j, row[j + 1]), flip(j + 1, row[j])]
    elif op.kind == Kind.DELETE:
        for p in range(j, length):
            nxt = row[p + 1] if p + 1 < length else PAD_ID
            terms.append(flip(p, nxt))
    else:
        terms.append(flip(j, op.b))
        for p in range(j + 1, min(length, n - 1) + 1):
            terms.append(flip(p, row[p - 1]))
    value = float(sum(t[0] for t in terms))
    count = sum(t[1] for t in terms)
    if count == 0:
        return 0.0
    return value / _norm(count, normalize)


@dataclass
class Candidates:
    """Structurally valid edits of a grid with their estimated gains (parallel arrays)."""

    kind: np.ndarray
    i: np.ndarray
    j: np.ndarray
    b: np.ndarray
    gain: np.ndarray

    def __len__(self):
        return len(self.gain)

    def op(self, k: int) -> EditOp:
        return EditOp(Kind(int(self.kind[k])), int(self.i[k]), int(self.j[k]), int(self.b[k]))

    def ops(self) -> list[EditOp]:
        return [self.op(k) for k in range(len(self))]

    def ranked(self, per_word: bool = False) -> np.ndarray:
        """Indices by decreasing gain; ties go to lower (i, j, kind, b).

        With ``per_word`` the order is grouped by word index first.
        """
        keys = (self.b, self.kind, self.j, self.i, -self.gain)
        if per_word:
            keys = (self.b, self.kind, self.j, -self.gain, self.i)
        return np.lexsort(keys)

    def select(self, mask: np.ndarray) -> "Candidates":
        return Candidates(self.kind[mask], self.i[mask], self.j[mask], self.b[mask], self.gain[mask])


def gain_table(grad: np.ndarray, grid: CharGrid, kinds: Iterable[Kind] = ALL_KINDS,
               normalize: str | None = None, words: Iterable[int] | None = None) -> Candidates:
    """Every structurally valid edit of the requested kinds with its gain estimate.

    No-op edits (swapping equal characters) are left out.
    """
    kinds = frozenset(kinds)
    ids, lengths = grid.ids, grid.lengths
    m, n = ids.shape
    v = len(grid.alphabet)
    first_real = grid.alphabet.first_real
    cur = np.take_along_axis(grad, ids[..., None], axis=-1)[..., 0]
    pos = np.arange(n)[None, :]
    inside = pos < lengths[:, None]
    word_ok = np.ones(m, dtype=bool)
    if words is not None:
        word_ok[:] = False
        word_ok[list(words)] = True
    parts = []

    def add(kind, ii, jj, bb, gg):
        parts.append((np.full(len(gg), int(kind)), ii, jj, bb, gg))

    def scale(gain, count):
        if normalize in (None, "none"):
            return np.where(count > 0, gain, 0.0)
        div = 2.0 * count if normalize == "l1" else np.sqrt(2.0 * count)
        if normalize not in ("l1", "l2"):
            raise ValueError(f"unknown normalization {normalize!r}")
        return np.where(count > 0, gain / np.where(count > 0, div, 1.0), 0.0)

    real = np.arange(v) >= first_real
    if Kind.FLIP in kinds:
        mask = (inside & word_ok[:, None])[..., None] & real[None, None, :]
        mask &= np.arange(v)[None, None, :] != ids[..., None]
        ii, jj, bb = np.nonzero(mask)
        gain = grad[ii, jj, bb] - cur[ii, jj]
        add(Kind.FLIP, ii, jj, bb, scale(gain, np.ones(len(gain))))
    if Kind.SWAP in kinds and n > 1:
        nxt = ids[:, 1:]
        mask = (pos[:, 1:] < lengths[:, None]) & (ids[:, :-1] != nxt) & word_ok[:, None]
        ii, jj = np.nonzero(mask)
        gain = (grad[ii, jj, ids[ii, jj + 1]] - cur[ii, jj]
                + grad[ii, jj + 1, ids[ii, jj]] - cur[ii, jj + 1])
        add(Kind.SWAP, ii, jj, np.full(len(ii), -1), scale(gain, np.full(len(ii), 2.0)))
    if Kind.DELETE in kinds:
        left = np.concatenate([ids[:, 1:], np.full((m, 1), PAD_ID)], axis=1)
        d = np.take_along_axis(grad, left[..., None], axis=-1)[..., 0] - cur
        changed = (left != ids).astype(float)
        suffix = np.cumsum(d[:, ::-1], axis=1)[:, ::-1]
        suffix_c = np.cumsum(changed[:, ::-1], axis=1)[:, ::-1]
        mask = inside & (lengths[:, None] > 1) & word_ok[:, None]
        ii, jj = np.nonzero(mask)
        add(Kind.DELETE, ii, jj, np.full(len(ii), -1), scale(suffix[ii, jj], suffix_c[ii, jj]))
    if Kind.INSERT in kinds:
        right = np.concatenate([np.full((m, 1), PAD_ID), ids[:, :-1]], axis=1)
        e = np.take_along_axis(grad, right[..., None], axis=-1)[..., 0] - cur
        e[:, 0] = 0.0
        changed = (right != ids).astype(float)
        changed[:, 0] = 0.0
        # tail[j] = sum over p > j
        tail = np.concatenate([np.cumsum(e[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((m, 1))], axis=1)
        tail_c = np.concatenate([np.cumsum(changed[:, ::-1], axis=1)[:, ::-1][:, 1:], np.zeros((m, 1))], axis=1)
        mask = (pos <= lengths[:, None]) & (lengths[:, None] < n) & word_ok[:, None]
        mask = mask[..., None] & real[None, None, :]
        ii, jj, bb = np.nonzero(mask)
        gain = grad[ii, jj, bb] - cur[ii, jj] + tail[ii, jj]
        count = (bb != ids[ii, jj]).astype(float) + tail_c[ii, jj]
        add(Kind.INSERT, ii, jj, bb, scale(gain, count))
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return Candidates(empty, empty, empty, empty, np.zeros(0))
    cols = [np.concatenate([p[k] for p in parts]) for k in range(5)]
    return Candidates(cols[0].astype(np.int64), cols[1].astype(np.int64), cols[2].astype(np.int64),
                      cols[3].astype(np.int64), cols[4].astype(float))


def is_oov(grid: CharGrid, op: EditOp, vocab: WordVocab) -> bool:
    return not vocab.has_source(edited_word(grid, op))


def enumerate_candidates(grid: CharGrid, vocab: WordVocab, kinds: Iterable[Kind] = ALL_KINDS) -> list[EditOp]:
    """Valid edits whose resulting word is not a known source word, in (i, j, kind, b) order."""
    table = gain_table(np.zeros(grid.ids.shape + (len(grid.alphabet),)), grid, kinds)
    ops = [op for op in table.ops() if is_oov(grid, op, vocab)]
    return sorted(ops, key=lambda o: o.sort_key)
