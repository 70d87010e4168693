"""White-box and black-box adversarial search over character edits.

Every attack maximizes a linear function of the model's log-probabilities
under teacher forcing (see ``LossSpec``). ``AttackResult.queries`` and
``AttackResult.backward`` are the per-example passes the model executed
inside the attack call, read off the model's ``PassCounter``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

from .data import BOS_ID, EOS_ID, RESERVED_WORDS, CharGrid, WordVocab
from .editops import ALL_KINDS, Candidates, EditOp, Kind, apply_edit, apply_edits, edited_word, gain_table
from .model import DecodeResult, GoldTarget, TranslationModel, step_distribution


# loss specifications


@dataclass(frozen=True)
class Untargeted:
    """Maximize J(x, y), the log-loss of the gold (or reference) translation."""

    target: tuple[int, ...]

    def teacher_forcing(self, vocab: WordVocab):
        return GoldTarget(list(self.target)).teacher_forcing(vocab)

    def goal(self, ids: Sequence[int]) -> bool | None:
        return None


def _check_position(reference: Sequence[int], position: int):
    if not 0 <= position < len(reference):
        raise IndexError(f"position {position} outside a reference of {len(reference)} words")


@dataclass(frozen=True)
class Controlled:
    """Maximize -log p(w_t) at position t: push the word out of the translation."""

    reference: tuple[int, ...]
    position: int

    def __post_init__(self):
        _check_position(self.reference, self.position)

    @property
    def word(self) -> int:
        return self.reference[self.position]

    def teacher_forcing(self, vocab: WordVocab):
        t = self.position
        tgt_in = np.array([BOS_ID] + list(self.reference[:t]))
        targets = np.array(self.reference[: t + 1])
        coef = np.zeros(t + 1)
        coef[t] = -1.0
        return tgt_in, targets, coef

    def goal(self, ids: Sequence[int]) -> bool:
        return self.word not in ids


@dataclass(frozen=True)
class Targeted:
    """Maximize log p(t') at position t: push a chosen word into the translation."""

    reference: tuple[int, ...]
    position: int
    word: int

    def __post_init__(self):
        _check_position(self.reference, self.position)
        if self.word == self.reference[self.position]:
            raise ValueError("replacement word equals the word already at that position")

    def teacher_forcing(self, vocab: WordVocab):
        if not 0 <= self.word < vocab.target_size:
            raise ValueError(f"word id {self.word} outside the target vocabulary")
        t = self.position
        tgt_in = np.array([BOS_ID] + list(self.reference[:t]))
        targets = np.array(list(self.reference[:t]) + [self.word])
        coef = np.zeros(t + 1)
        coef[t] = 1.0
        return tgt_in, targets, coef

    def goal(self, ids: Sequence[int]) -> bool:
        return len(ids) > self.position and ids[self.position] == self.word


LossSpec = Union[Untargeted, Controlled, Targeted]


def objective(model: TranslationModel, grid: CharGrid, spec: LossSpec) -> float:
    return float(model.objectives([grid], [spec])[0])


def pick_position(reference: Sequence[int], rng: np.random.Generator) -> int | None:
    """A uniformly chosen non-reserved word of the reference, at its first occurrence."""
    words = sorted({w for w in reference if w >= len(RESERVED_WORDS)})
    if not words:
        return None
    return list(reference).index(words[rng.integers(len(words))])


def nth_likely_target(model: TranslationModel | None, grid: CharGrid | None, reference: DecodeResult,
                      t: int, n: int) -> int:
    """The n-th most likely word at step t, counting the emitted word as the first.

    The emitted word and the reserved UNK/BOS/EOS entries are skipped.
    """
    dist = step_distribution(reference, t)
    if not 2 <= n <= len(dist):
        raise ValueError(f"rank {n} outside [2, {len(dist)}]")
    emitted = reference.ids[t] if t < len(reference.ids) else EOS_ID
    order = [int(k) for k in np.argsort(-dist, kind="stable")
             if k != emitted and k >= len(RESERVED_WORDS)]
    if n - 2 >= len(order):
        raise ValueError(f"fewer than {n - 1} alternatives at step {t}")
    return order[n - 2]


# budgets and results


@dataclass(frozen=True)
class AttackBudget:
    max_edits: int

    def __post_init__(self):
        if self.max_edits < 1:
            raise ValueError("an attack budget allows at least one edit")

    @classmethod
    def for_grid(cls, grid: CharGrid, fraction: float = 0.2) -> "AttackBudget":
        if not 0 < fraction <= 1:
            raise ValueError("budget fraction must be in (0, 1]")
        # round first so that 0.2 * 15 does not ceil to 4
        return cls(max(1, math.ceil(round(fraction * grid.total_chars, 9))))


@dataclass
class AttackResult:
    grid: CharGrid
    edits: list[EditOp]
    queries: int
    backward: int
    trajectory: list[float] = field(default_factory=list)
    clean: list[int] | None = None
    adversarial: list[int] | None = None
    goal: bool | None = None
    objective: float | None = None

    @property
    def changes(self) -> int:
        return len(self.edits)


class _Counting:
    def __init__(self, model: TranslationModel | None):
        self.model = model
        self.f0 = model.counter.forward if model else 0
        self.b0 = model.counter.backward if model else 0

    def passes(self) -> tuple[int, int]:
        if self.model is None:
            return 0, 0
        return self.model.counter.forward - self.f0, self.model.counter.backward - self.b0


def _reference(spec: LossSpec) -> list[int] | None:
    return None if isinstance(spec, Untargeted) else list(spec.reference)


def _oov_ranked(cand: Candidates, grid: CharGrid, vocab: WordVocab, limit: int | None = None,
                per_word: bool = False) -> list[int]:
    """Candidate indices in rank order whose edited word is out of the source vocabulary.

    With ``per_word`` only the best such candidate of each word is kept.
    """
    out, done = [], set()
    for k in cand.ranked(per_word=per_word):
        i = int(cand.i[k])
        if per_word and i in done:
            continue
        op = cand.op(k)
        if vocab.has_source(edited_word(grid, op)):
            continue
        out.append(int(k))
        done.add(i)
        if limit is not None and len(out) >= limit:
            break
    return out


def _goal_checks(model: TranslationModel, grids: Sequence[CharGrid], spec: LossSpec):
    """Greedy translations and goal flags; skipped (no passes) for untargeted specs."""
    if isinstance(spec, Untargeted):
        return [None] * len(grids), [None] * len(grids)
    decodes = model.greedy_decode(list(grids))
    return [d.ids for d in decodes], [spec.goal(d.ids) for d in decodes]


# white-box strategies


def one_shot_attack(model: TranslationModel, grid: CharGrid, spec: LossSpec,
                    kinds: Iterable[Kind] = ALL_KINDS, normalize: str | None = None,
                    grad: np.ndarray | None = None) -> AttackResult:
    """Best estimated OOV edit of every word, from a single gradient, applied together.

    ``grad`` lets a caller that already holds the gradient (batched training)
    skip the pass; the result then reports zero passes.
    """
    count = _Counting(model)
    if grad is None:
        _, grads = model.objective_and_gradients([grid], [spec])
        grad = grads[0]
    cand = gain_table(grad, grid, kinds, normalize)
    picks = _oov_ranked(cand, grid, model.vocab, per_word=True)
    edits = [cand.op(k) for k in picks]
    adv = apply_edits(grid, edits)
    f, b = count.passes()
    return AttackResult(adv, edits, f, b, clean=_reference(spec))


class _State:
    __slots__ = ("grid", "edits", "trajectory", "value", "grad", "decoded", "goal")

    def __init__(self, grid, edits, trajectory, value, grad=None, decoded=None, goal=None):
        self.grid, self.edits, self.trajectory = grid, edits, trajectory
        self.value, self.grad, self.decoded, self.goal = value, grad, decoded, goal


def _evaluate(model, grids, spec, with_grad: bool):
    if with_grad:
        return model.objective_and_gradients(list(grids), [spec] * len(grids))
    return model.objectives(list(grids), [spec] * len(grids)), [None] * len(grids)


def _finish(state: _State, count: _Counting, spec: LossSpec) -> AttackResult:
    f, b = count.passes()
    return AttackResult(state.grid, list(state.edits), f, b, list(state.trajectory), _reference(spec),
                        state.decoded, state.goal, state.value)


def greedy_attack(model: TranslationModel, grid: CharGrid, spec: LossSpec, budget: AttackBudget | None = None,
                  kinds: Iterable[Kind] = ALL_KINDS, normalize: str | None = None) -> AttackResult:
    """Apply the globally best estimated edit, re-evaluate, repeat.

    Stops when the budget is spent, the goal is met, or no OOV edit is left.
    Returns the goal-satisfying state if there is one, otherwise the edited
    state with the highest true objective.
    """
    budget = budget or AttackBudget.for_grid(grid)
    count = _Counting(model)
    vals, grads = _evaluate(model, [grid], spec, True)
    state = _State(grid, (), (), float(vals[0]), grads[0])
    best = None
    for step in range(budget.max_edits):
        cand = gain_table(state.grad, state.grid, kinds, normalize)
        picks = _oov_ranked(cand, state.grid, model.vocab, limit=1)
        if not picks:
            break
        op = cand.op(picks[0])
        new = apply_edit(state.grid, op)
        vals, grads = _evaluate(model, [new], spec, step + 1 < budget.max_edits)
        decoded, goals = _goal_checks(model, [new], spec)
        state = _State(new, state.edits + (op,), state.trajectory + (float(vals[0]),), float(vals[0]),
                       grads[0], decoded[0], goals[0])
        if best is None or state.value > best.value:
            best = state
        if state.goal:
            best = state
            break
    return _finish(best or state, count, spec)


def beam_attack(model: TranslationModel, grid: CharGrid, spec: LossSpec, budget: AttackBudget | None = None,
                width: int = 5, kinds: Iterable[Kind] = ALL_KINDS, normalize: str | None = None,
                anchor: bool = True) -> AttackResult:
    """Beam search over edit sequences.

    Children are scored by the parent's true objective plus the child's
    estimated gain; the ``width`` best distinct grids survive and get their
    true objective (and, while budget remains, gradient) computed in one
    batch. With ``anchor`` the child that greedy search would pick from the
    anchored lineage always survives, so the result never falls below
    ``greedy_attack``. Width 1 reproduces ``greedy_attack`` edit for edit.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    budget = budget or AttackBudget.for_grid(grid)
    count = _Counting(model)
    vals, grads = _evaluate(model, [grid], spec, True)
    beams = [_State(grid, (), (), float(vals[0]), grads[0])]
    anchor_idx = 0
    best = None
    for step in range(budget.max_edits):
        pool = []  # (sort key, parent index, op, child grid, is greedy child)
        for pi, parent in enumerate(beams):
            cand = gain_table(parent.grad, parent.grid, kinds, normalize)
            for rank, k in enumerate(_oov_ranked(cand, parent.grid, model.vocab, limit=width)):
                op = cand.op(k)
                g = float(cand.gain[k])
                key = (-(parent.value + g), -g) + op.sort_key + (pi,)
                pool.append((key, pi, op, apply_edit(parent.grid, op), pi == anchor_idx and rank == 0))
        if not pool:
            break
        pool.sort(key=lambda e: e[0])
        chosen, seen = [], {}
        for entry in pool:
            gkey = entry[3].key()
            if gkey in seen:
                if entry[4]:
                    seen[gkey][1] = True
                continue
            item = [entry, entry[4]]
            seen[gkey] = item
            chosen.append(item)
        survivors = chosen[:width]
        if anchor and not any(flag for _, flag in survivors):
            greedy_child = next((item for item in chosen if item[1]), None)
            if greedy_child is not None:
                survivors[-1] = greedy_child
        with_grad = step + 1 < budget.max_edits
        grids = [e[3] for e, _ in survivors]
        # the anchored child runs on its own so its numbers match greedy bit for bit
        solo = [k for k, (_, flag) in enumerate(survivors) if flag] if anchor else []
        rest = [k for k in range(len(grids)) if k not in solo]
        vals, grads = [0.0] * len(grids), [None] * len(grids)
        decoded, goals = [None] * len(grids), [None] * len(grids)
        for group in (solo, rest):
            if not group:
                continue
            sub = [grids[k] for k in group]
            v_, g_ = _evaluate(model, sub, spec, with_grad)
            d_, ok_ = _goal_checks(model, sub, spec)
            for j, k in enumerate(group):
                vals[k], grads[k], decoded[k], goals[k] = v_[j], g_[j], d_[j], ok_[j]
        parents = beams
        beams = []
        anchor_idx = -1
        for k, ((_, pi, op, child, _), flag) in enumerate(survivors):
            parent = parents[pi]
            v = float(vals[k])
            beams.append(_State(child, parent.edits + (op,), parent.trajectory + (v,), v,
                                grads[k], decoded[k], goals[k]))
            if flag:
                anchor_idx = k
        hits = [s for s in beams if s.goal]
        if hits:
            best = max(hits, key=lambda s: s.value)
            break
        top = max(beams, key=lambda s: s.value)
        if best is None or top.value > best.value:
            best = top
    if best is None:
        best = beams[0]
    return _finish(best, count, spec)


# black-box


def _random_edit(grid: CharGrid, vocab: WordVocab, kinds: Iterable[Kind], rng: np.random.Generator,
                 word: int | None = None) -> EditOp | None:
    """A kind drawn uniformly among those with an OOV edit, then an edit of it drawn uniformly."""
    table = gain_table(np.zeros(grid.ids.shape + (len(grid.alphabet),)), grid, kinds,
                       words=None if word is None else [word])
    by_kind: dict[int, list[EditOp]] = {}
    for op in table.ops():
        if not vocab.has_source(edited_word(grid, op)):
            by_kind.setdefault(int(op.kind), []).append(op)
    if not by_kind:
        return None
    kind = sorted(by_kind)[rng.integers(len(by_kind))]
    options = by_kind[kind]
    return options[rng.integers(len(options))]


def black_box_attack(grid: CharGrid, vocab: WordVocab, kinds: Iterable[Kind], rng: np.random.Generator,
                     budget: AttackBudget | None = None, model: TranslationModel | None = None,
                     spec: LossSpec | None = None) -> AttackResult:
    """Random OOV edits under the same budget rules as the white-box attacks.

    Without a budget, one random edit per word is applied in parallel.
    With a budget, edits are applied one at a time, each followed by a goal
    check (one query) when a model and a controlled/targeted spec are given.
    """
    kinds = frozenset(kinds)
    count = _Counting(model)
    checking = model is not None and spec is not None and not isinstance(spec, Untargeted)
    clean = _reference(spec) if spec is not None else None
    if budget is None:
        edits = [op for i in range(grid.m) if (op := _random_edit(grid, vocab, kinds, rng, word=i))]
        adv = apply_edits(grid, edits)
        decoded, goal = None, None
        if checking:
            d, g = _goal_checks(model, [adv], spec)
            decoded, goal = d[0], g[0]
        f, b = count.passes()
        return AttackResult(adv, edits, f, b, clean=clean, adversarial=decoded, goal=goal)
    edits, decoded, goal = [], None, (False if checking else None)
    for _ in range(budget.max_edits):
        op = _random_edit(grid, vocab, kinds, rng)
        if op is None:
            break
        grid = apply_edit(grid, op)
        edits.append(op)
        if checking:
            d, g = _goal_checks(model, [grid], spec)
            decoded, goal = d[0], g[0]
            if goal:
                break
    f, b = count.passes()
    return AttackResult(grid, edits, f, b, clean=clean, adversarial=decoded, goal=goal)


def complete(model: TranslationModel, result: AttackResult, source: CharGrid, beam_width: int = 1) -> AttackResult:
    """Fill in missing clean/adversarial translations; these passes are not charged as queries."""
    if result.clean is None:
        result.clean = model.decode(source, beam_width).ids
    if result.adversarial is None:
        result.adversarial = model.decode(result.grid, beam_width).ids
    return result
