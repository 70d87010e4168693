"""Mini-batch training: regular, white-box adversarial, black-box noisy and ensemble."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Checkpoint, CharGrid, ParallelCorpus
from .editops import Kind, apply_edits, edited_word, gain_table
from .model import GoldTarget, TranslationModel
from .noise import KeyboardLayout, NoiseDistribution, make_channel, valid_kinds

MODES = ("none", "white-fids", "black-fids", "black-key", "black-rand", "black-nat", "ensemble")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    optimizer: str = "sgd"
    learning_rate: float = 0.5
    clip: float = 5.0
    seed: int = 0
    mode: str = "none"
    mixing: tuple[float, float] = (0.5, 0.5)  # clean, adversarial share of update steps
    white_fraction: float = 0.5  # ensemble only
    black_sources: tuple[str, ...] = ("nat", "rand")
    noise: NoiseDistribution | None = None
    decay_on_plateau: bool = True
    weight_decay: float = 0.0  # L2 penalty coefficient added to the gradient

    def __post_init__(self):
        self.mixing = tuple(self.mixing)
        self.black_sources = tuple(self.black_sources)
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown training mode {self.mode!r}")
        if len(self.mixing) != 2 or min(self.mixing) < 0 or abs(sum(self.mixing) - 1.0) > 1e-9:
            raise ValueError(f"mixing shares must be two nonnegative numbers summing to 1: {self.mixing}")
        if not 0 <= self.white_fraction <= 1:
            raise ValueError("white fraction must be in [0, 1]")
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["noise"] = list(self.noise.probs) if self.noise else None
        return d


@dataclass
class EpochStats:
    epoch: int
    clean_loss: float
    adversarial_loss: float | None
    dev_loss: float | None
    seconds: float
    learning_rate: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    generation_forward: int = 0  # batched passes spent making adversarial examples
    generation_backward: int = 0

    def to_tsv(self, timing: bool = True) -> str:
        """Per-epoch rows; ``timing=False`` drops wall-clock seconds so reruns compare equal."""
        head = ["epoch", "clean_loss", "adversarial_loss", "dev_loss"] + (["seconds"] if timing else [])
        rows = ["\t".join(head + ["learning_rate"])]
        for e in self.epochs:
            adv = "NA" if e.adversarial_loss is None else f"{e.adversarial_loss:.6f}"
            dev = "NA" if e.dev_loss is None else f"{e.dev_loss:.6f}"
            cells = [str(e.epoch), f"{e.clean_loss:.6f}", adv, dev] + ([f"{e.seconds:.3f}"] if timing else [])
            rows.append("\t".join(cells + [f"{e.learning_rate:g}"]))
        return "\n".join(rows) + "\n"


# optimizers


class _SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] -= self.lr * g

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load(self, state):
        pass


class _Adam:
    def __init__(self, lr: float, params, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self):
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["t"] = np.array([self.t], dtype=np.int64)
        return out

    def load(self, state):
        if not state:
            return
        self.t = int(state["t"][0])
        for k in self.m:
            self.m[k] = state[f"m.{k}"].copy()
            self.v[k] = state[f"v.{k}"].copy()


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _dropout(rate: float, rng: np.random.Generator):
    if rate <= 0:
        return None

    def apply(t):
        keep = (rng.random(t.shape) >= rate).astype(t.data.dtype) / (1.0 - rate)
        return t * keep
    return apply


def _update(model: TranslationModel, opt, grids: Sequence[CharGrid], targets: Sequence[Sequence[int]],
            clip: float, weight: float = 1.0, rng: np.random.Generator | None = None, decay: float = 0.0) -> float:
    """One gradient step on the mean per-token loss; returns that loss before the step."""
    objs = [GoldTarget(list(t)) for t in targets]
    x, wm, ti, tg, cf = model.pack(grids, objs)
    tokens = float(-cf.sum())
    p = model.param_tensors(requires_grad=True)
    drop = _dropout(model.config.dropout, rng) if rng is not None else None
    vals, _, _ = model.batch_objective(x, wm, ti, tg, cf / tokens * weight, params=p, dropout=drop)
    grads = {k: t.grad for k, t in p.items() if t.grad is not None}
    if decay > 0:
        for k, g in grads.items():
            g += decay * model.params[k]
    _clip(grads, clip)
    opt.step(model.params, grads)
    return float(vals.sum()) / weight


def corpus_loss(model: TranslationModel, grids: Sequence[CharGrid], targets: Sequence[Sequence[int]],
                chunk: int = 128) -> float:
    """Mean per-token negative log-likelihood."""
    total, tokens = 0.0, 0
    for s in range(0, len(grids), chunk):
        objs = [GoldTarget(list(t)) for t in targets[s:s + chunk]]
        total += float(model.objectives(grids[s:s + chunk], objs).sum())
        tokens += sum(len(t) + 1 for t in targets[s:s + chunk])
    return total / max(tokens, 1)


# adversarial example generation


def white_fids_batch(model: TranslationModel, grids: Sequence[CharGrid], targets: Sequence[Sequence[int]],
                     dist: NoiseDistribution, rng: np.random.Generator, return_edits: bool = False):
    """One-shot white-box examples: each word gets its best OOV edit of a sampled kind.

    Uses a single batched forward and backward pass for the whole batch.
    With ``return_edits`` the applied edits per example come back as well.
    """
    _, grads = model.objective_and_gradients(list(grids), [GoldTarget(list(t)) for t in targets])
    out, applied = [], []
    for grid, grad in zip(grids, grads):
        cand = gain_table(grad, grid)
        order = cand.ranked(per_word=True)
        by_word: dict[int, dict[int, list[int]]] = {}
        for k in order:
            by_word.setdefault(int(cand.i[k]), {}).setdefault(int(cand.kind[k]), []).append(int(k))
        edits = []
        for i in range(grid.m):
            options = by_word.get(i, {})
            kinds = [k for k in valid_kinds(grid.word(i)) if int(k) in options]
            while kinds:
                kind = dist.sample(rng, kinds)
                pick = next((k for k in options[int(kind)]
                             if not model.vocab.has_source(edited_word(grid, cand.op(k)))), None)
                if pick is not None:
                    edits.append(cand.op(pick))
                    break
                kinds.remove(kind)
        out.append(apply_edits(grid, edits))
        applied.append(edits)
    return (out, applied) if return_edits else out


def black_batch(model: TranslationModel, sentences: Sequence[Sequence[str]], channel: Callable,
                rng: np.random.Generator) -> list[CharGrid]:
    return [model.encode([channel(w, rng) for w in s]) for s in sentences]


@dataclass
class Channels:
    """Black-box channel resources; missing ones make the matching modes unavailable."""

    charset: str
    lexicon: dict | None = None
    layout: KeyboardLayout | None = None

    def get(self, name: str, dist: NoiseDistribution | None = None):
        return make_channel(name, layout=self.layout, lexicon=self.lexicon, dist=dist, charset=self.charset)


def ensemble_batch(n: int, white_fraction: float, black_sources: Sequence[str], rng: np.random.Generator) -> list[str]:
    """Channel name per example: 'white' with probability ``white_fraction``, else a black source.

    Black examples are split evenly (round robin) between the listed sources.
    """
    if not 0 <= white_fraction <= 1:
        raise ValueError("white fraction must be in [0, 1]")
    if white_fraction < 1 and not black_sources:
        raise ValueError("black sources needed when the white fraction is below 1")
    white = rng.random(n) < white_fraction
    out, k = [], 0
    for w in white:
        if w:
            out.append("white")
        else:
            out.append(black_sources[k % len(black_sources)])
            k += 1
    return out


def _adversarial(model, cfg: TrainConfig, channels: Channels | None, sentences, grids, targets, rng, report):
    mode = cfg.mode
    dist = cfg.noise or NoiseDistribution.uniform()
    if mode == "white-fids":
        report.generation_forward += 1
        report.generation_backward += 1
        return white_fids_batch(model, grids, targets, dist, rng)
    if channels is None:
        raise ValueError(f"mode {mode} needs noise channel resources")
    if mode.startswith("black-"):
        return black_batch(model, sentences, channels.get(mode[len("black-"):], dist), rng)
    assign = ensemble_batch(len(grids), cfg.white_fraction, cfg.black_sources, rng)
    out = list(grids)
    white = [k for k, a in enumerate(assign) if a == "white"]
    if white:
        report.generation_forward += 1
        report.generation_backward += 1
        for k, g in zip(white, white_fids_batch(model, [grids[k] for k in white], [targets[k] for k in white],
                                                dist, rng)):
            out[k] = g
    for k, a in enumerate(assign):
        if a != "white":
            out[k] = model.encode([channels.get(a, dist)(w, rng) for w in sentences[k]])
    return out


# training loop


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[s:s + size] for s in range(0, n, size)]


def _without_time(e: EpochStats) -> dict:
    # wall-clock times would make same-seed checkpoints differ
    d = dataclasses.asdict(e)
    d.pop("seconds")
    return d


def train(model: TranslationModel, corpus: ParallelCorpus, config: TrainConfig, dev: ParallelCorpus | None = None,
          channels: Channels | None = None, resume: Checkpoint | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[Checkpoint, TrainReport]:
    """Train in place and return a checkpoint plus per-epoch losses.

    Epoch e shuffles with a generator seeded by (seed, e), so resuming from
    a checkpoint written after epoch e reproduces an uninterrupted run.
    """
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    grids = [model.encode(s) for s in corpus.source]
    targets = [model.vocab.encode_target(t) for t in corpus.target]
    dev_grids = [model.encode(s) for s in dev.source] if dev is not None else None
    dev_targets = [model.vocab.encode_target(t) for t in dev.target] if dev is not None else None
    lr = config.learning_rate
    opt = _SGD(lr) if config.optimizer == "sgd" else _Adam(lr, model.params)
    start, best_dev = 0, math.inf
    report = TrainReport()
    if resume is not None:
        model.params = {k: v.astype(model.dtype) for k, v in resume.params.items()}
        opt.load(resume.optimizer_state)
        start = int(resume.metadata.get("epoch", 0))
        lr = float(resume.metadata.get("learning_rate", lr))
        best_dev = float(resume.metadata.get("best_dev", math.inf))
        report.epochs = [EpochStats(seconds=0.0, **e) for e in resume.metadata.get("report", [])]
        opt.lr = lr
    adversarial = config.mode != "none"
    clean_w, adv_w = config.mixing if adversarial else (1.0, 0.0)
    for epoch in range(start, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        t0 = time.perf_counter()
        clean_sum = adv_sum = 0.0
        clean_n = adv_n = 0
        for b, idx in enumerate(_batches(len(grids), config.batch_size, rng)):
            bg = [grids[k] for k in idx]
            bt = [targets[k] for k in idx]
            if clean_w > 0:
                value = _update(model, opt, bg, bt, config.clip, 2 * clean_w if adversarial else 1.0, rng,
                                config.weight_decay)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, b, value)
                clean_sum += value
                clean_n += 1
            if adv_w > 0:
                adv = _adversarial(model, config, channels, [corpus.source[k] for k in idx], bg, bt, rng, report)
                value = _update(model, opt, adv, bt, config.clip, 2 * adv_w, rng, config.weight_decay)
                if not math.isfinite(value):
                    raise TrainingDiverged(epoch, b, value)
                adv_sum += value
                adv_n += 1
        dev_loss = corpus_loss(model, dev_grids, dev_targets) if dev_grids else None
        if dev_loss is not None and config.decay_on_plateau:
            if dev_loss >= best_dev:
                lr /= 2
                opt.lr = lr
            best_dev = min(best_dev, dev_loss)
        stats = EpochStats(epoch + 1, clean_sum / max(clean_n, 1), adv_sum / adv_n if adv_n else None,
                           dev_loss, time.perf_counter() - t0, lr)
        report.epochs.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    meta = {"epoch": config.epochs, "learning_rate": lr, "best_dev": best_dev if math.isfinite(best_dev) else None,
            "train_config": config.to_dict(), "report": [_without_time(e) for e in report.epochs]}
    if meta["best_dev"] is None:
        meta.pop("best_dev")
    return model.to_checkpoint(meta, opt.state()), report


def adv_train(model: TranslationModel, corpus: ParallelCorpus, config: TrainConfig, **kwargs):
    if config.mode == "none":
        raise ValueError("adversarial training needs an adversarial mode")
    return train(model, corpus, config, **kwargs)
