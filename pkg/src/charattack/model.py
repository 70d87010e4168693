"""Character-aware attentional encoder-decoder.

Source words are read as one-hot character grids, embedded, convolved with
several filter widths, max-pooled over characters, passed through highway
layers and then through an LSTM over words. The decoder is an LSTM over
target words with global (bilinear) attention on the encoder states.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (BOS_ID, BOUNDARY_ID, EOS_ID, Alphabet, CharGrid, Checkpoint, WordVocab,
                   encode_sentence)

_MASK_NEG = -1e9
# Repeated characters and padding make conv windows identical, so max-pooling
# ties exactly at one-hot inputs. A fixed decreasing offset per window position
# breaks those ties by far more than a finite-difference step.
_POOL_TIE_OFFSET = 1e-3


@dataclass
class ModelConfig:
    char_dim: int = 16
    conv_widths: tuple[int, ...] = (1, 2, 3, 4, 5)
    filters_per_width: int = 10
    max_filters: int = 64
    highway_layers: int = 1
    hidden: int = 128
    layers: int = 1
    target_dim: int = 64
    target_vocab: int = 0
    dropout: float = 0.0
    conv_activation: str = "tanh"
    max_chars: int = 20
    init_scale: float = 0.1
    init: str = "uniform"  # or "xavier" for fan-scaled weight matrices
    dtype: str = "float64"

    def __post_init__(self):
        self.conv_widths = tuple(self.conv_widths)
        for name in ("char_dim", "filters_per_width", "max_filters", "hidden", "layers",
                     "target_dim", "max_chars"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.highway_layers < 0:
            raise ValueError("highway_layers must be >= 0")
        if self.init not in ("uniform", "xavier"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.conv_activation not in ("tanh", "relu"):
            raise ValueError(f"unknown conv activation {self.conv_activation!r}")
        if not self.conv_widths or min(self.conv_widths) < 1 or max(self.conv_widths) > self.max_chars:
            raise ValueError(f"conv widths {self.conv_widths} must lie in [1, {self.max_chars}]")

    def filters(self, width: int) -> int:
        return min(self.filters_per_width * width, self.max_filters)

    @property
    def feature_dim(self) -> int:
        return sum(self.filters(w) for w in self.conv_widths)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PassCounter:
    """Per-example forward and backward passes executed by a model."""

    forward: int = 0
    backward: int = 0

    def reset(self):
        self.forward = self.backward = 0


class TeacherForcing(Protocol):
    def teacher_forcing(self, vocab: WordVocab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (decoder inputs, picked targets, coefficients), each of length T."""


@dataclass
class GoldTarget:
    """Plain log-loss J(x, y) of a target word sequence."""

    target: Sequence[int]

    def teacher_forcing(self, vocab: WordVocab):
        ids = list(self.target)
        if any(k < 0 or k >= vocab.target_size for k in ids):
            raise ValueError("target ids outside the target vocabulary")
        tgt_in = np.array([BOS_ID] + ids)
        targets = np.array(ids + [EOS_ID])
        return tgt_in, targets, -np.ones(len(targets))


@dataclass
class DecodeResult:
    ids: list[int]
    distributions: list[np.ndarray]
    score: float
    finished: bool
    attention: list[np.ndarray] | None = None

    def words(self, vocab: WordVocab) -> list[str]:
        return vocab.decode_target(self.ids)


def step_distribution(result: DecodeResult, position: int) -> np.ndarray:
    if not 0 <= position < len(result.distributions):
        raise IndexError(f"position {position} outside decode of {len(result.distributions)} steps")
    return result.distributions[position]


def _lstm_step(xp, h, c, w_h, hidden: int):
    gates = xp + h @ w_h
    s = ad.sigmoid(gates[:, : 3 * hidden])
    g = ad.tanh(gates[:, 3 * hidden:])
    i, f, o = s[:, :hidden], s[:, hidden:2 * hidden], s[:, 2 * hidden:]
    c = f * c + i * g
    h = o * ad.tanh(c)
    return h, c


class TranslationModel:
    def __init__(self, config: ModelConfig, alphabet: Alphabet, vocab: WordVocab,
                 params: dict[str, np.ndarray] | None = None, seed: int = 0):
        if config.target_vocab != vocab.target_size:
            config = dataclasses.replace(config, target_vocab=vocab.target_size)
        self.config = config
        self.alphabet = alphabet
        self.vocab = vocab
        self.counter = PassCounter()
        self.dtype = np.dtype(config.dtype)
        self.params = params if params is not None else self._init_params(seed)
        self._check_params()

    # construction

    def _shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        v, h = len(self.alphabet), c.hidden
        shapes = {"char_emb": (v, c.char_dim)}
        for w in c.conv_widths:
            shapes[f"conv{w}.W"] = (w * c.char_dim, c.filters(w))
            shapes[f"conv{w}.b"] = (c.filters(w),)
        f = c.feature_dim
        for k in range(c.highway_layers):
            shapes.update({f"hw{k}.Wt": (f, f), f"hw{k}.bt": (f,), f"hw{k}.Wh": (f, f), f"hw{k}.bh": (f,)})
        for side, d_in in (("enc", f), ("dec", c.target_dim)):
            for k in range(c.layers):
                shapes[f"{side}{k}.Wx"] = (d_in if k == 0 else h, 4 * h)
                shapes[f"{side}{k}.Wh"] = (h, 4 * h)
                shapes[f"{side}{k}.b"] = (4 * h,)
        shapes.update({"tgt_emb": (c.target_vocab, c.target_dim), "att.Wa": (h, h),
                       "att.Wc": (2 * h, h), "out.W": (h, c.target_vocab), "out.b": (c.target_vocab,)})
        return shapes

    def _init_params(self, seed: int) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(seed)
        s = self.config.init_scale
        params = {}
        for name, shape in self._shapes().items():
            bound = s
            if self.config.init == "xavier" and len(shape) == 2 and not name.endswith("emb"):
                bound = float(np.sqrt(6.0 / (shape[0] + shape[1])))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return params

    def _check_params(self):
        shapes = self._shapes()
        if set(shapes) != set(self.params):
            raise ValueError(f"parameter names differ from config: {sorted(set(shapes) ^ set(self.params))}")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dtype: str | None = None) -> "TranslationModel":
        config = ModelConfig.from_dict(ckpt.config)
        if dtype is not None:
            config = dataclasses.replace(config, dtype=dtype)
        params = {k: v.astype(config.dtype) for k, v in ckpt.params.items()}
        return cls(config, ckpt.alphabet, ckpt.vocab, params=params)

    def to_checkpoint(self, metadata: dict | None = None, optimizer_state=None) -> Checkpoint:
        return Checkpoint(self.config.to_dict(), {k: v.copy() for k, v in self.params.items()},
                          self.alphabet, self.vocab, dict(metadata or {}), dict(optimizer_state or {}))

    def encode(self, words: Sequence[str]) -> CharGrid:
        return encode_sentence(words, self.alphabet, self.config.max_chars)

    def param_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, op=k) for k, v in self.params.items()}

    # network pieces

    def _encode(self, x: Tensor, word_mask: np.ndarray, p: dict[str, Tensor], dropout=None):
        """x: (B, m, n, V) one-hot. Returns encoder states (B, m, H) and final (h, c) per layer."""
        c = self.config
        b, m, n, _ = x.shape
        emb = ad.reshape(x @ p["char_emb"], (b * m, n, c.char_dim))
        boundary = p["char_emb"][BOUNDARY_ID]
        ones = np.ones((b * m, 1, 1), dtype=self.dtype)
        emb = ad.concat([ones * boundary, emb], axis=1)
        act = ad.tanh if c.conv_activation == "tanh" else ad.relu
        feats = []
        for w in c.conv_widths:
            conv = act(ad.conv_chars(emb, p[f"conv{w}.W"], p[f"conv{w}.b"], w))
            offset = (-_POOL_TIE_OFFSET * np.arange(conv.shape[1], dtype=self.dtype))[:, None]
            feats.append(ad.max_pool(conv + offset, axis=1))
        y = ad.concat(feats, axis=-1) if len(feats) > 1 else feats[0]
        for k in range(c.highway_layers):
            t = ad.sigmoid(y @ p[f"hw{k}.Wt"] + p[f"hw{k}.bt"])
            g = ad.relu(y @ p[f"hw{k}.Wh"] + p[f"hw{k}.bh"])
            y = t * g + y - t * y
        if dropout is not None:
            y = dropout(y)
        seq = ad.reshape(y, (b, m, c.feature_dim))
        mask = word_mask.astype(self.dtype)
        finals = []
        for k in range(c.layers):
            xp = seq @ p[f"enc{k}.Wx"] + p[f"enc{k}.b"]
            h = Tensor(np.zeros((b, c.hidden), dtype=self.dtype))
            cell = h
            outs = []
            for t in range(m):
                h_new, c_new = _lstm_step(xp[:, t], h, cell, p[f"enc{k}.Wh"], c.hidden)
                mt = mask[:, t:t + 1]
                if mt.all():
                    h, cell = h_new, c_new
                else:
                    h = h + mt * (h_new - h)
                    cell = cell + mt * (c_new - cell)
                outs.append(h)
            seq = ad.stack(outs, axis=1)
            finals.append((h, cell))
        return seq, finals

    def _attend(self, dec_h: Tensor, enc: Tensor, keys: Tensor, mask_add: np.ndarray, p):
        """dec_h (B, T, H) -> log-probabilities (B, T, Vt) and attention (B, T, m)."""
        scores = dec_h @ ad.transpose(keys, (0, 2, 1)) + mask_add
        alpha = ad.softmax(scores, axis=-1)
        ctx = alpha @ enc
        htil = ad.tanh(ad.concat([ctx, dec_h], axis=-1) @ p["att.Wc"])
        return htil, alpha

    def _forward(self, x: Tensor, word_mask: np.ndarray, tgt_in: np.ndarray, p: dict[str, Tensor],
                 dropout=None) -> Tensor:
        c = self.config
        enc, finals = self._encode(x, word_mask, p, dropout)
        keys = enc @ p["att.Wa"]
        mask_add = np.where(word_mask, 0.0, _MASK_NEG).astype(self.dtype)[:, None, :]
        seq = ad.embed(p["tgt_emb"], tgt_in)
        b, steps = tgt_in.shape
        for k in range(c.layers):
            xp = seq @ p[f"dec{k}.Wx"] + p[f"dec{k}.b"]
            h, cell = finals[k]
            outs = []
            for t in range(steps):
                h, cell = _lstm_step(xp[:, t], h, cell, p[f"dec{k}.Wh"], c.hidden)
                outs.append(h)
            seq = ad.stack(outs, axis=1)
        htil, _ = self._attend(seq, enc, keys, mask_add, p)
        if dropout is not None:
            htil = dropout(htil)
        return ad.log_softmax(htil @ p["out.W"] + p["out.b"], axis=-1)

    # batched objectives

    def batch_objective(self, x: np.ndarray, word_mask: np.ndarray, tgt_in: np.ndarray,
                        targets: np.ndarray, coef: np.ndarray, input_grad: bool = False,
                        params: dict[str, Tensor] | None = None, dropout=None):
        """Per-example sum_t coef[b, t] * log p(targets[b, t]) under teacher forcing.

        Returns (values (B,), gradient w.r.t. ``x`` or None, the output Tensor).
        The gradient of the batch sum separates per example, so row b of the
        returned gradient is the gradient of example b alone.
        """
        b = x.shape[0]
        grad_needed = input_grad or (params is not None and any(t.requires_grad for t in params.values()))
        p = params if params is not None else self.param_tensors()
        xt = Tensor(np.asarray(x, dtype=self.dtype), requires_grad=input_grad, op="grid")
        self.counter.forward += b
        if not grad_needed:
            with ad.no_grad():
                logp = self._forward(xt, word_mask, tgt_in, p, dropout)
                vals = (ad.pick(logp, targets) * coef.astype(self.dtype)).data.sum(axis=1)
            return vals, None, None
        logp = self._forward(xt, word_mask, tgt_in, p, dropout)
        per_pos = ad.pick(logp, targets) * coef.astype(self.dtype)
        vals_t = ad.reduce_sum(per_pos, axis=1)
        total = ad.reduce_sum(vals_t)
        total.backward()
        self.counter.backward += b
        gx = xt.grad if input_grad else None
        return vals_t.data.copy(), gx, total

    def pack(self, grids: Sequence[CharGrid], objectives: Sequence[TeacherForcing]):
        """Stack grids and teacher-forcing objectives into padded batch arrays."""
        m = max(g.m for g in grids)
        v = len(self.alphabet)
        b = len(grids)
        x = np.zeros((b, m, self.config.max_chars, v), dtype=self.dtype)
        x[:, :, :, 0] = 1.0
        word_mask = np.zeros((b, m), dtype=bool)
        tf = [o.teacher_forcing(self.vocab) for o in objectives]
        steps = max(len(t[0]) for t in tf)
        tgt_in = np.full((b, steps), EOS_ID, dtype=np.int64)
        targets = np.full((b, steps), EOS_ID, dtype=np.int64)
        coef = np.zeros((b, steps))
        for k, (g, (ti, tg, cf)) in enumerate(zip(grids, tf)):
            if g.n != self.config.max_chars:
                raise ValueError(f"grid has {g.n} chars per word, model expects {self.config.max_chars}")
            x[k, : g.m] = g.one_hot
            word_mask[k, : g.m] = True
            tgt_in[k, : len(ti)] = ti
            targets[k, : len(tg)] = tg
            coef[k, : len(cf)] = cf
        return x, word_mask, tgt_in, targets, coef

    def objectives(self, grids: Sequence[CharGrid], objectives: Sequence[TeacherForcing],
                   chunk: int = 256) -> np.ndarray:
        out = []
        for s in range(0, len(grids), chunk):
            x, wm, ti, tg, cf = self.pack(grids[s:s + chunk], objectives[s:s + chunk])
            out.append(self.batch_objective(x, wm, ti, tg, cf)[0])
        return np.concatenate(out) if out else np.zeros(0)

    def input_function(self, grid: CharGrid, objective: TeacherForcing):
        """The objective as a function of the one-hot grid, for gradient checks.

        Returns ``(f, x0)`` where ``f`` maps an (m, n, |V|) Tensor to a scalar
        Tensor and ``x0`` is the grid's one-hot array.
        """
        x, wm, ti, tg, cf = self.pack([grid], [objective])
        p = self.param_tensors()

        def f(xt: Tensor) -> Tensor:
            logp = self._forward(ad.reshape(xt, (1,) + tuple(xt.shape)), wm, ti, p)
            return ad.reduce_sum(ad.pick(logp, tg) * cf.astype(self.dtype))

        return f, x[0]

    def objective_and_gradients(self, grids: Sequence[CharGrid], objectives: Sequence[TeacherForcing]):
        """Objective values and (m, n, |V|) input gradients for each grid."""
        x, wm, ti, tg, cf = self.pack(grids, objectives)
        vals, gx, _ = self.batch_objective(x, wm, ti, tg, cf, input_grad=True)
        return vals, [gx[k, : g.m] for k, g in enumerate(grids)]

    # decoding

    def _decoder_init(self, grids: Sequence[CharGrid]):
        p = self.param_tensors()
        x, wm, *_ = self.pack(grids, [GoldTarget([])] * len(grids))
        enc, finals = self._encode(Tensor(x), wm, p)
        keys = enc @ p["att.Wa"]
        mask_add = np.where(wm, 0.0, _MASK_NEG).astype(self.dtype)[:, None, :]
        return p, enc, keys, mask_add, [(h.data, c.data) for h, c in finals]

    def _decoder_step(self, p, enc, keys, mask_add, state, prev_ids):
        c = self.config
        inp = ad.embed(p["tgt_emb"], prev_ids)
        new_state = []
        for k in range(c.layers):
            h, cell = state[k]
            xp = inp @ p[f"dec{k}.Wx"] + p[f"dec{k}.b"]
            h, cell = _lstm_step(xp, Tensor(h), Tensor(cell), p[f"dec{k}.Wh"], c.hidden)
            new_state.append((h.data, cell.data))
            inp = h
        htil, alpha = self._attend(ad.reshape(inp, (inp.shape[0], 1, c.hidden)), enc, keys, mask_add, p)
        logp = ad.log_softmax(htil @ p["out.W"] + p["out.b"], axis=-1)
        return logp.data[:, 0], alpha.data[:, 0], new_state

    def max_output_length(self, grid: CharGrid) -> int:
        return 2 * grid.m + 5

    def greedy_decode(self, grids: Sequence[CharGrid]) -> list[DecodeResult]:
        """Argmax decoding of several sentences at once."""
        with ad.no_grad():
            p, enc, keys, mask_add, state = self._decoder_init(grids)
            self.counter.forward += len(grids)
            b = len(grids)
            limits = np.array([self.max_output_length(g) for g in grids])
            results = [DecodeResult([], [], 0.0, False, []) for _ in grids]
            prev = np.full(b, BOS_ID)
            live = np.ones(b, dtype=bool)
            for step in range(limits.max()):
                logp, alpha, state = self._decoder_step(p, enc, keys, mask_add, state, prev)
                best = logp.argmax(axis=1)
                for k in np.flatnonzero(live):
                    r = results[k]
                    r.distributions.append(np.exp(logp[k]))
                    r.attention.append(alpha[k, : grids[k].m])
                    r.score += float(logp[k, best[k]])
                    if best[k] == EOS_ID:
                        r.finished = True
                        live[k] = False
                    else:
                        r.ids.append(int(best[k]))
                        if len(r.ids) >= limits[k]:
                            live[k] = False
                if not live.any():
                    break
                prev = best
        return results

    def beam_decode(self, grid: CharGrid, beam_width: int) -> DecodeResult:
        """Highest log-probability completed hypothesis found with ``beam_width`` beams.

        The greedy hypothesis is always kept as a candidate, so the result
        never scores below width-1 decoding.
        """
        if beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        greedy = self.greedy_decode([grid])[0]
        if beam_width == 1:
            return greedy
        limit = self.max_output_length(grid)
        with ad.no_grad():
            p, enc, keys, mask_add, state = self._decoder_init([grid])
            beams = [([], [], 0.0)]  # ids, distributions, score
            finished: list[DecodeResult] = []
            for step in range(limit):
                k = len(beams)
                e = Tensor(np.repeat(enc.data, k, 0))
                ks = Tensor(np.repeat(keys.data, k, 0))
                ma = np.repeat(mask_add, k, 0)
                prev = np.array([b[0][-1] if b[0] else BOS_ID for b in beams])
                logp, _, new_state = self._decoder_step(p, e, ks, ma, state, prev)
                scores = np.array([b[2] for b in beams])[:, None] + logp
                order = np.argsort(-scores, axis=None, kind="stable")[: 2 * beam_width]
                nxt, rows = [], []
                for flat in order:
                    j, w = divmod(int(flat), logp.shape[1])
                    ids, dists, _ = beams[j]
                    dists = dists + [np.exp(logp[j])]
                    if w == EOS_ID:
                        finished.append(DecodeResult(ids, dists, float(scores[j, w]), True))
                    elif len(nxt) < beam_width:
                        nxt.append((ids + [w], dists, float(scores[j, w])))
                        rows.append(j)
                beams = nxt
                state = [(h[rows], c[rows]) for h, c in new_state]
                best_done = max((f.score for f in finished), default=-np.inf)
                if not beams or len(finished) >= beam_width or best_done >= max(b[2] for b in beams):
                    break
            else:
                # length cap reached with live hypotheses
                finished.extend(DecodeResult(ids, dists, s, False) for ids, dists, s in beams)
            self.counter.forward += 1
        finished.append(greedy)
        return max(finished, key=lambda r: r.score)

    def decode(self, grid: CharGrid, beam_width: int = 1) -> DecodeResult:
        if beam_width == 1:
            return self.greedy_decode([grid])[0]
        return self.beam_decode(grid, beam_width)

    def translate(self, sentences: Sequence[Sequence[str]], beam_width: int = 1, chunk: int = 64) -> list[list[str]]:
        grids = [self.encode(s) for s in sentences]
        if beam_width == 1:
            out = []
            for s in range(0, len(grids), chunk):
                out.extend(r.words(self.vocab) for r in self.greedy_decode(grids[s:s + chunk]))
            return out
        return [self.beam_decode(g, beam_width).words(self.vocab) for g in grids]

    def sequence_logprob(self, grid: CharGrid, ids: Sequence[int], finished: bool = True) -> float:
        """Model log-probability of emitting ``ids`` (plus EOS when ``finished``)."""
        tf = GoldTarget(list(ids))
        tgt_in, targets, coef = tf.teacher_forcing(self.vocab)
        if not finished:
            tgt_in, targets, coef = tgt_in[:-1], targets[:-1], coef[:-1]
        x, wm, ti, tg, cf = self.pack([grid], [_Raw(tgt_in, targets, -coef)])
        return float(self.batch_objective(x, wm, ti, tg, cf)[0][0])


@dataclass
class _Raw:
    tgt_in: np.ndarray
    targets: np.ndarray
    coef: np.ndarray

    def teacher_forcing(self, vocab):
        return self.tgt_in, self.targets, self.coef


def loss(model: TranslationModel, src: CharGrid, tgt: Sequence[int]) -> float:
    """J(x, y): summed negative log-likelihood of ``tgt`` followed by EOS."""
    return float(model.objectives([src], [GoldTarget(list(tgt))])[0])


def input_gradient(model: TranslationModel, src: CharGrid, objective: TeacherForcing) -> np.ndarray:
    """Gradient of the objective w.r.t. the (m, n, |V|) one-hot grid."""
    _, grads = model.objective_and_gradients([src], [objective])
    return grads[0]


def decode(model: TranslationModel, src: CharGrid, beam_width: int = 1) -> DecodeResult:
    return model.decode(src, beam_width)
