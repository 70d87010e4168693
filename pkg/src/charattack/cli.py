"""Command-line driver: train, adv-train, translate, attack, evaluate, noise.

Settings come from an INI file (``--config``) whose sections mirror the
``DEFAULTS`` table below; any key can be overridden with
``--set section.key=value`` and the common ones have their own flags.
Precedence is command line, then file, then defaults. Every report starts
with ``# config_hash`` so a result can be matched to the settings that
produced it.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import attack as atk
from .data import (CheckpointError, CorpusError, ParallelCorpus, build_vocabs, load_checkpoint, load_corpus,
                   load_lexicon, save_checkpoint)
from .editops import parse_kinds
from .metrics import (ALPHAS, bleu, corpus_bleu, efficiency, format_report, make_record, perfect_mute,
                      perfect_push, sign_test, success_rates)
from .model import ModelConfig, TranslationModel
from .noise import NoiseDistribution, fit_fids_distribution, load_layout, make_channel, rand_scramble
from .train import MODES, Channels, TrainConfig, train, white_fids_batch

log = logging.getLogger("charattack")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

_MODEL_KEYS = [f.name for f in dataclasses.fields(ModelConfig) if f.name != "target_vocab"]

DEFAULTS: dict[str, dict] = {
    "experiment": {"seed": None},
    "paths": {"corpus": "", "lexicon": "", "layout": "", "checkpoint": "", "output": "", "input": ""},
    "data": {"target_cap": 50_000, "min_freq": 1},
    "model": {k: getattr(ModelConfig(), k) for k in _MODEL_KEYS},
    "train": {"epochs": 10, "batch_size": 32, "optimizer": "sgd", "learning_rate": 0.5, "clip": 5.0,
              "mode": "none", "mixing": (0.5, 0.5), "white_fraction": 0.5, "black_sources": ("nat", "rand"),
              "decay_on_plateau": True, "weight_decay": 0.0, "timing": False},
    "decode": {"beam_width": 4},
    "attack": {"mode": "untargeted", "strategy": "greedy", "kinds": "fids", "budget_fraction": 0.2,
               "beam_width": 5, "alphas": ALPHAS, "n": 2, "normalize": "none", "split": "test",
               "sentences": 0, "compare_black": False},
    "noise": {"channel": "key", "split": "test", "interior": False},
}

ATTACK_MODES = ("untargeted", "controlled", "targeted")
STRATEGIES = ("one-shot", "greedy", "beam", "black")
VARIANTS = ("clean", "nat", "key", "rand", "fids-b", "fids-w")


class ConfigError(Exception):
    """Bad settings or missing inputs; exits with status 2."""


# configuration


def _convert(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if default is None or isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    cfg = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
    pairs: list[tuple[str, str, str]] = []
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in parser.sections():
            for key, value in parser.items(sec):
                pairs.append((sec, key, value))
    for item in overrides:
        name, sep, value = item.partition("=")
        sec, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        pairs.append((sec, key, value))
    for sec, key, value in pairs:
        if sec not in cfg or key not in cfg[sec]:
            raise ConfigError(f"unknown setting {sec}.{key}")
        cfg[sec][key] = _convert(value, DEFAULTS[sec][key], f"{sec}.{key}")
    if cfg["experiment"]["seed"] is None:
        raise ConfigError("experiment.seed is required (config file or --seed)")
    return cfg


def config_hash(cfg: dict) -> str:
    # where a report goes is not part of the experiment
    ident = {sec: {k: v for k, v in keys.items() if (sec, k) != ("paths", "output")} for sec, keys in cfg.items()}
    blob = json.dumps(ident, sort_keys=True, default=list).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _header(cfg: dict, command: str) -> str:
    return f"# command\t{command}\n# config_hash\t{config_hash(cfg)}\n# seed\t{cfg['experiment']['seed']}\n"


def _require(cfg: dict, key: str, kind: str = "file") -> Path:
    value = cfg["paths"][key]
    if not value:
        raise ConfigError(f"paths.{key} is not set")
    p = Path(value)
    ok = p.is_dir() if kind == "dir" else p.is_file()
    if not ok:
        raise ConfigError(f"paths.{key}: no such {kind}: {p}")
    return p


def _split(cfg: dict, name: str, required: bool = True) -> ParallelCorpus | None:
    root = _require(cfg, "corpus", "dir")
    src, tgt = root / f"{name}.src", root / f"{name}.tgt"
    for p in (src, tgt):
        if not p.is_file():
            if required:
                raise ConfigError(f"paths.corpus: no such file: {p}")
            return None
    return load_corpus(src, tgt, name)


def _optional(cfg: dict, key: str) -> Path | None:
    return _require(cfg, key) if cfg["paths"][key] else None


def _resources(cfg: dict, charset: str) -> tuple[Channels, NoiseDistribution, str]:
    lex_path, layout_path = _optional(cfg, "lexicon"), _optional(cfg, "layout")
    lexicon = load_lexicon(lex_path) if lex_path else None
    layout = load_layout(layout_path)
    if lexicon:
        dist, source = fit_fids_distribution(lexicon), "fitted"
    else:
        dist, source = NoiseDistribution.uniform(), "uniform"
    return Channels(charset, lexicon, layout), dist, source


def _charset(model: TranslationModel) -> str:
    return "".join(model.alphabet.chars[model.alphabet.first_real:])


def _write(cfg: dict, text: str, default: Path | None = None):
    out = cfg["paths"]["output"] or (str(default) if default else "")
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _load_model(cfg: dict, dtype: str | None = None) -> TranslationModel:
    path = _require(cfg, "checkpoint")
    return TranslationModel.from_checkpoint(load_checkpoint(path), dtype=dtype)


# commands


def cmd_train(cfg: dict, adversarial: bool = False) -> int:
    seed = cfg["experiment"]["seed"]
    t = dict(cfg["train"])
    timing = t.pop("timing")
    if adversarial and t["mode"] == "none":
        t["mode"] = "white-fids"
    if not adversarial and t["mode"] != "none":
        raise ConfigError("train runs without an adversary; use adv-train for train.mode " + t["mode"])
    if not cfg["paths"]["checkpoint"]:
        raise ConfigError("paths.checkpoint is not set")
    corpus = _split(cfg, "train")
    dev = _split(cfg, "dev", required=False)
    alphabet, vocab = build_vocabs(corpus, cfg["data"]["target_cap"], cfg["data"]["min_freq"])
    try:
        mc = ModelConfig(**cfg["model"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model settings: {exc}") from None
    model = TranslationModel(mc, alphabet, vocab, seed=seed)
    channels, dist, source = _resources(cfg, _charset(model))
    try:
        tc = TrainConfig(seed=seed, noise=dist, **t)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    log.info("training %s on %d pairs (noise distribution %s)", tc.mode, len(corpus), source)
    ckpt, report = train(model, corpus, tc, dev=dev, channels=channels,
                         on_epoch=lambda e: log.info("epoch %d loss %.4f (%.1fs)", e.epoch, e.clean_loss, e.seconds))
    ckpt.metadata["config_hash"] = config_hash(cfg)
    save_checkpoint(ckpt, cfg["paths"]["checkpoint"])
    text = _header(cfg, "adv-train" if adversarial else "train") + f"# mode\t{tc.mode}\n"
    text += f"# generation_forward\t{report.generation_forward}\n# generation_backward\t{report.generation_backward}\n"
    _write(cfg, text + report.to_tsv(timing=timing), Path(cfg["paths"]["checkpoint"] + ".report.tsv"))
    return EXIT_OK


def cmd_translate(cfg: dict) -> int:
    model = _load_model(cfg)
    src = _require(cfg, "input")
    sentences = [line.split() for line in src.read_text(encoding="utf-8").splitlines()]
    out = []
    for s in sentences:
        out.append(" ".join(model.translate([s], cfg["decode"]["beam_width"])[0]) if s else "")
    _write(cfg, "".join(line + "\n" for line in out))
    return EXIT_OK


def _attack_one(model, grid, spec, a: dict, budget, rng):
    kinds = parse_kinds(a["kinds"])
    normalize = None if a["normalize"] == "none" else a["normalize"]
    strategy = a["strategy"]
    if strategy == "one-shot":
        return atk.one_shot_attack(model, grid, spec, kinds, normalize)
    if strategy == "greedy":
        return atk.greedy_attack(model, grid, spec, budget, kinds, normalize)
    if strategy == "beam":
        return atk.beam_attack(model, grid, spec, budget, a["beam_width"], kinds, normalize)
    return _black(model, grid, spec, a, budget, rng)


def _black(model, grid, spec, a: dict, budget, rng):
    kinds = parse_kinds(a["kinds"])
    # the one-shot comparison is one random edit per word; the others share the edit budget
    b = None if a["strategy"] == "one-shot" else budget
    return atk.black_box_attack(grid, model.vocab, kinds, rng, b, model, spec)


def cmd_attack(cfg: dict) -> int:
    a = cfg["attack"]
    if a["mode"] not in ATTACK_MODES:
        raise ConfigError(f"unknown attack mode {a['mode']!r} (expected one of {', '.join(ATTACK_MODES)})")
    if a["strategy"] not in STRATEGIES:
        raise ConfigError(f"unknown attack strategy {a['strategy']!r}")
    try:
        parse_kinds(a["kinds"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if a["normalize"] not in ("none", "l1", "l2"):
        raise ConfigError(f"unknown normalization {a['normalize']!r}")
    seed = cfg["experiment"]["seed"]
    model = _load_model(cfg, dtype="float64")
    corpus = _split(cfg, a["split"])
    count = a["sentences"] or len(corpus)
    vocab = model.vocab
    rows, records, results, black_records, black_results = [], [], [], [], []
    clean_out, adv_out, black_out, refs = [], [], [], []
    skipped = 0
    for k in range(min(count, len(corpus))):
        grid = model.encode(corpus.source[k])
        budget = atk.AttackBudget.for_grid(grid, a["budget_fraction"])
        rng = np.random.default_rng([seed, k])
        if a["mode"] == "untargeted":
            spec = atk.Untargeted(tuple(vocab.encode_target(corpus.target[k])))
        else:
            ref = model.greedy_decode([grid])[0]
            t = atk.pick_position(ref.ids, rng)
            if t is None:
                skipped += 1
                continue
            if a["mode"] == "controlled":
                spec = atk.Controlled(tuple(ref.ids), t)
            else:
                try:
                    word = atk.nth_likely_target(model, grid, ref, t, a["n"])
                except ValueError:
                    skipped += 1
                    continue
                spec = atk.Targeted(tuple(ref.ids), t, word)
        res = atk.complete(model, _attack_one(model, grid, spec, a, budget, np.random.default_rng([seed, k, 1])), grid)
        pair = [res]
        if a["compare_black"] and a["strategy"] != "black":
            pair.append(atk.complete(model, _black(model, grid, spec, a, budget, np.random.default_rng([seed, k, 2])),
                                     grid))
        if a["mode"] == "untargeted":
            ref_words = corpus.target[k]
            outs = [vocab.decode_target(r.adversarial) for r in pair]
            refs.append(ref_words)
            clean_out.append(vocab.decode_target(res.clean))
            adv_out.append(outs[0])
            if len(pair) > 1:
                black_out.append(outs[1])
            rows.append(f"{k}\t{res.changes}\t{res.queries}\t{res.backward}\t"
                        f"{bleu(clean_out[-1], ref_words).value:.6f}\t{bleu(outs[0], ref_words).value:.6f}")
        else:
            clean = vocab.decode_target(spec.reference)
            if isinstance(spec, atk.Controlled):
                perfect = perfect_mute(clean, spec.position)
            else:
                perfect = perfect_push(clean, spec.position, vocab.target[spec.word])
            for r, recs, rl in zip(pair, (records, black_records), (results, black_results)):
                recs.append(make_record(k, clean, vocab.decode_target(r.adversarial), perfect, bool(r.goal), a["alphas"]))
                rl.append(r)
        log.debug("sentence %d: %d edits, %d queries", k, res.changes, res.queries)
    head = _header(cfg, "attack") + f"# mode\t{a['mode']}\n# strategy\t{a['strategy']}\n# skipped\t{skipped}\n"
    if a["mode"] == "untargeted":
        text = head + "sentence_id\tchanges\tqueries\tbackward\tbleu_clean\tbleu_adv\n" + "".join(r + "\n" for r in rows)
        if refs:
            text += f"# corpus_bleu_clean\t{corpus_bleu(clean_out, refs).value:.6f}\n"
            text += f"# corpus_bleu_adv\t{corpus_bleu(adv_out, refs).value:.6f}\n"
        if black_out:
            text += f"# corpus_bleu_black\t{corpus_bleu(black_out, refs).value:.6f}\n"
            # the attacker wants low BLEU, so white wins where black scores higher
            st = sign_test([bleu(b, r).value for b, r in zip(black_out, refs)],
                           [bleu(w, r).value for w, r in zip(adv_out, refs)])
            text += f"# sign_test_white_vs_black\twins={st.wins}\tlosses={st.losses}\tties={st.ties}\tp={st.p_value:.6g}\n"
    else:
        text = format_report(records, a["alphas"], efficiency(records, results), None)
        text = head + text
        if black_records:
            text += "# black_box_baseline\n"
            for alpha, rate in success_rates(black_records, a["alphas"]).items():
                text += f"# black_success\t{alpha:.1f}\t{rate:.6f}\n"
            eff = efficiency(black_records, black_results)
            text += f"# black_mean_changes\t{'NA' if eff.mean_changes is None else f'{eff.mean_changes:.6f}'}\n"
            text += f"# black_mean_queries\t{eff.mean_queries:.6f}\n"
            ok = [(w, b) for w, b in zip(records, black_records) if w.valid and b.valid]
            half = min(a["alphas"], key=lambda x: abs(x - 0.5))
            st = sign_test([w.bits[half] for w, _ in ok], [b.bits[half] for _, b in ok])
            text += (f"# sign_test_white_vs_black\talpha={half:.1f}\twins={st.wins}\tlosses={st.losses}\t"
                     f"ties={st.ties}\tp={st.p_value:.6g}\n")
    _write(cfg, text)
    return EXIT_OK


def _provenance(train_mode: str) -> str:
    """The noisy test set a model's white-box examples start from."""
    if train_mode.startswith("black-"):
        base = train_mode[len("black-"):]
        return "fids-b" if base == "fids" else base
    return "clean"


def _noisy(corpus: ParallelCorpus, name: str, channels: Channels, dist, rng) -> list[list[str]] | None:
    if name == "clean":
        return [list(s) for s in corpus.source]
    if name == "nat" and not channels.lexicon:
        return None
    channel = channels.get(name, dist)
    return [[channel(w, rng) for w in s] for s in corpus.source]


def _decode_all(model, grids, beam_width: int) -> list[list[str]]:
    return [model.decode(g, beam_width).words(model.vocab) for g in grids]


def cmd_evaluate(cfg: dict) -> int:
    seed = cfg["experiment"]["seed"]
    ckpt = load_checkpoint(_require(cfg, "checkpoint"))
    model = TranslationModel.from_checkpoint(ckpt)
    corpus = _split(cfg, "test")
    channels, dist, source = _resources(cfg, _charset(model))
    train_mode = ckpt.metadata.get("train_config", {}).get("mode", "none")
    beam = cfg["decode"]["beam_width"]
    targets = [model.vocab.encode_target(t) for t in corpus.target]
    sets: dict[str, list[list[str]] | None] = {}
    for k, name in enumerate(VARIANTS[:-1]):
        sets[name] = _noisy(corpus, name, channels, dist, np.random.default_rng([seed, k]))
    rows = []
    for name in VARIANTS:
        if name == "fids-w":
            base = _provenance(train_mode)
            tag = f"fids-w<-{base}"
            if sets.get(base) is None:
                rows.append((name, tag, "NA"))
                continue
            rng = np.random.default_rng([seed, len(VARIANTS)])
            grids = []
            src = [model.encode(s) for s in sets[base]]
            for s in range(0, len(src), 32):
                grids += white_fids_batch(model, src[s:s + 32], targets[s:s + 32], dist, rng)
        else:
            tag = name
            if sets[name] is None:
                rows.append((name, tag, "NA"))
                continue
            grids = [model.encode(s) for s in sets[name]]
        out = _decode_all(model, grids, beam)
        rows.append((name, tag, f"{corpus_bleu(out, corpus.target).value:.6f}"))
        log.info("%s: BLEU %s", tag, rows[-1][2])
    text = _header(cfg, "evaluate") + f"# model_mode\t{train_mode}\n# fids_distribution\t{source}\n"
    text += f"# beam_width\t{beam}\nvariant\tprovenance\tsentences\tbleu\n"
    text += "".join(f"{v}\t{p}\t{len(corpus)}\t{b}\n" for v, p, b in rows)
    _write(cfg, text)
    return EXIT_OK


def cmd_noise(cfg: dict) -> int:
    seed = cfg["experiment"]["seed"]
    n = cfg["noise"]
    corpus = _split(cfg, n["split"])
    out_dir = cfg["paths"]["output"]
    if not out_dir:
        raise ConfigError("paths.output (a directory) is not set")
    charset = "".join(sorted({c for s in corpus.source for w in s for c in w}))
    channels, dist, source = _resources(cfg, charset)
    name = n["channel"]
    if name not in ("key", "rand", "nat", "fids", "fids-b"):
        raise ConfigError(f"unknown noise channel {name!r}")
    if name == "nat" and not channels.lexicon:
        raise ConfigError("the nat channel needs paths.lexicon")
    rng = np.random.default_rng(seed)
    if name == "rand":
        channel = lambda w, r: rand_scramble(w, r, interior=n["interior"])  # noqa: E731
    else:
        channel = make_channel(name, layout=channels.layout, lexicon=channels.lexicon, dist=dist, charset=charset)
    noisy = ParallelCorpus([[channel(w, rng) for w in s] for s in corpus.source], corpus.target, corpus.split)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    noisy.write(out / f"{n['split']}.{name}.src", out / f"{n['split']}.{name}.tgt")
    text = _header(cfg, "noise") + f"# channel\t{name}\n# source\t{source}\n"
    text += "kind\tprobability\n" + "".join(f"{k}\t{p:.6f}\n" for k, p in zip(("flip", "insert", "delete", "swap"),
                                                                             dist.probs))
    text += f"# residual\t{dist.residual:.6f}\n" if source == "fitted" else "# residual\tNA\n"
    (out / "fids_distribution.tsv").write_text(text, encoding="utf-8")
    log.info("wrote %d noisy sentences to %s", len(noisy), out)
    return EXIT_OK


COMMANDS = {
    "train": lambda cfg: cmd_train(cfg, adversarial=False),
    "adv-train": lambda cfg: cmd_train(cfg, adversarial=True),
    "translate": cmd_translate,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "noise": cmd_noise,
}

# shortcut flags: (flag, section.key, help)
_SHORTCUTS = [
    ("--seed", "experiment.seed", "random seed (required here or in the config)"),
    ("--corpus", "paths.corpus", "directory holding {train,dev,test}.{src,tgt}"),
    ("--checkpoint", "paths.checkpoint", "model checkpoint to write or read"),
    ("--lexicon", "paths.lexicon", "natural-noise lexicon (word<TAB>variants)"),
    ("--layout", "paths.layout", "keyboard layout file (char<TAB>neighbors)"),
    ("--input", "paths.input", "sentences to translate"),
    ("--output", "paths.output", "report or output path (stdout when unset)"),
    ("--epochs", "train.epochs", None),
    ("--train-mode", "train.mode", f"one of {', '.join(MODES)}"),
    ("--attack-mode", "attack.mode", f"one of {', '.join(ATTACK_MODES)}"),
    ("--strategy", "attack.strategy", f"one of {', '.join(STRATEGIES)}"),
    ("--channel", "noise.channel", "key, rand, nat or fids"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="charattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one setting; repeatable")
        for flag, key, text in _SHORTCUTS:
            p.add_argument(flag, dest=key, default=None, help=text or key)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr)
    overrides = list(args.set)
    overrides += [f"{key}={getattr(args, key)}" for _, key, _ in _SHORTCUTS if getattr(args, key) is not None]
    try:
        cfg = load_config(args.config, overrides)
        start = time.perf_counter()
        code = COMMANDS[args.command](cfg)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"charattack: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"charattack: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
