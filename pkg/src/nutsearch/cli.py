"""Command-line front end tying the pipeline together.

Subcommands: make-synth, train-arae, train-classifier, train-lm, attack,
attack-baseline, evaluate, transfer, stats. Data and artifacts are files;
logs go to standard error. Exit codes: 0 success, 2 bad flags/config,
1 runtime failure."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import textdata as td
from .attack import (AttackConfig, AttackModels, TriggerCandidate,
                     nuts_attack, write_candidates, write_selected)
from .baselines import (TokenGradientConfig, random_arae_attack,
                        random_sequence_attack, token_gradient_attack)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, parse_config_file, resolve_config
from .errors import ConfigError, NutsearchError
from .evaluation import (EvalReport, accuracy_under_trigger,
                         avg_word_frequency, candidate_stats, stat_delta,
                         transfer_eval)
from .gradcore import Tensor
from .textdata import Example, Split, Vocab
from .trainers import TrainConfig, train_arae, train_classifier, train_lm

log = logging.getLogger("nutsearch")

# pinned training recipes; any key can be overridden per run
_TRAIN_COMMON = dict(batch_size=32, gan_lr=0.05, gan_momentum=0.5,
                     clip_norm=5.0, critic_steps=5, gp_weight=10.0,
                     enc_noise=0.0, enc_noise_anneal=0.95, lr_anneal=1.0,
                     augment_prefixes=0.0, emb_noise=0.0,
                     seed=0, emb_dim=32, hidden_dim=64)
RECIPES = {
    "lstm2": dict(_TRAIN_COMMON, epochs=20, lr=0.2, momentum=0.99,
                  augment_prefixes=0.05, emb_noise=0.4),
    "bag": dict(_TRAIN_COMMON, epochs=12, lr=0.05, momentum=0.99),
    "pair": dict(_TRAIN_COMMON, epochs=16, lr=0.05, momentum=0.99),
    "lm": dict(_TRAIN_COMMON, epochs=10, lr=0.2, momentum=0.99),
    "arae": dict(_TRAIN_COMMON, epochs=80, lr=1.2, momentum=0.9, gan_lr=0.15,
                 lr_anneal=0.97, latent_dim=32, noise_dim=16, gen_hidden=64,
                 critic_hidden=64, latent_scale=3.0),
}

ATTACK_DEFAULTS = dict(attacked_class=-1, trigger_length=3, eps=10.0,
                       eta=1000.0, steps=1000, n_inits=256, lam=0.05,
                       tau_start=1.0, tau_end=0.1, batch_size=32,
                       normalize_gradient=False, seed=0, workers=1)
BASELINE_DEFAULTS = dict(ATTACK_DEFAULTS, top_k=20, beam_width=3,
                         max_sweeps=5, filler="the")

_TRAINCFG_KEYS = ("epochs", "batch_size", "lr", "gan_lr", "momentum",
                  "gan_momentum", "clip_norm", "critic_steps", "gp_weight",
                  "enc_noise", "enc_noise_anneal", "lr_anneal",
                  "augment_prefixes", "emb_noise", "seed")


def _add_override_flags(parser: argparse.ArgumentParser, defaults: dict):
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            parser.add_argument(flag, default=None,
                                choices=("true", "false"))
        else:
            parser.add_argument(flag, type=type(val), default=None)


def _resolve(args, defaults: dict) -> dict:
    file_values = None
    if getattr(args, "config", None):
        file_values = parse_config_file(args.config)
    flag_values = {k: getattr(args, k) for k in defaults}
    resolved = resolve_config(defaults, file_values, flag_values)
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    return resolved


def _encode(vocab: Vocab, text: str) -> list[int]:
    return vocab.encode(td.tokenize(text))


def _read_meta(data_dir: Path) -> dict:
    meta_path = data_dir / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"{data_dir} has no meta.json; run make-synth "
                          f"first")
    return json.loads(meta_path.read_text())


def _load_rows(data_dir: Path, task: str):
    out = {}
    for part in ("train", "dev", "test"):
        path = data_dir / f"{part}.tsv"
        if task == "nli":
            out[part] = td.read_pair_corpus(path)
        else:
            out[part] = td.read_single_corpus(path)
    return out


def _rows_to_split(rows: dict, vocab: Vocab, task: str) -> Split:
    def conv(row):
        if task == "nli":
            label, prem, hyp = row
            return Example(label=label, text=_encode(vocab, hyp),
                           premise=_encode(vocab, prem))
        label, text = row
        return Example(label=label, text=_encode(vocab, text))

    return Split(train=[conv(r) for r in rows["train"]],
                 dev=[conv(r) for r in rows["dev"]],
                 test=[conv(r) for r in rows["test"]])


def _load_corpus(data_dir: Path, vocab: Vocab | None = None):
    """Corpus from a make-synth directory. With vocab=None, builds the
    vocabulary from the train split (training); otherwise encodes with the
    given (checkpoint) vocabulary."""
    data_dir = Path(data_dir)
    task = _read_meta(data_dir)["task"]
    rows = _load_rows(data_dir, task)
    if vocab is None:
        seqs = []
        for row in rows["train"]:
            if task == "nli":
                seqs += [td.tokenize(row[1]), td.tokenize(row[2])]
            else:
                seqs.append(td.tokenize(row[1]))
        vocab = td.build_vocab(seqs)
    return _rows_to_split(rows, vocab, task), vocab, task


def _class_subset(examples: list[Example], y: int) -> list[Example]:
    return [ex for ex in examples if ex.label == y]


def _prepare_out(path):
    """Create the parent directory of an output file; passes None through."""
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# subcommands


def _cmd_make_synth(args) -> int:
    defaults = dict(task="sentiment", seed=11, train_size=2400, dev_size=400,
                    test_size=400)
    cfg = _resolve(args, defaults)
    if cfg["task"] not in ("sentiment", "nli"):
        raise ConfigError(f"unknown task {cfg['task']!r}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    split, vocab = td.make_synthetic(
        cfg["task"], seed=cfg["seed"],
        sizes=(cfg["train_size"], cfg["dev_size"], cfg["test_size"]))
    for part, examples in (("train", split.train), ("dev", split.dev),
                           ("test", split.test)):
        if cfg["task"] == "nli":
            rows = [(ex.label, td.detokenize(vocab.decode(ex.premise)),
                     td.detokenize(vocab.decode(ex.text)))
                    for ex in examples]
            td.write_pair_corpus(out_dir / f"{part}.tsv", rows)
        else:
            rows = [(ex.label, td.detokenize(vocab.decode(ex.text)))
                    for ex in examples]
            td.write_single_corpus(out_dir / f"{part}.tsv", rows)
    lexicon = td.sentiment_lexicon() if cfg["task"] == "sentiment" else set()
    td.write_lexicon(out_dir / "lexicon.txt", lexicon)
    meta = dict(cfg, config_hash=config_hash(cfg))
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2,
                                                  sort_keys=True) + "\n")
    log.info("wrote %s (%d/%d/%d examples)", out_dir, len(split.train),
             len(split.dev), len(split.test))
    return 0


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(**{k: resolved[k] for k in _TRAINCFG_KEYS})


def _cmd_train_arae(args) -> int:
    resolved = _resolve(args, RECIPES["arae"])
    split, vocab, _ = _load_corpus(args.data_dir)
    model, metrics = train_arae(
        split, vocab, _train_config(resolved),
        emb_dim=resolved["emb_dim"], hidden_dim=resolved["hidden_dim"],
        latent_dim=resolved["latent_dim"], noise_dim=resolved["noise_dim"],
        gen_hidden=resolved["gen_hidden"],
        critic_hidden=resolved["critic_hidden"],
        latent_scale=resolved["latent_scale"],
        metrics_path=_prepare_out(args.metrics))
    save_checkpoint(model, _prepare_out(args.out), seed=resolved["seed"],
                    config_hash=config_hash(resolved))
    log.info("final reconstruction accuracy: %.4f",
             metrics[-1]["recon_acc"] if metrics else float("nan"))
    return 0


def _cmd_train_classifier(args) -> int:
    if args.arch not in ("lstm2", "bag", "pair"):
        raise ConfigError(f"unknown arch {args.arch!r}")
    resolved = _resolve(args, RECIPES[args.arch])
    split, vocab, task = _load_corpus(args.data_dir)
    n_classes = max(ex.label for ex in split.train) + 1
    if args.arch == "pair" and task != "nli":
        raise ConfigError("pair classifier needs an nli corpus")
    if args.arch != "pair" and task == "nli":
        raise ConfigError(f"{args.arch} classifier needs a single-text corpus")
    model, metrics = train_classifier(
        split, vocab, args.arch, n_classes, _train_config(resolved),
        emb_dim=resolved["emb_dim"], hidden_dim=resolved["hidden_dim"],
        metrics_path=_prepare_out(args.metrics))
    save_checkpoint(model, _prepare_out(args.out), seed=resolved["seed"],
                    config_hash=config_hash(resolved))
    log.info("final dev accuracy: %.4f",
             metrics[-1]["dev_acc"] if metrics else float("nan"))
    return 0


def _cmd_train_lm(args) -> int:
    resolved = _resolve(args, RECIPES["lm"])
    split, vocab, _ = _load_corpus(args.data_dir)
    model, metrics = train_lm(
        split, vocab, _train_config(resolved),
        emb_dim=resolved["emb_dim"], hidden_dim=resolved["hidden_dim"],
        metrics_path=_prepare_out(args.metrics))
    save_checkpoint(model, _prepare_out(args.out), seed=resolved["seed"],
                    config_hash=config_hash(resolved))
    log.info("final dev cross-entropy: %.4f",
             metrics[-1]["dev_ce"] if metrics else float("nan"))
    return 0


def _load_attack_models(args, need_arae: bool = True):
    victim, _ = load_checkpoint(args.victim)
    lm, _ = load_checkpoint(args.lm)
    generator = None
    if args.arae:
        generator, _ = load_checkpoint(args.arae)
    elif need_arae:
        raise ConfigError("--arae checkpoint is required")
    data_dir = Path(args.data_dir)
    split, _, task = _load_corpus(data_dir, vocab=victim.vocab)
    exclude = set()
    lex_path = (Path(args.exclude_lexicon) if args.exclude_lexicon
                else data_dir / "lexicon.txt")
    if lex_path.exists():
        exclude = td.load_lexicon(lex_path)
    return generator, victim, lm, split, task, exclude


def _require_class(resolved: dict, split: Split) -> int:
    y = resolved["attacked_class"]
    labels = {ex.label for ex in split.dev}
    if y not in labels:
        raise ConfigError(f"attacked_class must be one of {sorted(labels)}")
    return y


def _attack_outputs(args, selected, candidates, kind: str, digest: str,
                    victim, split, y) -> None:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    m1_test = accuracy_under_trigger(victim, split.test, selected.tokens, y)
    write_candidates(out_dir / "candidates.jsonl", candidates, kind=kind,
                     config_hash=digest)
    write_selected(out_dir / "selected.json", selected, m1_test=m1_test,
                   kind=kind, config_hash=digest)
    log.info("%s selected trigger: %s (m1 dev %.4f, test %.4f, m2 %.4f)",
             kind, " ".join(selected.tokens), selected.m1, m1_test,
             selected.m2)


def _cmd_attack(args) -> int:
    resolved = _resolve(args, ATTACK_DEFAULTS)
    generator, victim, lm, split, _, exclude = _load_attack_models(args)
    y = _require_class(resolved, split)
    mask = td.intersect_vocab(victim.vocab, generator.vocab, exclude=exclude)
    models = AttackModels(generator, victim, lm, mask)
    cfg = AttackConfig(**{k: resolved[k] for k in ATTACK_DEFAULTS
                          if k != "workers"})
    dev_subset = _class_subset(split.dev, y)
    selected, candidates = nuts_attack(models, dev_subset, cfg,
                                       workers=resolved["workers"])
    _attack_outputs(args, selected, candidates, "nuts",
                    config_hash(resolved), victim, split, y)
    return 0


def _cmd_attack_baseline(args) -> int:
    resolved = _resolve(args, BASELINE_DEFAULTS)
    kind = args.kind
    need_arae = kind == "random-arae"
    generator, victim, lm, split, _, exclude = _load_attack_models(
        args, need_arae=need_arae)
    y = _require_class(resolved, split)
    dev_subset = _class_subset(split.dev, y)
    digest = config_hash(resolved)
    L = resolved["trigger_length"]
    n = resolved["n_inits"]

    if kind == "random-arae":
        mask = td.intersect_vocab(victim.vocab, generator.vocab,
                                  exclude=exclude)
        selected, candidates = random_arae_attack(
            generator, victim, lm, dev_subset, n, L, mask,
            seed=resolved["seed"])
    elif kind == "random-seq":
        vocab = generator.vocab if generator else victim.vocab
        other = victim.vocab if generator else victim.vocab
        mask = td.intersect_vocab(other, vocab, exclude=exclude)
        selected, candidates = random_sequence_attack(
            vocab, mask, victim, lm, dev_subset, n, L,
            seed=resolved["seed"])
    elif kind == "token-gradient":
        if generator is not None:
            mask = np.zeros(len(victim.vocab), dtype=bool)
            gen_mask = td.intersect_vocab(victim.vocab, generator.vocab,
                                          exclude=exclude)
            for gid in np.flatnonzero(gen_mask):
                mask[victim.vocab.stoi[generator.vocab.itos[gid]]] = True
        else:
            mask = td.intersect_vocab(victim.vocab, victim.vocab,
                                      exclude=exclude)
        tg_cfg = TokenGradientConfig(
            top_k=resolved["top_k"], beam_width=resolved["beam_width"],
            max_sweeps=resolved["max_sweeps"], filler=resolved["filler"])
        tokens, _ = token_gradient_attack(victim, dev_subset, L, mask, tg_cfg)
        m1 = accuracy_under_trigger(victim, dev_subset, tokens, y)
        cand = TriggerCandidate(init_seed=resolved["seed"],
                                n_final=Tensor(np.zeros(1)), tokens=tokens,
                                m1=m1, m2=lm.avg_ce(tokens), score=m1)
        selected, candidates = cand, [cand]
    else:
        raise ConfigError(f"unknown baseline kind {kind!r}")

    _attack_outputs(args, selected, candidates, kind, digest, victim,
                    split, y)
    return 0


def _cmd_evaluate(args) -> int:
    defaults = dict(attacked_class=-1)
    resolved = _resolve(args, defaults)
    victim, _ = load_checkpoint(args.victim)
    lm, _ = load_checkpoint(args.lm)
    split, _, task = _load_corpus(Path(args.data_dir), vocab=victim.vocab)
    selected = json.loads(Path(args.selected).read_text())
    trigger = selected["tokens"]
    kind = selected.get("kind", "nuts")
    y = _require_class(resolved, split)

    classes = sorted({ex.label for ex in split.test})
    clean = {str(c): accuracy_under_trigger(victim, split.test, [], c)
             for c in classes}
    m1_dev = accuracy_under_trigger(victim, split.dev, trigger, y)
    m1_test = accuracy_under_trigger(victim, split.test, trigger, y)
    m2 = lm.avg_ce(trigger)

    # benign-vs-trigger stat deltas over the attacked-class test sentences
    benign = _class_subset(split.test, y)
    benign_tokens = [victim.vocab.decode(ex.text) for ex in benign]
    benign_ce = float(np.mean([lm.avg_ce(toks) for toks in benign_tokens]))
    benign_freq = float(np.mean(
        [avg_word_frequency(toks, victim.vocab, normalized=True)
         for toks in benign_tokens]))
    deltas = {
        "lm_ce": stat_delta(benign_ce, m2),
        "word_freq_normalized": stat_delta(
            benign_freq,
            avg_word_frequency(trigger, victim.vocab, normalized=True)),
    }

    report = EvalReport(
        task=task, attack_kind=kind, trigger=trigger, attacked_class=y,
        clean_acc=clean, attacked_acc=m1_test, m1_dev=m1_dev,
        m1_test=m1_test, m2=m2,
        word_freq=avg_word_frequency(trigger, victim.vocab),
        word_freq_normalized=avg_word_frequency(trigger, victim.vocab,
                                                normalized=True),
        stat_deltas=deltas, config_hash=selected.get("config_hash", ""))
    Path(_prepare_out(args.out_json)).write_text(
        json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n")
    text = report.to_text()
    if args.out_text:
        Path(_prepare_out(args.out_text)).write_text(text + "\n")
    print(text)
    return 0


def _cmd_transfer(args) -> int:
    defaults = dict(attacked_class=-1)
    resolved = _resolve(args, defaults)
    victim, _ = load_checkpoint(args.victim)
    split, _, _ = _load_corpus(Path(args.data_dir), vocab=victim.vocab)
    selected = json.loads(Path(args.selected).read_text())
    trigger = selected["tokens"]
    y = _require_class(resolved, split)
    res = transfer_eval(trigger, victim, split.test, y)
    payload = {"trigger": trigger, "attacked_class": y, "clean": res.clean,
               "attacked": res.attacked, "drop": res.drop,
               "config_hash": selected.get("config_hash", "")}
    Path(_prepare_out(args.out)).write_text(json.dumps(payload, indent=2, sort_keys=True)
                              + "\n")
    log.info("transfer drop: %.4f (clean %.4f -> attacked %.4f)", res.drop,
             res.clean, res.attacked)
    return 0


def _cmd_stats(args) -> int:
    rows = [json.loads(line)
            for line in Path(args.candidates).read_text().splitlines()
            if line.strip()]
    if not rows:
        raise ConfigError(f"{args.candidates} holds no candidate records")
    cands = [SimpleNamespace(m1=r["m1_dev"], m2=r["m2"]) for r in rows]
    out = candidate_stats(cands)
    out["count"] = len(cands)
    out["config_hash"] = rows[0].get("config_hash", "")
    Path(_prepare_out(args.out)).write_text(json.dumps(out, indent=2, sort_keys=True)
                              + "\n")
    log.info("candidate stats: %s", json.dumps(out, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nutsearch",
        description="Natural universal trigger search workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="emit a synthetic task corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", default=None)
    _add_override_flags(p, dict(task="sentiment", seed=11, train_size=2400,
                                dev_size=400, test_size=400))
    p.set_defaults(func=_cmd_make_synth)

    for name, fn, recipe in (("train-arae", _cmd_train_arae, "arae"),
                             ("train-lm", _cmd_train_lm, "lm")):
        p = sub.add_parser(name, help=f"train the {recipe} model")
        p.add_argument("--data-dir", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--metrics", default=None)
        p.add_argument("--config", default=None)
        _add_override_flags(p, RECIPES[recipe])
        p.set_defaults(func=fn)

    p = sub.add_parser("train-classifier", help="train a victim classifier")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--arch", required=True, choices=("lstm2", "bag", "pair"))
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--config", default=None)
    _add_override_flags(p, RECIPES["lstm2"])
    p.set_defaults(func=_cmd_train_classifier)

    p = sub.add_parser("attack", help="run the noise-space trigger search")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--arae", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--exclude-lexicon", default=None)
    p.add_argument("--config", default=None)
    _add_override_flags(p, ATTACK_DEFAULTS)
    p.set_defaults(func=_cmd_attack)

    p = sub.add_parser("attack-baseline", help="run a comparison attack")
    p.add_argument("--kind", required=True,
                   choices=("token-gradient", "random-arae", "random-seq"))
    p.add_argument("--data-dir", required=True)
    p.add_argument("--arae", default=None)
    p.add_argument("--victim", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--exclude-lexicon", default=None)
    p.add_argument("--config", default=None)
    _add_override_flags(p, BASELINE_DEFAULTS)
    p.set_defaults(func=_cmd_attack_baseline)

    p = sub.add_parser("evaluate", help="full report for a selected trigger")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--selected", required=True)
    p.add_argument("--out-json", required=True)
    p.add_argument("--out-text", default=None)
    p.add_argument("--config", default=None)
    _add_override_flags(p, dict(attacked_class=-1))
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("transfer", help="apply a trigger to another victim")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--victim", required=True)
    p.add_argument("--selected", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_override_flags(p, dict(attacked_class=-1))
    p.set_defaults(func=_cmd_transfer)

    p = sub.add_parser("stats", help="population statistics of a dump")
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stats)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        log.error("%s", err)
        return 2
    except (NutsearchError, OSError) as err:
        log.error("%s", err)
        return 1


if __name__ == "__main__":
    sys.exit(main())
