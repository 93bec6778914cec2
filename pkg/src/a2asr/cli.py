"""Command-line entry point.

Every subcommand reads an optional TOML config plus ``--section.key=value``
overrides.  Outputs go under ``<runs>/<hash>/`` where the hash covers every
section that shapes the trained model; decode outputs additionally carry a
hash of the ``[decode]`` section in their file names.  Exit status is 0 on
success, 2 on a configuration error and 3 on a data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import tensor as T
from .config import TRAINING_SECTIONS, TrainConfig, apply_overrides, config_hash, dump_config, load_config
from .data import Vocabulary, generate_corpus, load_corpus, regenerate_corpus, save_corpus
from .decode import (
    average_checkpoints,
    cer,
    decode_utterances,
    format_table,
    read_jsonl,
    report,
    write_jsonl,
)
from .errors import ConfigError, DataError
from .losses import load_priors
from .model import save_checkpoint
from .presets import PRESETS, run_grid
from .train import load_lm, load_model, lm_text, pretrain_lm, save_lm, text_perplexity, train

log = logging.getLogger("a2asr")

EXIT_CONFIG, EXIT_DATA = 2, 3


def _config(args, extra) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    bad = [e for e in extra if not (e.startswith("--") and "=" in e and "." in e.split("=", 1)[0])]
    if bad:
        raise ConfigError(f"unrecognised arguments: {' '.join(bad)}")
    return apply_overrides(cfg, extra) if extra else cfg


def _run_dir(args, cfg: TrainConfig) -> Path:
    path = Path(args.runs) / config_hash(cfg, TRAINING_SECTIONS)
    path.mkdir(parents=True, exist_ok=True)
    (path / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    return path


def _corpus(run_dir: Path, cfg: TrainConfig):
    """Corpus of this run, generated and persisted on first use."""
    data_dir = run_dir / "corpus"
    if (data_dir / "manifest.json").exists():
        return load_corpus(data_dir)
    corpus = generate_corpus(cfg.data)
    save_corpus(corpus, data_dir)
    return corpus


def _trained(run_dir: Path, args):
    ckpt = Path(args.checkpoint) if getattr(args, "checkpoint", None) else run_dir / "averaged.ckpt"
    if not ckpt.exists():
        raise DataError(f"checkpoint {ckpt} not found; run `train` first")
    model = load_model(ckpt)
    vocab = Vocabulary(json.loads((run_dir / "vocab.json").read_text(encoding="utf-8")))
    priors = load_priors(run_dir / "priors.json")
    return model, vocab, priors


# -- subcommands ---------------------------------------------------------------
def cmd_gen_data(args, cfg):
    if args.regenerate:
        corpus = regenerate_corpus(args.regenerate)
        out = Path(args.out or args.regenerate)
    else:
        if args.seed is not None:
            cfg = apply_overrides(cfg, {"data.seed": str(args.seed)})
        corpus = generate_corpus(cfg.data)
        out = Path(args.out) if args.out else _run_dir(args, cfg) / "corpus"
    save_corpus(corpus, out)
    sizes = {split: len(utts) for split, utts in corpus.splits.items()}
    print(f"wrote corpus to {out}: {sizes}")


def cmd_pretrain_lm(args, cfg):
    run_dir = _run_dir(args, cfg)
    lm, vocab = pretrain_lm(cfg, log.info)
    save_lm(run_dir / "lm.ckpt", lm, vocab)
    ppl = text_perplexity(lm.logits, lm_text(cfg, held_out=True), vocab)
    print(f"wrote {run_dir / 'lm.ckpt'}; held-out perplexity {ppl:.3f}")


def cmd_train(args, cfg):
    run_dir = _run_dir(args, cfg)
    corpus = _corpus(run_dir, cfg)
    lm = None
    if cfg.train.lm_transfer and (run_dir / "lm.ckpt").exists():
        lm = load_lm(run_dir / "lm.ckpt")
    result = train(cfg, corpus, run_dir, lm=lm, log=log.info)
    print(f"trained; averaged checkpoint {result.averaged}; ledger {result.ledger}")


def _decode(run_dir, cfg, args, tau):
    model, vocab, priors = _trained(run_dir, args)
    corpus = _corpus(run_dir, cfg)
    utts = corpus.splits[args.split]
    dc = dataclasses.replace(cfg.decode, tau=tau)
    return decode_utterances(model, vocab, utts, dc, priors if tau > 0 else None)


def cmd_decode(args, cfg):
    run_dir = _run_dir(args, cfg)
    records = _decode(run_dir, cfg, args, cfg.decode.tau)
    stem = f"decode-{args.split}-{config_hash(cfg, ['decode'])[:8]}"
    write_jsonl(run_dir / f"{stem}.jsonl", records)
    rep = report(records, cfg.data.languages)
    (run_dir / f"{stem}.report.json").write_text(rep.to_json(), encoding="utf-8")
    print(format_table({stem: rep}, cfg.data.languages))


def cmd_eval(args, cfg):
    records = read_jsonl(args.dump)
    if not records:
        raise DataError(f"{args.dump} holds no records")
    for rec in records:
        missing = {"lang", "ref", "hyp"} - set(rec)
        if missing:
            raise DataError(f"record {rec.get('id')} lacks {sorted(missing)}")
        rec["cer"] = cer(rec["hyp"], rec["ref"])
    langs = [lang for lang in cfg.data.languages if any(r["lang"] == lang for r in records)]
    rep = report(records, langs or None)
    out = Path(args.out) if args.out else Path(args.dump).with_suffix(".report.json")
    out.write_text(rep.to_json(), encoding="utf-8")
    print(format_table({Path(args.dump).stem: rep}, rep.languages))


def cmd_average(args, cfg):
    params, header = average_checkpoints(args.checkpoints, args.n)
    save_checkpoint(args.out, params, header["config"], {"averaged": [str(p) for p in args.checkpoints[-args.n :]]})
    print(f"averaged {min(args.n, len(args.checkpoints))} checkpoints into {args.out}")


def cmd_sweep_tau(args, cfg):
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --values: {exc}") from exc
    if not values or any(v < 0 for v in values):
        raise ConfigError("--values needs non-negative numbers")
    run_dir = _run_dir(args, cfg)
    rows, payload = {}, {}
    for tau in values:
        records = _decode(run_dir, cfg, args, tau)
        rep = report(records, cfg.data.languages)
        rows[f"tau={tau:g}"] = rep
        payload[f"{tau:g}"] = json.loads(rep.to_json())
    table = format_table(rows, cfg.data.languages)
    stem = f"sweep-tau-{args.split}-{config_hash(cfg, ['decode'])[:8]}"
    (run_dir / f"{stem}.json").write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    (run_dir / f"{stem}.txt").write_text(table + "\n", encoding="utf-8")
    print(table)


def cmd_preset(args, cfg):
    base = load_config(args.config) if args.config else TrainConfig()
    overrides = list(args.extra)
    root = Path(args.runs) / f"presets-{config_hash(cfg)}"
    _, table = run_grid(args.names, root, overrides, base, log.info)
    print(table)


# -- parser --------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2asr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--runs", default="runs", help="root directory for run outputs")
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "generate and persist the synthetic corpus")
    p.add_argument("--seed", type=int, help="corpus seed (shorthand for --data.seed)")
    p.add_argument("--out", help="output directory (default: <run dir>/corpus)")
    p.add_argument("--regenerate", metavar="DIR", help="rebuild the corpus described by DIR/manifest.json")
    add("pretrain-lm", cmd_pretrain_lm, "train the text-only LM used for decoder transfer")
    add("train", cmd_train, "train a model")
    for name, func, text in (("decode", cmd_decode, "beam-search decode a split"),
                             ("sweep-tau", cmd_sweep_tau, "decode once per inference-time tau")):
        p = add(name, func, text)
        p.add_argument("--split", default="test", choices=("train", "valid", "test"))
        p.add_argument("--checkpoint", help="checkpoint to decode with (default: averaged)")
        if name == "sweep-tau":
            p.add_argument("--values", default="0,0.1,0.2,0.3,0.4,0.5", help="comma-separated tau values")
    p = add("eval", cmd_eval, "recompute CERs and the report from a decode dump")
    p.add_argument("dump", help="decode JSON-lines file")
    p.add_argument("--out", help="report path (default: next to the dump)")
    p = add("average-ckpt", cmd_average, "average the last N checkpoints")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--out", required=True)
    p = add("preset", cmd_preset, "run named presets end to end and print the CER table")
    p.add_argument("names", nargs="+", metavar="NAME",
                   help=f"one or more of: {', '.join(sorted(PRESETS))}")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    args.extra = extra
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args, extra)
        T.set_precision(cfg.train.precision)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
