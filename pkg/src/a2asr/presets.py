"""Named experiment configurations and an end-to-end runner that emits CER tables.

Every preset is a set of dotted overrides on top of :data:`BASE`.  Presets
vary the sampling strategy, whether the decoder starts from a text LM, the
adapter type, placement and grouping, and where prior adjustment happens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import tensor as T
from .config import TrainConfig, apply_overrides, config_hash, dump_config
from .data import Corpus, generate_corpus
from .decode import Report, decode_utterances, format_table, report, write_jsonl
from .errors import ConfigError
from .train import pretrain_lm, train

# shared by every preset so that pairwise config diffs isolate the studied factor
BASE = {"loss.scheduled_sampling": True}

BALANCED = {"train.sampling": "balanced"}
LM = {"train.lm_transfer": True}
DUAL = {"model.adapter_kind": "dual"}
ADJUST_TRAIN = {"loss.tau": 0.3}
ADJUST_INFER = {"decode.tau": 0.3}


def _merge(*parts) -> dict:
    out: dict = {}
    for p in parts:
        out.update(p)
    return out


PRESETS = {
    # main system rows
    "mono": {"train.monolingual": True},
    "smt": {},
    "bs": BALANCED,
    "lan_specific": _merge(BALANCED, LM, {"model.adapter_kind": "lang"}),
    "dual_adapters": _merge(BALANCED, LM, DUAL),
    "a2_adjust_infer": _merge(BALANCED, LM, DUAL, ADJUST_INFER),
    "a2_adjust_train": _merge(BALANCED, LM, DUAL, ADJUST_TRAIN),
    # decoder initialised from the text LM
    "mono_lm": {"train.monolingual": True, **LM},
    "smt_lm": LM,
    "bs_lm": _merge(BALANCED, LM),
    # adapters without LM transfer
    "lan_specific_nolm": _merge(BALANCED, {"model.adapter_kind": "lang"}),
    "dual_adapters_nolm": _merge(BALANCED, DUAL),
    "a2_adjust_train_nolm": _merge(BALANCED, DUAL, ADJUST_TRAIN),
    # prior adjustment on the baselines
    "smt_adjust_train": ADJUST_TRAIN,
    "smt_adjust_infer": ADJUST_INFER,
    "smt_lm_adjust_train": _merge(LM, ADJUST_TRAIN),
    "smt_lm_adjust_infer": _merge(LM, ADJUST_INFER),
    "bs_lm_adjust_train": _merge(BALANCED, LM, ADJUST_TRAIN),
    "bs_lm_adjust_infer": _merge(BALANCED, LM, ADJUST_INFER),
    # adapter placement (bs_lm is the no-adapter row)
    "dual_adapters_decoder": _merge(BALANCED, LM, DUAL, {"model.adapter_placement": "decoder"}),
    "dual_adapters_both": _merge(BALANCED, LM, DUAL, {"model.adapter_placement": "both"}),
    # language-group adapters
    "dual_adapters_by_family": _merge(BALANCED, LM, DUAL, {"model.adapter_grouping": "by_family"}),
    "dual_adapters_by_script": _merge(BALANCED, LM, DUAL, {"model.adapter_grouping": "by_script"}),
}

# rows of the main results table, in display order
MAIN_TABLE = ["mono", "smt", "bs", "lan_specific", "dual_adapters", "a2_adjust_infer", "a2_adjust_train"]


def preset_config(name: str, base: TrainConfig | None = None, overrides=None) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(base or TrainConfig(), _merge(BASE, PRESETS[name]))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


@dataclass
class PresetResult:
    name: str
    config: TrainConfig
    report: Report
    table: str
    run_dir: Path | None
    records: list


def run_config(name: str, cfg: TrainConfig, corpus: Corpus | None = None, root=None, log=None) -> PresetResult:
    """Train and decode one configuration; write artefacts under ``root/<name>-<hash>``."""
    corpus = corpus or generate_corpus(cfg.data)
    run_dir = None
    if root is not None:
        run_dir = Path(root) / f"{name}-{config_hash(cfg)}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    lm = pretrain_lm(cfg, log) if cfg.train.lm_transfer else None
    groups = [[lang] for lang in cfg.data.languages] if cfg.train.monolingual else [cfg.data.languages]
    records = []
    for langs in groups:
        sub_dir = None
        if run_dir is not None:
            sub_dir = run_dir / langs[0] if cfg.train.monolingual else run_dir
        result = train(cfg, corpus, sub_dir, lm=lm, languages=langs, log=log)
        test = [u for u in corpus.splits["test"] if u.lang in langs]
        priors = result.priors if cfg.decode.tau > 0 else None
        records.extend(decode_utterances(result.model, result.vocab, test, cfg.decode, priors))
    T.set_precision(cfg.train.precision)
    rep = report(records, cfg.data.languages)
    table = format_table({name: rep}, cfg.data.languages)
    if run_dir is not None:
        write_jsonl(run_dir / "decode.jsonl", records)
        (run_dir / "report.json").write_text(rep.to_json(), encoding="utf-8")
        (run_dir / "table.txt").write_text(table + "\n", encoding="utf-8")
    return PresetResult(name, cfg, rep, table, run_dir, records)


def run_preset(name: str, root=None, overrides=None, base: TrainConfig | None = None, corpus=None, log=None) -> PresetResult:
    return run_config(name, preset_config(name, base, overrides), corpus, root, log)


def run_grid(names, root=None, overrides=None, base: TrainConfig | None = None, log=None):
    """Run several presets on one shared corpus; returns ``(results, table)``."""
    unknown = [n for n in names if n not in PRESETS]
    if unknown:
        raise ConfigError(f"unknown preset(s) {unknown}; choose from {sorted(PRESETS)}")
    results = {}
    corpus = None
    for name in names:
        cfg = preset_config(name, base, overrides)
        if corpus is None or corpus.spec != cfg.data:
            corpus = generate_corpus(cfg.data)
        results[name] = run_config(name, cfg, corpus, root, log)
    langs = next(iter(results.values())).config.data.languages
    table = format_table({n: r.report for n, r in results.items()}, langs)
    if root is not None:
        payload = {n: json.loads(r.report.to_json()) for n, r in results.items()}
        Path(root, "grid.json").write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
        Path(root, "grid.txt").write_text(table + "\n", encoding="utf-8")
    return results, table
