"""Training loop: sampling, hybrid loss, noam-scheduled Adam, checkpoints, text LM pretraining."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import (
    Corpus,
    Vocabulary,
    assemble_batch_balanced,
    build_vocabulary,
    generate_text,
    make_batch,
    random_epoch,
)
from .decode import average_checkpoints, cer
from .losses import (
    ClassPriors,
    adjust_logits,
    attention_loss,
    ctc_loss,
    estimate_priors,
    mtl_loss,
    save_priors,
    scheduled_sample,
)
from .model import (
    ModelConfig,
    SpeechTransformer,
    TextLM,
    build_vocab_map,
    save_checkpoint,
    transfer_parameters,
    transferred_names,
)


class TrainingError(RuntimeError):
    pass


# -- optimisation ----------------------------------------------------------------
def noam_lr(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * d^-0.5 * min(step^-0.5, step * warmup^-1.5)`` for ``step >= 1``."""
    if step < 1:
        raise ValueError("noam schedule is defined from step 1")
    return scale * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(grads: dict, max_norm: float):
    """Rescale ``grads`` so their global L2 norm is at most ``max_norm``.

    Returns ``(clipped, norm_before, norm_after)``.
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm, norm
    factor = max_norm / (norm + 1e-12)
    clipped = {k: g * factor for k, g in grads.items()}
    return clipped, norm, global_norm(clipped)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def update(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class Trainer:
    """Gradient accumulation, clipping and scheduled Adam over a parameter dict.

    Call :meth:`accumulate` once per micro-batch; :meth:`step` applies the
    mean of the accumulated gradients and resets the buffer.
    """

    def __init__(self, params: dict, d_model: int, warmup: int, peak_scale: float = 1.0,
                 grad_clip: float = 5.0, beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.d_model, self.warmup, self.peak_scale, self.grad_clip = d_model, warmup, peak_scale, grad_clip
        self.adam = Adam(beta1, beta2, eps)
        self.buffer: dict = {}
        self.micro = 0
        self.step_count = 0

    def accumulate(self, grads: dict) -> None:
        for name, g in grads.items():
            if name not in self.params:
                continue
            if name in self.buffer:
                self.buffer[name] += g
            else:
                self.buffer[name] = np.array(g, dtype=np.float64)
        self.micro += 1

    def step(self) -> dict:
        if self.micro == 0:
            raise RuntimeError("step() without accumulated gradients")
        grads = {k: g / self.micro for k, g in self.buffer.items()}
        grads, pre, post = clip_gradients(grads, self.grad_clip)
        self.step_count += 1
        lr = noam_lr(self.step_count, self.d_model, self.warmup, self.peak_scale)
        self.adam.update(self.params, grads, lr)
        self.buffer, self.micro = {}, 0
        return {"lr": lr, "grad_norm": pre, "clipped_norm": post}


# -- loss --------------------------------------------------------------------------
def batch_loss(model: SpeechTransformer, batch, cfg: TrainConfig, priors: ClassPriors | None,
               ss_prob: float = 0.0, rng: np.random.Generator | None = None):
    """Hybrid loss of one batch; returns ``(total, components)``.

    The CTC term is averaged over utterances whose target fits the input.
    Logits are prior-adjusted before the attention loss when ``loss.tau > 0``.
    """
    lc = cfg.loss
    route = model.route(batch.langs)
    h_enc, enc_mask = model.encode(batch.feats, batch.feat_lens, route)
    enc_lens = enc_mask.sum(axis=1)
    ctc_lp = T.log_softmax(model.ctc_logits(h_enc), axis=-1)
    per_utt = ctc_loss(ctc_lp, batch.ctc_targets, enc_lens, model.blank)
    finite = np.isfinite(per_utt.data)
    if not finite.any():
        raise TrainingError(f"no utterance in batch {batch.ids} fits its CTC target")
    ctc = T.where(finite, per_utt, 0.0).sum() * (1.0 / int(finite.sum()))

    tau = lc.tau if priors is not None else 0.0
    ys_in = batch.ys_in
    if ss_prob > 0.0:
        with T.no_grad():
            first = model.decode(ys_in, h_enc, enc_mask, route, batch.ys_lens)
            p_adj = adjust_logits(first, priors, tau).data if tau else first.data
        mixed = scheduled_sample(p_adj[:, :-1], ys_in[:, 1:], ss_prob, rng)
        ys_in = ys_in.copy()
        real = batch.ys_out[:, :-1] >= 0
        ys_in[:, 1:] = np.where(real, mixed, ys_in[:, 1:])
    logits = model.decode(ys_in, h_enc, enc_mask, route, batch.ys_lens)
    if tau:
        logits = adjust_logits(logits, priors, tau)
    attn = attention_loss(logits, batch.ys_out, lc.label_smoothing, lc.kl_direction)
    total = mtl_loss(ctc, attn, lc.ctc_weight)
    return total, {"ctc": float(ctc.data), "attn": float(attn.data), "total": float(total.data)}


# -- setup helpers -----------------------------------------------------------------
def model_config(cfg: TrainConfig, vocab: Vocabulary, languages) -> ModelConfig:
    m = cfg.model
    grouping = json.loads(m.adapter_grouping) if m.adapter_grouping.startswith("{") else m.adapter_grouping
    return ModelConfig(
        feat_dim=cfg.data.feat_dim, vocab_size=vocab.n_out, d_model=m.d_model, n_heads=m.n_heads,
        d_ff=m.d_ff, enc_layers=m.enc_layers, dec_layers=m.dec_layers, d_dec=m.d_dec,
        dec_heads=m.dec_heads, dec_ff=m.dec_ff, stack=m.stack, dropout=m.dropout,
        languages=list(languages), adapter_kind=m.adapter_kind, adapter_placement=m.adapter_placement,
        adapter_bottleneck=m.adapter_bottleneck, adapter_grouping=grouping,
        adapter_residual=m.adapter_residual,
    )


def corpus_priors(utts, vocab: Vocabulary) -> ClassPriors:
    """Priors over decoder output classes, counting each target and its ``<eos>``."""
    seqs = [vocab.encode(u.text) + [vocab.eos] for u in utts]
    return estimate_priors(seqs, vocab.n_out)


def set_dtype(model, precision: str):
    T.set_precision(precision)
    return model.astype(T.get_dtype())


def _batches(cfg: TrainConfig, rng, train_utts, by_lang, languages):
    t = cfg.train
    if t.sampling == "random":
        yield from random_epoch(rng, train_utts, t.batch_size)
        return
    n = max(1, len(train_utts) // (t.per_language * len(languages)))
    for _ in range(n):
        yield assemble_batch_balanced(rng, by_lang, t.per_language, languages)


# -- validation --------------------------------------------------------------------
def greedy_decode(model: SpeechTransformer, batch, vocab: Vocabulary, priors=None, tau: float = 0.0) -> list:
    """Batched attention-only argmax decoding (beam 1, no CTC)."""
    with T.no_grad():
        route = model.route(batch.langs)
        h_enc, mask = model.encode(batch.feats, batch.feat_lens, route)
        n = len(batch)
        limit = mask.sum(axis=1)
        seqs = np.full((n, 1), vocab.sos, dtype=np.int64)
        done = np.zeros(n, dtype=bool)
        for _ in range(int(limit.max())):
            f = model.decode(seqs, h_enc, mask, route).data[:, -1]
            if tau and priors is not None:
                f = adjust_logits(f, priors, tau)
            nxt = np.where(done, vocab.eos, f.argmax(axis=-1))
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == vocab.eos
            if done.all():
                break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for tok in row:
            if tok == vocab.eos:
                break
            toks.append(int(tok))
        out.append(vocab.decode(toks))
    return out


def validate(model, utts, vocab, cfg: TrainConfig, priors, chunk: int = 64) -> dict:
    losses, edits, chars = [], 0.0, 0
    with T.no_grad():
        for start in range(0, len(utts), chunk):
            batch = make_batch(utts[start : start + chunk], vocab)
            total, _ = batch_loss(model, batch, cfg, priors)
            losses.append(total.data * len(batch))
            hyps = greedy_decode(model, batch, vocab, priors, cfg.decode.tau)
            for hyp, ref in zip(hyps, batch.texts):
                edits += cer(hyp, ref) * len(ref)
                chars += len(ref)
    return {"valid_loss": float(np.sum(losses) / len(utts)), "valid_cer": edits / chars}


# -- ledger ------------------------------------------------------------------------
@dataclass
class RunLedger:
    """Append-only JSON-lines training log, flushed once per epoch.

    Wall-clock time goes to a separate file so that the ledger itself is a
    deterministic function of config and seed.
    """

    path: Path
    timing_path: Path | None = None
    pending: list = field(default_factory=list)

    def log(self, **record) -> None:
        self.pending.append(record)

    def flush(self, wall_clock: float | None = None) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            for rec in self.pending:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if wall_clock is not None and self.timing_path is not None:
            with open(self.timing_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"wall_clock": wall_clock}) + "\n")
        self.pending = []

    @staticmethod
    def read(path) -> list:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# -- text LM -----------------------------------------------------------------------
def text_batch(lines, vocab: Vocabulary):
    seqs = [vocab.encode(line) for line in lines]
    width = max(len(s) for s in seqs) + 1
    ids = np.full((len(seqs), width), vocab.eos, dtype=np.int64)
    out = np.full((len(seqs), width), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, 0] = vocab.sos
        ids[i, 1 : len(s) + 1] = s
        out[i, : len(s)] = s
        out[i, len(s)] = vocab.eos
    return ids, out, np.array([len(s) + 1 for s in seqs])


def text_perplexity(logits_fn, lines, vocab: Vocabulary, chunk: int = 128) -> float:
    """Teacher-forced perplexity; ``logits_fn(ids, lengths)`` returns ``(B, L, V)`` logits."""
    nll, n_tok = 0.0, 0
    with T.no_grad():
        for start in range(0, len(lines), chunk):
            ids, out, lens = text_batch(lines[start : start + chunk], vocab)
            logp = T.log_softmax(logits_fn(ids, lens), axis=-1).data
            valid = out >= 0
            picked = np.take_along_axis(logp, np.where(valid, out, 0)[..., None], -1)[..., 0]
            nll -= float(picked[valid].sum())
            n_tok += int(valid.sum())
    return math.exp(nll / n_tok)


def lm_text(cfg: TrainConfig, held_out: bool = False) -> list:
    seed = cfg.lm.seed + (1000 if held_out else 0)
    n = max(1, cfg.lm.sentences_per_language // (10 if held_out else 1))
    return generate_text(cfg.data, n, seed)


def pretrain_lm(cfg: TrainConfig, log=None):
    """Train a text-only causal LM with the decoder's dimensions.

    The LM owns its vocabulary (built from its own text), as a pretrained
    LM would.  Returns ``(lm, lm_vocab)``.
    """
    T.set_precision(cfg.train.precision)
    mc = ModelConfig(vocab_size=1, d_model=cfg.model.d_model, n_heads=cfg.model.n_heads, d_ff=cfg.model.d_ff,
                     d_dec=cfg.model.d_dec, dec_heads=cfg.model.dec_heads, dec_ff=cfg.model.dec_ff)
    lines = lm_text(cfg)
    vocab = build_vocabulary(lines)
    lm = TextLM(vocab.n_out, mc.d_dec, mc.dec_heads, mc.dec_ff, cfg.lm.layers, seed=cfg.lm.seed)
    for p in lm.params.values():
        p.data = p.data.astype(T.get_dtype())
    trainer = Trainer(lm.params, mc.d_dec, cfg.lm.warmup, cfg.lm.peak_scale, cfg.optim.grad_clip,
                      cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    rng = np.random.default_rng(cfg.lm.seed)
    bs = cfg.lm.batch_size
    for epoch in range(cfg.lm.epochs):
        order = rng.permutation(len(lines))
        total = 0.0
        for start in range(0, len(order) - bs + 1, bs):
            ids, out, lens = text_batch([lines[i] for i in order[start : start + bs]], vocab)
            loss = attention_loss(lm.logits(ids, lens), out, 0.0)
            grads = T.backward(loss)
            trainer.accumulate({k: grads[v] for k, v in lm.params.items() if v in grads})
            trainer.step()
            total += float(loss.data)
        if log:
            log(f"lm epoch {epoch + 1}: loss {total / max(1, len(order) // bs):.4f}")
    return lm, vocab


def save_lm(path, lm: TextLM, vocab: Vocabulary) -> None:
    cfg = {"vocab_size": lm.vocab_size, "d": lm.d, "heads": lm.heads, "d_ff": lm.d_ff, "layers": lm.layers}
    save_checkpoint(path, lm.params, cfg, {"vocab": vocab.tokens})


def load_lm(path):
    from .model import load_checkpoint

    params, header = load_checkpoint(path)
    lm = TextLM(**header["config"])
    for k, v in params.items():
        lm.params[k].data = v.astype(T.get_dtype())
    return lm, Vocabulary(header["extra"]["vocab"])


# -- main loop ---------------------------------------------------------------------
@dataclass
class TrainResult:
    model: SpeechTransformer
    vocab: Vocabulary
    priors: ClassPriors
    checkpoints: list
    averaged: Path | None
    ledger: Path | None


def train(cfg: TrainConfig, corpus: Corpus, run_dir=None, lm=None, languages=None, log=None) -> TrainResult:
    """Run the full training procedure on ``corpus``.

    ``languages`` restricts training to a subset (monolingual runs).  When
    ``train.lm_transfer`` is set, ``lm`` may pass a pretrained ``(TextLM,
    Vocabulary)`` pair; otherwise one is trained first.
    """
    t, oc = cfg.train, cfg.optim
    T.set_precision(t.precision)
    languages = list(languages or cfg.data.languages)
    train_utts = [u for u in corpus.splits["train"] if u.lang in languages]
    valid_utts = [u for u in corpus.splits["valid"] if u.lang in languages]
    if not train_utts:
        raise TrainingError(f"no training utterances for {languages}")
    vocab = build_vocabulary([u.text for u in corpus.splits["train"]], t.min_count)
    model = SpeechTransformer(model_config(cfg, vocab, languages), seed=t.seed)
    model.astype(T.get_dtype())

    if t.lm_transfer:
        lm_model, lm_vocab = lm if lm is not None else pretrain_lm(cfg, log)
        vmap = build_vocab_map(lm_vocab.to_list()[: lm_vocab.n_out], vocab.to_list()[: vocab.n_out])
        transfer_parameters(lm_model, model, vmap)
        if t.freeze_transferred:
            model.frozen = set(transferred_names(model))
        if log:
            log(f"transferred decoder from LM, vocabulary coverage {vmap.coverage:.1f}%")

    priors = corpus_priors(train_utts, vocab)
    run_dir = Path(run_dir) if run_dir is not None else None
    ledger = None
    if run_dir is not None:
        (run_dir / "ckpt").mkdir(parents=True, exist_ok=True)
        ledger = RunLedger(run_dir / "ledger.jsonl", run_dir / "timing.jsonl")
        ledger.path.write_text("")
        ledger.timing_path.write_text("")
        save_priors(run_dir / "priors.json", priors)
        (run_dir / "vocab.json").write_text(json.dumps(vocab.tokens), encoding="utf-8")

    params = model.trainable()
    trainer = Trainer(params, cfg.model.d_model, oc.warmup, oc.peak_scale, oc.grad_clip, oc.beta1, oc.beta2, oc.eps)
    rng = np.random.default_rng(t.seed)
    by_lang = {lang: [u for u in train_utts if u.lang == lang] for lang in languages}
    checkpoints: list = []
    started = time.perf_counter()
    for epoch in range(t.epochs):
        ss_prob = cfg.loss.ss_probability(epoch / t.epochs)
        for batch_utts in _batches(cfg, rng, train_utts, by_lang, languages):
            batch = make_batch(batch_utts, vocab)
            try:
                total, parts = batch_loss(model, batch, cfg, priors, ss_prob, rng)
            except FloatingPointError as exc:  # NaN caught inside a softmax
                parts = {"total": float("nan"), "error": str(exc)}
            if not np.isfinite(parts["total"]):
                T.clear_tape()
                if run_dir is not None:
                    (run_dir / "bad_batch.json").write_text(json.dumps({"ids": batch.ids, **parts}), encoding="utf-8")
                raise TrainingError(f"non-finite loss {parts} on batch {batch.ids}")
            grads = T.backward(total)
            trainer.accumulate({k: grads[v] for k, v in params.items() if v in grads})
            if trainer.micro >= oc.accum:
                info = trainer.step()
                if ledger is not None:
                    ledger.log(kind="step", epoch=epoch + 1, step=trainer.step_count, **parts, **info)
        if trainer.micro:
            info = trainer.step()
            if ledger is not None:
                ledger.log(kind="step", epoch=epoch + 1, step=trainer.step_count, **parts, **info)
        stats = validate(model, valid_utts, vocab, cfg, priors) if valid_utts else {}
        if log:
            log(f"epoch {epoch + 1}/{t.epochs}: " + " ".join(f"{k} {v:.4f}" for k, v in stats.items()))
        if ledger is not None:
            ledger.log(kind="epoch", epoch=epoch + 1, step=trainer.step_count, ss_prob=ss_prob, **stats)
            ledger.flush(time.perf_counter() - started)
            if (epoch + 1) % t.ckpt_every == 0 or epoch + 1 == t.epochs:
                path = run_dir / "ckpt" / f"epoch{epoch + 1:03d}.ckpt"
                save_checkpoint(path, model.params, model.config, {"epoch": epoch + 1, "step": trainer.step_count})
                checkpoints.append(path)
                for old in checkpoints[: -t.keep_last]:
                    old.unlink(missing_ok=True)
                checkpoints = checkpoints[-t.keep_last :]

    averaged = None
    if run_dir is not None:
        save_checkpoint(run_dir / "final.ckpt", model.params, model.config, {"epoch": t.epochs})
        avg_params, header = average_checkpoints(checkpoints, t.avg_last)
        averaged = run_dir / "averaged.ckpt"
        save_checkpoint(averaged, avg_params, model.config, {"averaged": [p.name for p in checkpoints[-t.avg_last :]]})
        model.load_state_dict(avg_params)
    return TrainResult(model, vocab, priors, checkpoints, averaged, ledger.path if ledger else None)


def load_model(path) -> SpeechTransformer:
    """Rebuild a model from a checkpoint written by :func:`train`."""
    from .model import load_checkpoint

    params, header = load_checkpoint(path)
    model = SpeechTransformer(ModelConfig(**header["config"]))
    model.load_state_dict(params)
    return model

