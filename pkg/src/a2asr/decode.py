"""Joint CTC/attention beam search, CER scoring, reports and checkpoint averaging."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import adjust_logits
from .model import load_checkpoint

NEG_INF = -np.inf


# -- CTC prefix scoring -------------------------------------------------------
class CTCPrefixScorer:
    """Prefix probabilities of partial hypotheses under frame-level CTC posteriors.

    A state is an array ``(T, 2)`` of log forward variables for paths whose
    last emitted symbol is a non-blank (column 0) or a blank (column 1).
    """

    def __init__(self, log_probs: np.ndarray, blank: int, eos: int):
        self.x = np.asarray(log_probs, dtype=np.float64)
        self.blank, self.eos = blank, eos
        self.n_frames = self.x.shape[0]

    def initial_state(self) -> np.ndarray:
        r = np.full((self.n_frames, 2), NEG_INF)
        r[:, 1] = np.cumsum(self.x[:, self.blank])
        return r

    def score(self, prefix, candidates, r_prev: np.ndarray):
        """Extend ``prefix`` (without ``<sos>``) by each candidate.

        Returns ``(log_psi, states)``: cumulative prefix log-probabilities of
        shape ``(n,)`` and new states ``(n, T, 2)``.  For ``eos`` the score is
        the probability that the output is exactly ``prefix``.
        """
        cands = np.asarray(candidates, dtype=np.int64)
        n, t_len = len(cands), self.n_frames
        out_len = len(prefix)
        xs = self.x[:, cands]  # (T, n)
        r = np.full((t_len, 2, n), NEG_INF)
        if out_len == 0:
            r[0, 0] = xs[0]
        r_sum = np.logaddexp(r_prev[:, 0], r_prev[:, 1])
        log_phi = np.repeat(r_sum[:, None], n, axis=1)
        if out_len > 0:
            same = cands == prefix[-1]
            log_phi[:, same] = r_prev[:, 1:2]
        start = max(out_len, 1)
        log_psi = r[start - 1, 0].copy()
        for t in range(start, t_len):
            r[t, 0] = np.logaddexp(r[t - 1, 0], log_phi[t - 1]) + xs[t]
            r[t, 1] = np.logaddexp(r[t - 1, 0], r[t - 1, 1]) + self.x[t, self.blank]
            log_psi = np.logaddexp(log_psi, log_phi[t - 1] + xs[t])
        log_psi[cands == self.eos] = r_sum[-1]
        return log_psi, np.moveaxis(r, 2, 0)


# -- beam search ----------------------------------------------------------------
@dataclass
class DecodeConfig:
    beam: int = 10
    beta: float = 0.5
    tau: float = 0.0
    max_len: int = 0
    length_mode: str = "eos"

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam width must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.length_mode != "eos":
            raise ValueError("only eos-terminated length handling is supported")


@dataclass
class BeamHypothesis:
    tokens: list
    attn_score: float = 0.0
    ctc_score: float = 0.0
    ctc_state: np.ndarray | None = field(default=None, repr=False)
    score: float = 0.0
    finished: bool = False

    @property
    def output(self) -> list:
        """Tokens without ``<sos>`` and the final ``<eos>``."""
        return self.tokens[1:-1] if self.finished else self.tokens[1:]


@dataclass
class BeamResult:
    hyps: list
    warning: bool = False


def _combine(beta: float, ctc: np.ndarray, attn: np.ndarray) -> np.ndarray:
    if beta == 0.0:
        return attn
    if beta == 1.0:
        return ctc
    return beta * ctc + (1.0 - beta) * attn


def beam_search(model, h_enc, enc_mask, route, cfg: DecodeConfig, sos: int, eos: int, priors=None) -> BeamResult:
    """Search over one utterance; ``h_enc`` is ``(1, T', d)``.

    Step scores are ``beta * ctc_prefix + (1 - beta) * attn`` in the log
    domain; the attention distribution is ``log_softmax(f - tau log pi)``.
    Returns up to ``cfg.beam`` finished hypotheses, best first.
    """
    vocab = model.config.vocab_size
    n_frames = int(np.asarray(enc_mask).sum())
    max_len = cfg.max_len or n_frames
    use_adjust = priors is not None and cfg.tau > 0.0
    with T.no_grad():
        h_enc = h_enc[:, :n_frames]
        enc_mask = np.ones((1, n_frames), dtype=bool)
        scorer = None
        if cfg.beta > 0.0:
            ctc_lp = T.log_softmax(model.ctc_logits(h_enc), axis=-1).data[0]
            scorer = CTCPrefixScorer(ctc_lp, model.blank, eos)
        cands = np.array([i for i in range(vocab) if i != sos], dtype=np.int64)
        live = [BeamHypothesis([sos], ctc_state=scorer.initial_state() if scorer else None)]
        finished: list = []
        for step in range(max_len + 1):
            prefixes = np.array([h.tokens for h in live], dtype=np.int64)
            f = model.decode_step(prefixes, h_enc, enc_mask, route).data.astype(np.float64)
            if use_adjust:
                f = adjust_logits(f, priors, cfg.tau)
            z = f - f.max(axis=-1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
            allowed = cands if step < max_len else np.array([eos])
            pool = []
            for hi, hyp in enumerate(live):
                attn = hyp.attn_score + logp[hi, allowed]
                if scorer is not None:
                    psi, states = scorer.score(hyp.tokens[1:], allowed, hyp.ctc_state)
                else:
                    psi, states = np.zeros(len(allowed)), None
                total = _combine(cfg.beta, psi, attn)
                for j in np.flatnonzero(np.isfinite(total)):
                    pool.append((-total[j], hi, int(allowed[j]), attn[j], psi[j], None if states is None else states[j]))
            pool.sort(key=lambda c: (c[0], c[1], c[2]))
            if not pool:
                break  # keep the previous live set for the fallback below
            # the best 2k candidates: <eos> endings are finalised without
            # taking a live slot, the rest fill the beam up to k
            live = []
            for neg, hi, tok, attn, psi, state in pool[: 2 * cfg.beam]:
                if tok != eos and len(live) == cfg.beam:
                    continue
                hyp = BeamHypothesis(prefixes[hi].tolist() + [tok], float(attn), float(psi), state, -neg, tok == eos)
                (finished if hyp.finished else live).append(hyp)
            if not live:
                break
            finished.sort(key=lambda h: -h.score)
            # scores never increase with extension, so the top-k is settled
            if len(finished) >= cfg.beam and finished[cfg.beam - 1].score >= max(h.score for h in live):
                break
    if not finished:
        warnings.warn("no hypothesis reached <eos>; returning best partial", RuntimeWarning, stacklevel=2)
        best = sorted(live, key=lambda h: -h.score)[:1]
        return BeamResult(best, warning=True)
    finished.sort(key=lambda h: -h.score)
    return BeamResult(finished[: cfg.beam])


# -- scoring -------------------------------------------------------------------
def levenshtein(a, b) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def cer(hyp: str, ref: str) -> float:
    """Character edit distance divided by reference length."""
    if not ref:
        raise ValueError("reference must be non-empty")
    return levenshtein(hyp, ref) / len(ref)


@dataclass
class Report:
    languages: list
    per_language: dict
    macro: float
    micro: float
    counts: dict

    def to_json(self) -> str:
        return json.dumps(
            {
                "languages": self.languages,
                "per_language": self.per_language,
                "macro": self.macro,
                "micro": self.micro,
                "counts": self.counts,
            },
            sort_keys=True,
        )


def report(results, languages=None) -> Report:
    """Per-language CER plus macro (mean over languages) and micro (pooled) averages.

    ``results`` are mappings with ``lang``, ``ref`` and ``hyp`` entries.
    """
    edits, chars, counts = {}, {}, {}
    for r in results:
        lang = r["lang"]
        edits[lang] = edits.get(lang, 0) + levenshtein(r["hyp"], r["ref"])
        chars[lang] = chars.get(lang, 0) + len(r["ref"])
        counts[lang] = counts.get(lang, 0) + 1
    langs = list(languages) if languages is not None else sorted(edits)
    per = {lang: edits[lang] / chars[lang] for lang in langs if lang in edits}
    macro = float(np.mean(list(per.values()))) if per else float("nan")
    micro = sum(edits.values()) / sum(chars.values()) if chars else float("nan")
    return Report(langs, per, macro, micro, counts)


def format_table(rows: dict, languages) -> str:
    """Aligned CER (%) table: one row per system, one column per language plus avg."""
    name_w = max([len("model")] + [len(n) for n in rows])
    head = "model".ljust(name_w) + "".join(f"{lang:>8}" for lang in languages) + f"{'avg':>8}"
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        cells = "".join(f"{100 * rep.per_language.get(lang, float('nan')):8.1f}" for lang in languages)
        lines.append(name.ljust(name_w) + cells + f"{100 * rep.macro:8.1f}")
    return "\n".join(lines)


# -- dataset decoding ----------------------------------------------------------
def decode_utterances(model, vocab, utts, cfg: DecodeConfig, priors=None, chunk: int = 32) -> list:
    """Beam-search every utterance; returns JSON-ready records."""
    from .data import make_batch

    out = []
    with T.no_grad():
        for start in range(0, len(utts), chunk):
            batch = make_batch(utts[start : start + chunk], vocab)
            route = model.route(batch.langs)
            h_enc, mask = model.encode(batch.feats, batch.feat_lens, route)
            for i in range(len(batch)):
                r_i = None if route is None else route[i : i + 1]
                res = beam_search(model, h_enc[i : i + 1], mask[i : i + 1], r_i, cfg, vocab.sos, vocab.eos, priors)
                best = res.hyps[0]
                hyp = vocab.decode(best.output)
                out.append(
                    {
                        "id": batch.ids[i],
                        "lang": batch.langs[i],
                        "ref": batch.texts[i],
                        "hyp": hyp,
                        "cer": cer(hyp, batch.texts[i]),
                        "attn_score": best.attn_score,
                        "ctc_score": best.ctc_score,
                    }
                )
    return out


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path) -> list:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- checkpoint averaging ------------------------------------------------------
def average_checkpoints(paths, n: int | None = None):
    """Elementwise mean of the last ``n`` checkpoints; returns ``(params, header)``."""
    paths = list(paths)
    if n is not None:
        paths = paths[-n:]
    if not paths:
        raise ValueError("no checkpoints to average")
    acc, header = None, None
    # running mean: identical inputs stay bit-identical, unlike sum-then-divide
    for k_idx, path in enumerate(paths, start=1):
        params, hdr = load_checkpoint(path)
        manifest = [(e["name"], tuple(e["shape"])) for e in hdr["params"]]
        if acc is None:
            acc = {k: v.astype(np.float64) for k, v in params.items()}
            ref_manifest, header = manifest, hdr
            continue
        if manifest != ref_manifest:
            raise ValueError(f"parameter manifest of {path} differs")
        for k, v in params.items():
            acc[k] += (v - acc[k]) / k_idx
        header = hdr
    dtype = np.dtype(header["dtype"]).newbyteorder("=")
    return {k: v.astype(dtype) for k, v in acc.items()}, header
