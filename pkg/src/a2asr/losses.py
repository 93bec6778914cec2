"""CTC and attention losses, class priors, logit adjustment, scheduled sampling."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

NEG_INF = -np.inf


@dataclass
class ClassPriors:
    pi: np.ndarray
    counts: np.ndarray
    total: int
    n_zero: int
    tau: float = 0.0

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(self.pi)

    def to_json(self) -> str:
        return json.dumps([float(v) for v in self.pi])


def estimate_priors(sequences, num_classes: int, tau: float = 0.0) -> ClassPriors:
    """Smoothed token priors from raw counts.

    Seen classes get ``c_i/C - 1/((N - n0) C)``; each of the ``n0`` unseen
    classes gets ``1/(n0 C)``.  With no unseen class the plain relative
    frequencies are returned.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for seq in sequences:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size:
            counts += np.bincount(seq, minlength=num_classes)[:num_classes]
    total = int(counts.sum())
    if total == 0:
        raise DataError("cannot estimate priors from an empty corpus")
    n0 = int((counts == 0).sum())
    c = counts.astype(np.float64)
    if n0 == 0:
        pi = c / total
    else:
        seen = num_classes - n0
        pi = np.where(counts > 0, c / total - 1.0 / (seen * total), 1.0 / (n0 * total))
    if (pi <= 0).any():
        raise DataError("smoothing leaves a non-positive prior (a single class seen exactly once)")
    return ClassPriors(pi=pi, counts=counts, total=total, n_zero=n0, tau=tau)


def save_priors(path, priors: ClassPriors) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(priors.to_json())


def load_priors(path) -> ClassPriors:
    with open(path, encoding="utf-8") as fh:
        pi = np.asarray(json.load(fh), dtype=np.float64)
    return ClassPriors(pi=pi, counts=np.zeros(len(pi), dtype=np.int64), total=0, n_zero=0)


def adjust_logits(f, priors, tau: float):
    """``f - tau * log(pi)`` for a tensor or array of logits (last axis = class)."""
    log_pi = priors.log_pi if isinstance(priors, ClassPriors) else np.log(np.asarray(priors, dtype=np.float64))
    if tau == 0.0:
        return f
    offset = tau * log_pi
    if isinstance(f, Tensor):
        return f - offset.astype(f.dtype)
    return np.asarray(f) - offset


# -- CTC -------------------------------------------------------------------
class CTCStats:
    """Running count of utterances whose target cannot fit the input length."""

    infeasible = 0


def _lse3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    """Shift along the last axis by ``k`` (positive = right), filling -inf."""
    out = np.full_like(x, NEG_INF)
    if k > 0:
        out[:, k:] = x[:, :-k]
    else:
        out[:, :k] = x[:, -k:]
    return out


def ctc_forward_backward(log_probs: np.ndarray, targets, input_lengths, blank: int):
    """Log-domain forward/backward over blank-interleaved targets.

    ``log_probs`` is ``(batch, T, C)``.  Returns ``(log_likelihood, grad)``
    where ``grad`` is d(-log p)/d(log_probs), zero for infeasible rows.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    n, t_max, n_cls = lp.shape
    input_lengths = np.asarray(input_lengths, dtype=np.int64)
    u = np.array([len(y) for y in targets], dtype=np.int64)
    s_len = 2 * u + 1
    s_max = int(s_len.max())
    ext = np.full((n, s_max), blank, dtype=np.int64)
    for i, y in enumerate(targets):
        ext[i, 1 : 2 * len(y) : 2] = y
    bidx = np.arange(n)
    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (n, t_max, s_max)), axis=2)
    pos = np.arange(s_max)[None, :]
    valid = pos < s_len[:, None]
    skip = np.zeros((n, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])

    alpha = np.full((t_max, n, s_max), NEG_INF)
    alpha[0, :, 0] = emit[:, 0, 0]
    if s_max > 1:
        alpha[0, :, 1] = np.where(s_len > 1, emit[:, 0, 1], NEG_INF)
    for t in range(1, t_max):
        prev = alpha[t - 1]
        cur = _lse3(prev, _shift(prev, 1), np.where(skip, _shift(prev, 2), NEG_INF)) + emit[:, t]
        alpha[t] = np.where(valid, cur, NEG_INF)

    last = input_lengths - 1
    end_a = alpha[last, bidx, s_len - 1]
    end_b = np.where(s_len > 1, alpha[last, bidx, np.maximum(s_len - 2, 0)], NEG_INF)
    loglik = np.logaddexp(end_a, end_b)

    # beta excludes the emission at its own frame
    init = np.full((n, s_max), NEG_INF)
    init[bidx, s_len - 1] = 0.0
    init[bidx, np.maximum(s_len - 2, 0)] = np.where(s_len > 1, 0.0, init[bidx, np.maximum(s_len - 2, 0)])
    beta = np.full((t_max, n, s_max), NEG_INF)
    beta[t_max - 1] = np.where((last == t_max - 1)[:, None], init, NEG_INF)
    skip_next = np.zeros((n, s_max), dtype=bool)
    if s_max > 2:
        skip_next[:, :-2] = skip[:, 2:]
    for t in range(t_max - 2, -1, -1):
        nxt = beta[t + 1] + emit[:, t + 1]
        rec = _lse3(nxt, _shift(nxt, -1), np.where(skip_next, _shift(nxt, -2), NEG_INF))
        rec = np.where(valid, rec, NEG_INF)
        beta[t] = np.where((t == last)[:, None], init, np.where((t < last)[:, None], rec, NEG_INF))

    feasible = np.isfinite(loglik)
    grad = np.zeros_like(lp)
    if feasible.any():
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - np.where(feasible, loglik, 0.0)[None, :, None])
        occ = np.where(feasible[None, :, None] & np.isfinite(occ), occ, 0.0)
        occ = occ.transpose(1, 0, 2)  # (n, T, S)
        tidx = np.arange(t_max)[None, :]
        for s in range(s_max):
            grad[bidx[:, None], tidx, ext[:, s][:, None]] -= occ[:, :, s]
    return loglik, grad


def ctc_loss(log_probs: Tensor, targets, input_lengths, blank: int) -> Tensor:
    """Per-utterance CTC negative log-likelihood, shape ``(batch,)``.

    Infeasible utterances (too few frames for the target) get ``+inf`` and a
    zero gradient; they are counted in :class:`CTCStats`.
    """
    loglik, grad = ctc_forward_backward(log_probs.data, targets, input_lengths, blank)
    bad = int((~np.isfinite(loglik)).sum())
    if bad:
        CTCStats.infeasible += bad
        warnings.warn(f"{bad} utterance(s) too short for their CTC target", RuntimeWarning, stacklevel=2)
    out = (-loglik).astype(log_probs.dtype)
    gdtype = log_probs.dtype
    return T.record(out, (log_probs,), lambda g: ((grad * g[:, None, None]).astype(gdtype),))


def ctc_min_frames(target) -> int:
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


# -- attention loss ----------------------------------------------------------
def smoothed_targets(targets: np.ndarray, vocab: int, epsilon: float) -> np.ndarray:
    targets = np.asarray(targets)
    dist = np.full(targets.shape + (vocab,), epsilon / vocab)
    valid = targets >= 0
    idx = np.where(valid, targets, 0)
    np.put_along_axis(dist, idx[..., None], np.take_along_axis(dist, idx[..., None], -1) + (1.0 - epsilon), axis=-1)
    return dist * valid[..., None]


def attention_loss(logits: Tensor, targets, epsilon: float = 0.1, direction: str = "standard") -> Tensor:
    """Label-smoothed KL loss averaged over non-padding steps.

    ``logits`` is ``(..., vocab)`` (already adjusted when logit adjustment is
    on); ``targets`` holds class ids with ``-1`` for padding.
    ``direction="standard"`` is KL(p_y || p_attn); ``"literal"`` is
    KL(p_attn || p_y), which needs ``epsilon > 0``.
    """
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    n_steps = int((targets >= 0).sum())
    if n_steps == 0:
        raise DataError("attention loss needs at least one target step")
    p_y = smoothed_targets(targets, vocab, epsilon)
    logp = T.log_softmax(logits, axis=-1)
    if direction == "standard":
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(p_y > 0, p_y * np.log(p_y), 0.0).sum()
        cross = (logp * p_y.astype(logp.dtype)).sum()
        return (cross * -1.0 + float(ent)) * (1.0 / n_steps)
    if direction == "literal":
        if epsilon <= 0:
            raise ValueError("literal KL direction needs label smoothing > 0")
        mask = (targets >= 0)[..., None].astype(logp.dtype)
        with np.errstate(divide="ignore"):
            log_py = np.log(np.where(p_y > 0, p_y, 1.0)).astype(logp.dtype)
        p = T.exp(logp)
        return ((p * (logp - log_py)) * mask).sum() * (1.0 / n_steps)
    raise ValueError(f"unknown KL direction {direction!r}")


def mtl_loss(ctc, attn, lam: float):
    """``lam * ctc + (1 - lam) * attn`` with both terms to be minimised."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("interpolation weight must lie in [0, 1]")
    return ctc * lam + attn * (1.0 - lam)


# -- scheduled sampling -------------------------------------------------------
def scheduled_sample(p_adj, gold, prob: float, rng: np.random.Generator):
    """Pick the next decoder input: argmax of ``p_adj`` with probability
    ``prob``, otherwise the gold token.  Works elementwise on batches.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("mix probability must lie in [0, 1]")
    p_adj = np.asarray(p_adj)
    gold = np.asarray(gold)
    pred = p_adj.argmax(axis=-1)
    use_pred = rng.random(gold.shape) < prob
    out = np.where(use_pred, pred, gold)
    return out if out.ndim else int(out)


@dataclass
class LossConfig:
    ctc_weight: float = 0.3
    label_smoothing: float = 0.1
    tau: float = 0.0
    kl_direction: str = "standard"
    scheduled_sampling: bool = False
    ss_max: float = 0.3
    ss_start: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.kl_direction not in ("standard", "literal"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")

    def ss_probability(self, progress: float) -> float:
        """Mixing probability at training progress in [0, 1] (fraction of epochs)."""
        if not self.scheduled_sampling or progress < self.ss_start:
            return 0.0
        span = max(1.0 - self.ss_start, 1e-12)
        return self.ss_max * min(1.0, (progress - self.ss_start) / span)
