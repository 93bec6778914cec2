"""Transformer building blocks over named parameter dicts.

Parameters live in a flat ``dict[str, Tensor]``; each block takes the dict
and a name prefix.  Activations are batched as ``(batch, time, dim)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DimensionError(ValueError):
    pass


def init_linear(params: dict, name: str, rng: np.random.Generator, d_in: int, d_out: int, zero: bool = False) -> None:
    if zero:
        w = np.zeros((d_in, d_out))
    else:
        limit = math.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_in, d_out))
    params[f"{name}.w"] = Tensor(w, requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True)


def init_layernorm(params: dict, name: str, d: int) -> None:
    params[f"{name}.g"] = Tensor(np.ones(d), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(d), requires_grad=True)


def linear(params: dict, name: str, x: Tensor) -> Tensor:
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


def layer_norm(params: dict, name: str, x: Tensor, eps: float = 1e-5) -> Tensor:
    return T.layernorm(x, params[f"{name}.g"], params[f"{name}.b"], eps)


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal table; even columns sin, odd columns cos."""
    if length < 1 or d < 1:
        raise ValueError("positional_encoding needs length >= 1 and d >= 1")
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


# -- attention -------------------------------------------------------------
def init_mha(params: dict, name: str, rng: np.random.Generator, d_q: int, d_kv: int, d_att: int, n_heads: int) -> None:
    if d_att % n_heads:
        raise DimensionError(f"{n_heads} heads do not divide attention dim {d_att}")
    init_linear(params, f"{name}.q", rng, d_q, d_att)
    init_linear(params, f"{name}.k", rng, d_kv, d_att)
    init_linear(params, f"{name}.v", rng, d_kv, d_att)
    init_linear(params, f"{name}.o", rng, d_att, d_q)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def mha(params: dict, name: str, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None, n_heads: int) -> Tensor:
    """Scaled dot-product multi-head attention.

    ``mask`` is boolean and broadcastable to ``(batch, q_len, k_len)``; False
    entries are excluded.  A query row with every key masked yields a zero
    context vector (before the output projection).
    """
    q = _split_heads(linear(params, f"{name}.q", query), n_heads)
    k = _split_heads(linear(params, f"{name}.k", key), n_heads)
    v = _split_heads(linear(params, f"{name}.v", value), n_heads)
    dh = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dh))
    m = None if mask is None else np.asarray(mask, dtype=bool)[:, None]
    att = T.masked_softmax(scores, m, axis=-1)
    ctx = att @ v
    b, h, tq, _ = ctx.shape
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, tq, h * dh)
    return linear(params, f"{name}.o", ctx)


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


# -- feed-forward ----------------------------------------------------------
def init_ffn(params: dict, name: str, rng: np.random.Generator, d: int, d_ff: int) -> None:
    init_layernorm(params, f"{name}.ln", d)
    init_linear(params, f"{name}.w1", rng, d, d_ff)
    init_linear(params, f"{name}.w2", rng, d_ff, d)


def ffn_block(params: dict, name: str, x: Tensor) -> Tensor:
    """Pre-norm residual position-wise feed-forward block."""
    y = T.relu(linear(params, f"{name}.w1", layer_norm(params, f"{name}.ln", x)))
    return x + linear(params, f"{name}.w2", y)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None or not T.is_grad_enabled():
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep.astype(x.dtype)


# -- front-end -------------------------------------------------------------
def init_frontend(params: dict, name: str, rng: np.random.Generator, feat_dim: int, stack: int, d: int) -> None:
    init_linear(params, f"{name}.proj", rng, feat_dim * stack, d)


def subsampled_length(n_frames, stack: int):
    return -(-np.asarray(n_frames) // stack)


def frontend_subsample(params: dict, name: str, x: Tensor, stack: int) -> Tensor:
    """Stack ``stack`` consecutive frames and project; the tail is zero padded.

    ``x`` is ``(batch, T, F)``; the result is ``(batch, ceil(T/stack), d)``.
    """
    w = params[f"{name}.proj.w"]
    b, t, f = x.shape
    if f * stack != w.shape[0]:
        raise DimensionError(f"front-end expects feature dim {w.shape[0] // stack}, got {f}")
    t_out = int(subsampled_length(t, stack))
    pad = t_out * stack - t
    if pad:
        x = T.concat([x, T.Tensor(np.zeros((b, pad, f), dtype=x.dtype), dtype=x.dtype)], axis=1)
    return linear(params, f"{name}.proj", x.reshape(b, t_out, f * stack))
