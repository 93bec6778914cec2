import math

import numpy as np
import pytest

from a2asr import layers as L
from a2asr import tensor as T
from a2asr.tensor import Tensor


def _mha_params(rng, d=4, heads=2):
    p = {}
    L.init_mha(p, "att", rng, d, d, d, heads)
    return p


def test_single_key_returns_value_row(rng):
    p = {}
    L.init_mha(p, "att", rng, 3, 3, 3, 1)
    q = Tensor(rng.normal(size=(1, 4, 3)))
    kv = Tensor(rng.normal(size=(1, 1, 3)))
    out = L.mha(p, "att", q, kv, kv, None, 1).data
    v_row = L.linear(p, "att.v", kv).data
    expected = L.linear(p, "att.o", Tensor(v_row)).data
    np.testing.assert_allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_causal_mask_first_position_sees_itself_only():
    m = L.causal_mask(3)
    np.testing.assert_array_equal(m[0], [True, False, False])
    np.testing.assert_array_equal(m[2], [True, True, True])


def test_two_heads_match_head_by_head_oracle(rng):
    d, heads = 4, 2
    p = _mha_params(rng, d, heads)
    q, k = rng.normal(size=(1, 3, d)), rng.normal(size=(1, 5, d))
    out = L.mha(p, "att", Tensor(q), Tensor(k), Tensor(k), None, heads).data[0]
    wq, wk, wv = (p[f"att.{n}.w"].data for n in "qkv")
    bq, bk, bv = (p[f"att.{n}.b"].data for n in "qkv")
    dh = d // heads
    ctx = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        qh = q[0] @ wq[:, sl] + bq[sl]
        kh = k[0] @ wk[:, sl] + bk[sl]
        vh = k[0] @ wv[:, sl] + bv[sl]
        s = qh @ kh.T / math.sqrt(dh)
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        ctx.append(a @ vh)
    expected = np.concatenate(ctx, axis=1) @ p["att.o.w"].data + p["att.o.b"].data
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_uniform_logits_average_unmasked_values(rng):
    d = 4
    p = _mha_params(rng, d, 2)
    p["att.q.w"].data[:] = 0.0  # zero queries make every score equal
    q, kv = Tensor(rng.normal(size=(1, 2, d))), Tensor(rng.normal(size=(1, 5, d)))
    mask = np.array([[True, False, True, True, False]])
    out = L.mha(p, "att", q, kv, kv, mask[:, None, :], 2).data
    v = L.linear(p, "att.v", kv).data[0][mask[0]].mean(0)
    expected = v @ p["att.o.w"].data + p["att.o.b"].data
    np.testing.assert_allclose(out[0], np.broadcast_to(expected, (2, d)), atol=1e-10)


def test_fully_masked_query_gives_bias_only(rng):
    p = _mha_params(rng)
    x = Tensor(rng.normal(size=(1, 2, 4)))
    mask = np.array([[[True, True], [False, False]]])
    out = L.mha(p, "att", x, x, x, mask, 2).data
    np.testing.assert_allclose(out[0, 1], p["att.o.b"].data)


def test_heads_must_divide_dim(rng):
    with pytest.raises(L.DimensionError):
        L.init_mha({}, "att", rng, 6, 6, 6, 4)


def test_positional_encoding_values():
    pe = L.positional_encoding(10, 8)
    np.testing.assert_allclose(pe[0], [0, 1] * 4)
    assert np.abs(pe).max() <= 1.0
    assert pe[3, 2] == pytest.approx(math.sin(3 / 10000 ** (2 / 8)))
    assert pe[3, 3] == pytest.approx(math.cos(3 / 10000 ** (2 / 8)))


def test_positional_encoding_odd_dim():
    assert L.positional_encoding(4, 5).shape == (4, 5)
    with pytest.raises(ValueError):
        L.positional_encoding(0, 4)


@pytest.mark.parametrize("t, expected", [(4, 2), (5, 3), (1, 1)])
def test_frontend_length(rng, t, expected):
    p = {}
    L.init_frontend(p, "fe", rng, 3, 2, 6)
    out = L.frontend_subsample(p, "fe", Tensor(rng.normal(size=(1, t, 3))), 2)
    assert out.shape == (1, expected, 6)
    assert L.subsampled_length(t, 2) == expected


def test_frontend_zero_input_gives_bias(rng):
    p = {}
    L.init_frontend(p, "fe", rng, 3, 2, 6)
    p["fe.proj.b"].data[:] = rng.normal(size=6)
    out = L.frontend_subsample(p, "fe", Tensor(np.zeros((2, 5, 3))), 2)
    np.testing.assert_array_equal(out.data, np.broadcast_to(p["fe.proj.b"].data, (2, 3, 6)))


def test_frontend_feature_mismatch(rng):
    p = {}
    L.init_frontend(p, "fe", rng, 3, 2, 6)
    with pytest.raises(L.DimensionError):
        L.frontend_subsample(p, "fe", Tensor(np.zeros((1, 4, 4))), 2)


def test_frontend_is_deterministic(rng):
    p = {}
    L.init_frontend(p, "fe", rng, 3, 2, 6)
    x = Tensor(rng.normal(size=(1, 7, 3)))
    np.testing.assert_array_equal(L.frontend_subsample(p, "fe", x, 2).data, L.frontend_subsample(p, "fe", x, 2).data)


def test_dropout_rate_zero_is_identity(rng):
    x = Tensor(rng.normal(size=(3, 3)))
    assert L.dropout(x, 0.0, rng) is x


@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(seed):
    r = np.random.default_rng(seed)
    p = {}
    L.init_mha(p, "att", r, 4, 4, 4, 2)
    L.init_ffn(p, "ffn", r, 4, 6)
    L.init_frontend(p, "fe", r, 3, 2, 4)
    x = r.normal(size=(2, 5, 3))
    mask = np.array([[True, True, True], [True, True, False]])[:, None, :]
    w = Tensor(r.normal(size=(2, 3, 4)))

    def f(inp):
        h = L.frontend_subsample(p, "fe", inp, 2)
        h = h + L.mha(p, "att", h, h, h, mask, 2)
        return (L.ffn_block(p, "ffn", h) * w).sum()

    assert T.grad_check(f, Tensor(x)) < 1e-5
    for name in ("att.q.w", "att.o.b", "ffn.w1.w", "ffn.ln.g"):
        def g(param, name=name):
            saved = p[name]
            p[name] = param
            try:
                return f(Tensor(x))
            finally:
                p[name] = saved
        assert T.grad_check(g, p[name]) < 1e-5, name
