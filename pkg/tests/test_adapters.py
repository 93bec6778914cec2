import numpy as np
import pytest

from a2asr import tensor as T
from a2asr.adapters import (
    DualAdapterBank,
    RoutingError,
    adapter_delta,
    adapter_forward,
    dual_forward,
    init_adapter_layer,
    resolve_grouping,
)
from a2asr.errors import DataError
from a2asr.tensor import Tensor

LANGS = ["en", "es", "tr", "ky"]


def make(rng, kind="dual", d=6, b=3, grouping="individual"):
    bank = DualAdapterBank(resolve_grouping(grouping, LANGS), kind=kind, bottleneck=b)
    p = {}
    init_adapter_layer(p, "a", rng, bank, d)
    return bank, p


def activate(p, rng, tag):
    for key in (f"a.{tag}.up.w", f"a.{tag}.up.b", f"a.{tag}.ln.b"):
        p[key].data[:] = rng.normal(size=p[key].shape)


def test_zero_up_projection_is_identity(rng):
    bank, p = make(rng)
    h = Tensor(rng.normal(size=(4, 5, 6)))
    out = dual_forward(p, "a", bank, h, bank.make_language_mask(LANGS))
    np.testing.assert_array_equal(out.data, h.data)


def test_zero_down_projection_is_identity(rng):
    p = {"x.ln.g": Tensor(np.ones(4)), "x.ln.b": Tensor(np.zeros(4)), "x.down.w": Tensor(np.zeros((4, 2))),
         "x.down.b": Tensor(np.zeros(2)), "x.up.w": Tensor(rng.normal(size=(2, 4))), "x.up.b": Tensor(np.zeros(4))}
    h = Tensor(rng.normal(size=(3, 4)))
    np.testing.assert_array_equal(adapter_forward(p, "x", h).data, h.data)


def test_adapter_matches_hand_composition(rng):
    d, b = 5, 2
    p = {"x.ln.g": Tensor(rng.normal(size=d)), "x.ln.b": Tensor(rng.normal(size=d)),
         "x.down.w": Tensor(rng.normal(size=(d, b))), "x.down.b": Tensor(rng.normal(size=b)),
         "x.up.w": Tensor(rng.normal(size=(b, d))), "x.up.b": Tensor(rng.normal(size=d))}
    h = rng.normal(size=(3, d))
    mu, var = h.mean(1, keepdims=True), h.var(1, keepdims=True)
    ln = (h - mu) / np.sqrt(var + 1e-5) * p["x.ln.g"].data + p["x.ln.b"].data
    hid = np.maximum(ln @ p["x.down.w"].data + p["x.down.b"].data, 0)
    expected = hid @ p["x.up.w"].data + p["x.up.b"].data + h
    np.testing.assert_allclose(adapter_forward(p, "x", Tensor(h)).data, expected, atol=1e-12)


def test_common_zero_lang_active_equals_lang_adapter(rng):
    bank, p = make(rng)
    activate(p, rng, "lang")
    h = Tensor(rng.normal(size=(2, 3, 6)))
    route = bank.make_language_mask(["tr", "tr"])
    out = dual_forward(p, "a", bank, h, route).data
    single = {k.replace("a.lang.", "s."): Tensor(v.data[route[0]]) for k, v in p.items() if k.startswith("a.lang.")}
    np.testing.assert_allclose(out, adapter_forward(single, "s", h).data, atol=1e-12)


def test_mixed_batch_routes_per_utterance(rng):
    bank, p = make(rng)
    activate(p, rng, "lang")
    activate(p, rng, "com")
    h = rng.normal(size=(4, 3, 6))
    langs = ["ky", "en", "ky", "es"]
    out = dual_forward(p, "a", bank, Tensor(h), bank.make_language_mask(langs)).data
    for i, lang in enumerate(langs):
        one = dual_forward(p, "a", bank, Tensor(h[i : i + 1]), bank.make_language_mask([lang])).data
        np.testing.assert_allclose(out[i : i + 1], one, atol=1e-12)


def test_permuting_batch_permutes_output(rng):
    bank, p = make(rng)
    activate(p, rng, "lang")
    h = rng.normal(size=(4, 2, 6))
    langs = np.array(LANGS)
    perm = np.array([2, 0, 3, 1])
    a = dual_forward(p, "a", bank, Tensor(h), bank.make_language_mask(list(langs))).data
    b = dual_forward(p, "a", bank, Tensor(h[perm]), bank.make_language_mask(list(langs[perm]))).data
    np.testing.assert_allclose(a[perm], b, atol=1e-12)


def test_literal_residual_doubles_h(rng):
    bank, p = make(rng)
    h = Tensor(rng.normal(size=(1, 2, 6)))
    out = dual_forward(p, "a", bank, h, bank.make_language_mask(["en"]), literal=True)
    np.testing.assert_allclose(out.data, 2 * h.data)


def test_unknown_language_lists_known_keys(rng):
    bank, _ = make(rng)
    with pytest.raises(RoutingError, match="known"):
        bank.make_language_mask(["xx"])
    with pytest.raises(DataError):
        bank.make_language_mask(["en", ""])


def test_language_masks(rng):
    bank, _ = make(rng)
    assert len(set(bank.make_language_mask(["es"] * 5))) == 1
    m = bank.make_language_mask(LANGS * 3)
    assert len(set(m)) == 4
    assert np.all(np.bincount(m) == 3)


def test_family_grouping_shares_turkic_key():
    g = resolve_grouping("by_family", ["tr", "tt", "ky", "en"])
    assert g["tr"] == g["tt"] == g["ky"] != g["en"]
    s = resolve_grouping("by_script", ["tr", "ky", "en", "zh"])
    assert s["tr"] == s["en"] != s["ky"]


def test_custom_grouping_and_missing_language():
    g = resolve_grouping({"en": "g1", "es": "g1", "tr": "g2", "ky": "g2"}, LANGS)
    assert DualAdapterBank(g).n_banks == 3
    with pytest.raises(RoutingError):
        resolve_grouping({"en": "g1"}, LANGS)


def test_parameter_count_closed_form(rng):
    d, b = 6, 3
    bank, p = make(rng, d=d, b=b)
    n = sum(v.size for v in p.values())
    assert n == bank.params_per_layer(d) == (len(LANGS) + 1) * (d * b + b * d + b + d + 2 * d)
    lang_only, p2 = make(rng, kind="lang", d=d, b=b)
    assert sum(v.size for v in p2.values()) == len(LANGS) * (2 * d * b + b + 3 * d)


def test_bottleneck_must_be_smaller(rng):
    with pytest.raises(ValueError):
        make(rng, d=4, b=4)


def test_routed_adapter_gradients(rng):
    bank, p = make(rng, d=4, b=2)
    activate(p, rng, "lang")
    route = bank.make_language_mask(["en", "ky", "en"])
    h = rng.normal(size=(3, 2, 4))
    w = Tensor(rng.normal(size=(3, 2, 4)))
    assert T.grad_check(lambda x: (dual_forward(p, "a", bank, x, route) * w).sum(), Tensor(h)) < 1e-5
    for name in ("a.lang.down.w", "a.lang.ln.g", "a.com.up.w"):
        def g(param, name=name):
            saved = p[name]
            p[name] = param
            try:
                return (dual_forward(p, "a", bank, Tensor(h), route) * w).sum()
            finally:
                p[name] = saved
        assert T.grad_check(g, p[name]) < 1e-5, name


def test_adapter_delta_unrouted_matches_routed_single_key(rng):
    bank, p = make(rng, kind="lang")
    activate(p, rng, "lang")
    h = Tensor(rng.normal(size=(1, 3, 6)))
    routed = adapter_delta(p, "a.lang", h, np.array([1])).data
    single = {k.replace("a.lang", "s"): Tensor(v.data[1]) for k, v in p.items()}
    np.testing.assert_allclose(routed, adapter_delta(single, "s", h).data, atol=1e-12)
