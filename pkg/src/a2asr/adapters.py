"""Residual bottleneck adapters: language-specific banks plus a common adapter.

One adapter computes ``W_u(ReLU(W_d(LayerNorm(h)))) + h``.  The language
adapters of a layer are stored stacked along a leading key axis so a batch
mixing several languages is routed with a single gather.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DataError
from .tensor import Tensor

# script and family groupings for eleven commonly used language codes
SCRIPT_GROUPS = {
    "latin": ("en", "fr", "es", "it", "nl", "tr", "sv"),
    "chinese": ("zh",),
    "cyrillic": ("ru", "tt", "ky"),
}
FAMILY_GROUPS = {
    "germanic": ("en", "nl"),
    "romance": ("fr", "es", "it", "sv"),
    "turkic": ("tr", "tt", "ky"),
    "chinese": ("zh",),
}


class RoutingError(KeyError):
    pass


def resolve_grouping(mode, languages) -> dict:
    """Map each language to an adapter key.

    ``mode`` is ``"individual"``, ``"by_family"``, ``"by_script"`` or an
    explicit ``{language: key}`` mapping.
    """
    if isinstance(mode, dict):
        missing = [lang for lang in languages if lang not in mode]
        if missing:
            raise RoutingError(f"custom grouping lacks languages {missing}")
        return {lang: str(mode[lang]) for lang in languages}
    if mode == "individual":
        return {lang: lang for lang in languages}
    table = {"by_family": FAMILY_GROUPS, "by_script": SCRIPT_GROUPS}.get(mode)
    if table is None:
        raise ValueError(f"unknown adapter grouping {mode!r}")
    out = {}
    for lang in languages:
        key = next((g for g, members in table.items() if lang in members), None)
        # languages outside the table keep an adapter of their own
        out[lang] = key if key is not None else lang
    return out


@dataclass
class DualAdapterBank:
    """Routing description shared by every adapter layer of a model.

    ``kind`` is ``"dual"`` (language + common), ``"lang"`` (language only) or
    ``"none"``.
    """

    grouping: dict
    kind: str = "dual"
    bottleneck: int = 8
    keys: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("dual", "lang", "none"):
            raise ValueError(f"unknown adapter kind {self.kind!r}")
        if not self.keys:
            self.keys = sorted(set(self.grouping.values()))
        self._index = {k: i for i, k in enumerate(self.keys)}

    def key_of(self, lang: str) -> str:
        if lang not in self.grouping:
            raise RoutingError(f"unknown language {lang!r}; known: {sorted(self.grouping)}")
        return self.grouping[lang]

    def make_language_mask(self, langs) -> np.ndarray:
        """Adapter-key index per utterance."""
        out = np.empty(len(langs), dtype=np.int64)
        for i, lang in enumerate(langs):
            if not lang:
                raise DataError(f"utterance {i} has no language tag")
            out[i] = self._index[self.key_of(lang)]
        return out

    @property
    def n_banks(self) -> int:
        if self.kind == "none":
            return 0
        return len(self.keys) + (1 if self.kind == "dual" else 0)

    def params_per_layer(self, d: int) -> int:
        b = self.bottleneck
        return self.n_banks * (d * b + b * d + b + d + 2 * d)


def init_adapter_layer(params: dict, name: str, rng: np.random.Generator, bank: DualAdapterBank, d: int) -> None:
    """Create the stacked language adapters and the common adapter of one layer.

    ``W_u`` starts at zero, so a fresh adapter is the identity map.
    """
    if bank.kind == "none":
        return
    b = bank.bottleneck
    if not b < d:
        raise ValueError(f"adapter bottleneck {b} must be smaller than model dim {d}")
    scale = 1.0 / np.sqrt(d)
    groups = [("lang", len(bank.keys))]
    if bank.kind == "dual":
        groups.append(("com", None))
    for tag, n in groups:
        lead = () if n is None else (n,)
        p = f"{name}.{tag}"
        params[f"{p}.ln.g"] = Tensor(np.ones(lead + (d,)), requires_grad=True)
        params[f"{p}.ln.b"] = Tensor(np.zeros(lead + (d,)), requires_grad=True)
        params[f"{p}.down.w"] = Tensor(rng.normal(0.0, scale, size=lead + (d, b)), requires_grad=True)
        params[f"{p}.down.b"] = Tensor(np.zeros(lead + (b,)), requires_grad=True)
        params[f"{p}.up.w"] = Tensor(np.zeros(lead + (b, d)), requires_grad=True)
        params[f"{p}.up.b"] = Tensor(np.zeros(lead + (d,)), requires_grad=True)


def adapter_delta(params: dict, prefix: str, h: Tensor, route: np.ndarray | None = None) -> Tensor:
    """``W_u(ReLU(W_d(LayerNorm(h))))`` without the residual.

    With ``route`` the parameters are stacked per key and utterance ``i`` of
    ``h`` (shape ``(batch, time, d)``) uses key ``route[i]``.
    """
    g, beta = params[f"{prefix}.ln.g"], params[f"{prefix}.ln.b"]
    wd, bd = params[f"{prefix}.down.w"], params[f"{prefix}.down.b"]
    wu, bu = params[f"{prefix}.up.w"], params[f"{prefix}.up.b"]
    if route is None:
        z = T.layernorm(h, g, beta)
        return T.relu(z @ wd + bd) @ wu + bu
    route = np.asarray(route)
    # LayerNorm with per-utterance affine: normalise with unit affine first
    ones = Tensor(np.ones(h.shape[-1], dtype=h.dtype), dtype=h.dtype)
    zeros_ = Tensor(np.zeros(h.shape[-1], dtype=h.dtype), dtype=h.dtype)
    z = T.layernorm(h, ones, zeros_) * g[route][:, None, :] + beta[route][:, None, :]
    hidden = T.relu(z @ wd[route] + bd[route][:, None, :])
    return hidden @ wu[route] + bu[route][:, None, :]


def adapter_forward(params: dict, prefix: str, h: Tensor) -> Tensor:
    return adapter_delta(params, prefix, h) + h


def dual_forward(params: dict, name: str, bank: DualAdapterBank, h: Tensor, route: np.ndarray, literal: bool = False) -> Tensor:
    """Apply a layer's adapters to ``h`` of shape ``(batch, time, d)``.

    The default keeps a single residual copy: ``h + d_lang + d_com``.  With
    ``literal=True`` the two full adapter outputs are summed, giving
    ``2h + d_lang + d_com``.
    """
    if bank.kind == "none":
        return h
    out = h + adapter_delta(params, f"{name}.lang", h, route)
    if bank.kind == "dual":
        out = out + adapter_delta(params, f"{name}.com", h)
        if literal:
            out = out + h
    return out
