"""Hybrid CTC/attention speech transformer, a text-only LM, and LM-to-decoder transfer."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L
from . import tensor as T
from .adapters import DualAdapterBank, dual_forward, init_adapter_layer, resolve_grouping
from .errors import ConfigError
from .tensor import Tensor


@dataclass
class ModelConfig:
    feat_dim: int = 8
    vocab_size: int = 0
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    d_dec: int = 0
    dec_heads: int = 0
    dec_ff: int = 0
    stack: int = 2
    dropout: float = 0.0
    languages: list = field(default_factory=list)
    adapter_kind: str = "none"
    adapter_placement: str = "encoder"
    adapter_bottleneck: int = 8
    adapter_grouping: object = "individual"
    adapter_residual: str = "single"

    def __post_init__(self):
        self.d_dec = self.d_dec or self.d_model
        self.dec_heads = self.dec_heads or self.n_heads
        self.dec_ff = self.dec_ff or self.d_ff
        if self.adapter_placement not in ("encoder", "decoder", "both"):
            raise ConfigError(f"bad adapter placement {self.adapter_placement!r}")
        if self.adapter_residual not in ("single", "literal"):
            raise ConfigError(f"bad adapter residual mode {self.adapter_residual!r}")

    @property
    def enc_adapters(self) -> bool:
        return self.adapter_kind != "none" and self.adapter_placement in ("encoder", "both")

    @property
    def dec_adapters(self) -> bool:
        return self.adapter_kind != "none" and self.adapter_placement in ("decoder", "both")


def _as_batch(x, dtype) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=dtype)
    return x


def init_decoder_layer(params, name, rng, d, heads, d_ff, cross: bool):
    L.init_layernorm(params, f"{name}.ln1", d)
    L.init_mha(params, f"{name}.self", rng, d, d, d, heads)
    if cross:
        L.init_layernorm(params, f"{name}.ln2", d)
        L.init_mha(params, f"{name}.cross", rng, d, d, d, heads)
    L.init_layernorm(params, f"{name}.ln3", d)
    L.init_ffn(params, f"{name}.ffn", rng, d, d_ff)


def decoder_layer(params, name, h, self_mask, heads, memory=None, mem_mask=None, adapter=None):
    """One decoder layer; ``memory=None`` skips cross-attention (text-only use).

    ``adapter`` is ``None`` or a callable applied in the adapter slot.
    """
    o1 = h + L.mha(params, f"{name}.self", *(3 * [L.layer_norm(params, f"{name}.ln1", h)]), self_mask, heads)
    o2 = o1
    if memory is not None:
        q = L.layer_norm(params, f"{name}.ln2", o1)
        o2 = o1 + L.mha(params, f"{name}.cross", q, memory, memory, mem_mask[:, None, :], heads)
    z = L.layer_norm(params, f"{name}.ln3", o2)
    if adapter is not None:
        z = adapter(z)
    return L.ffn_block(params, f"{name}.ffn", z + o2)


def _embed(params, name, ids, d):
    x = T.embedding(params[f"{name}.embed"], ids) * math.sqrt(d)
    pe = L.positional_encoding(ids.shape[1], d)
    return x + pe.astype(x.dtype)


def _target_masks(lengths, width):
    pad = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    return pad[:, None, :] & L.causal_mask(width)[None]


class SpeechTransformer:
    """Encoder, CTC head, autoregressive decoder and output projection.

    The CTC head has ``vocab_size + 1`` outputs; the blank is the last one.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = c = config
        if c.vocab_size < 1:
            raise ConfigError("vocab_size must be positive")
        self.bank = DualAdapterBank(
            resolve_grouping(c.adapter_grouping, c.languages) if c.languages else {},
            kind=c.adapter_kind if c.languages else "none",
            bottleneck=c.adapter_bottleneck,
        )
        rng = np.random.default_rng(seed)
        p: dict = {}
        L.init_frontend(p, "enc.front", rng, c.feat_dim, c.stack, c.d_model)
        for i in range(c.enc_layers):
            n = f"enc.{i}"
            L.init_layernorm(p, f"{n}.ln1", c.d_model)
            L.init_mha(p, f"{n}.self", rng, c.d_model, c.d_model, c.d_model, c.n_heads)
            L.init_layernorm(p, f"{n}.ln2", c.d_model)
            L.init_ffn(p, f"{n}.ffn", rng, c.d_model, c.d_ff)
        L.init_layernorm(p, "enc.ln_out", c.d_model)
        L.init_linear(p, "ctc", rng, c.d_model, c.vocab_size + 1)
        if c.d_dec != c.d_model:
            L.init_linear(p, "bridge", rng, c.d_model, c.d_dec)
        p["dec.embed"] = Tensor(rng.normal(0.0, c.d_dec**-0.5, size=(c.vocab_size, c.d_dec)), requires_grad=True)
        for i in range(c.dec_layers):
            init_decoder_layer(p, f"dec.{i}", rng, c.d_dec, c.dec_heads, c.dec_ff, cross=True)
        L.init_layernorm(p, "dec.ln_out", c.d_dec)
        L.init_linear(p, "dec.out", rng, c.d_dec, c.vocab_size)
        # adapters draw from their own stream so the backbone init is unchanged
        arng = np.random.default_rng([seed, 1])
        if c.enc_adapters:
            for i in range(c.enc_layers):
                init_adapter_layer(p, f"enc.{i}.adapter", arng, self.bank, c.d_model)
        if c.dec_adapters:
            for i in range(c.dec_layers):
                init_adapter_layer(p, f"dec.{i}.adapter", arng, self.bank, c.d_dec)
        self.params = p
        self.frozen: set = set()

    # -- helpers ------------------------------------------------------------
    @property
    def blank(self) -> int:
        return self.config.vocab_size

    def route(self, langs) -> np.ndarray | None:
        if self.bank.kind == "none":
            return None
        return self.bank.make_language_mask(langs)

    def _adapter(self, name, route):
        literal = self.config.adapter_residual == "literal"
        return lambda z: dual_forward(self.params, name, self.bank, z, route, literal=literal)

    def trainable(self) -> dict:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def state_dict(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            raise ConfigError("parameter manifest mismatch")
        for k, v in state.items():
            if self.params[k].shape != tuple(np.shape(v)):
                raise ConfigError(f"shape mismatch for {k}: {self.params[k].shape} vs {np.shape(v)}")
            self.params[k].data = np.array(v, dtype=T.get_dtype())

    def astype(self, dtype) -> "SpeechTransformer":
        for v in self.params.values():
            v.data = v.data.astype(dtype)
        return self

    # -- forward ------------------------------------------------------------
    def encode(self, x, lengths=None, route=None):
        """Encode features ``(batch, T, F)`` (or a single ``(T, F)``).

        Returns ``(h_enc, mask)`` with ``h_enc`` of shape ``(batch, T', d)``
        and boolean ``mask`` marking real (non-padding) encoder frames.
        """
        c, p = self.config, self.params
        x = _as_batch(x, T.get_dtype())
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        b, t, _ = x.shape
        lengths = np.full(b, t) if lengths is None else np.asarray(lengths)
        if t < 1:
            raise ValueError("need at least one frame")
        h = L.frontend_subsample(p, "enc.front", x, c.stack)
        t_out = h.shape[1]
        mask = np.arange(t_out)[None, :] < L.subsampled_length(lengths, c.stack)[:, None]
        h = h + L.positional_encoding(t_out, c.d_model).astype(h.dtype)
        att_mask = mask[:, None, :]
        for i in range(c.enc_layers):
            n = f"enc.{i}"
            a = L.layer_norm(p, f"{n}.ln1", h)
            o = h + L.mha(p, f"{n}.self", a, a, a, att_mask, c.n_heads)
            z = L.layer_norm(p, f"{n}.ln2", o)
            if c.enc_adapters:
                z = self._adapter(f"{n}.adapter", route)(z)
            h = L.ffn_block(p, f"{n}.ffn", z + o)
        return L.layer_norm(p, "enc.ln_out", h), mask

    def ctc_logits(self, h_enc: Tensor) -> Tensor:
        return L.linear(self.params, "ctc", h_enc)

    def decode(self, ys_in, h_enc, enc_mask, route=None, ys_lengths=None, cross: bool = True) -> Tensor:
        """Teacher-forced decoder logits ``(batch, L, vocab)`` for inputs ``ys_in``."""
        c, p = self.config, self.params
        ys_in = np.asarray(ys_in)
        if ys_in.ndim == 1:
            ys_in = ys_in[None]
        b, width = ys_in.shape
        lengths = np.full(b, width) if ys_lengths is None else ys_lengths
        self_mask = _target_masks(lengths, width)
        memory = mem_mask = None
        if cross:
            memory = L.linear(p, "bridge", h_enc) if "bridge.w" in p else h_enc
            if memory.shape[0] != b:
                memory = memory[np.zeros(b, dtype=np.int64)]
                mem_mask = np.broadcast_to(enc_mask[:1], (b, enc_mask.shape[1]))
                if route is not None and len(route) != b:
                    route = np.repeat(route[:1], b)
            else:
                mem_mask = enc_mask
        h = _embed(p, "dec", ys_in, c.d_dec)
        for i in range(c.dec_layers):
            adapter = self._adapter(f"dec.{i}.adapter", route) if c.dec_adapters else None
            h = decoder_layer(p, f"dec.{i}", h, self_mask, c.dec_heads, memory, mem_mask, adapter)
        return L.linear(p, "dec.out", L.layer_norm(p, "dec.ln_out", h))

    def decode_step(self, prefix, h_enc, enc_mask, route=None) -> Tensor:
        """Next-token logits after ``prefix`` (which starts with ``<sos>``).

        ``prefix`` may be ``(L,)`` or a batch of equal-length prefixes
        ``(n, L)`` sharing one encoder output.
        """
        logits = self.decode(prefix, h_enc, enc_mask, route)
        return logits[:, -1]


class TextLM:
    """Causal decoder-only language model trained on text.

    Layers share the speech decoder's layout (minus cross-attention) and
    parameter names, which is what makes transfer a by-name copy.
    """

    def __init__(self, vocab_size: int, d: int = 32, heads: int = 2, d_ff: int = 64, layers: int = 2, seed: int = 0):
        self.vocab_size, self.d, self.heads, self.d_ff, self.layers = vocab_size, d, heads, d_ff, layers
        rng = np.random.default_rng(seed)
        p: dict = {"dec.embed": Tensor(rng.normal(0.0, d**-0.5, size=(vocab_size, d)), requires_grad=True)}
        for i in range(layers):
            init_decoder_layer(p, f"dec.{i}", rng, d, heads, d_ff, cross=False)
        L.init_layernorm(p, "dec.ln_out", d)
        L.init_linear(p, "dec.out", rng, d, vocab_size)
        self.params = p

    def logits(self, ids, lengths=None) -> Tensor:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        b, width = ids.shape
        lengths = np.full(b, width) if lengths is None else lengths
        mask = _target_masks(lengths, width)
        h = _embed(self.params, "dec", ids, self.d)
        for i in range(self.layers):
            h = decoder_layer(self.params, f"dec.{i}", h, mask, self.heads)
        return L.linear(self.params, "dec.out", L.layer_norm(self.params, "dec.ln_out", h))


# -- vocabulary mapping and transfer ----------------------------------------
@dataclass
class VocabMap:
    mapping: dict
    unmatched: list
    asr_size: int

    @property
    def coverage(self) -> float:
        return 100.0 * len(self.mapping) / self.asr_size if self.asr_size else 0.0


def build_vocab_map(lm_vocab, asr_vocab) -> VocabMap:
    """Match ASR tokens to LM tokens by exact surface string.

    Both arguments are sequences of token strings indexed by id.
    """
    lm_index = {tok: i for i, tok in enumerate(lm_vocab)}
    mapping, unmatched = {}, []
    for i, tok in enumerate(asr_vocab):
        if tok in lm_index:
            mapping[i] = lm_index[tok]
        else:
            unmatched.append(i)
    return VocabMap(mapping, unmatched, len(asr_vocab))


def transferred_names(model: SpeechTransformer) -> list:
    """Decoder parameters overwritten (fully or partly) by :func:`transfer_parameters`."""
    names = []
    for name in model.params:
        if not name.startswith("dec."):
            continue
        if ".cross." in name or ".ln2." in name or ".adapter." in name:
            continue
        names.append(name)
    return names


def transfer_parameters(lm: TextLM, model: SpeechTransformer, vmap: VocabMap) -> SpeechTransformer:
    """Copy LM embeddings (matched tokens), self-attention, layer norms and
    feed-forward weights into the speech decoder, layer by layer.

    The output projection copies the LM head columns of matched tokens.
    Cross-attention, adapters, unmatched rows and the encoder keep their
    current values.
    """
    c = model.config
    if lm.layers < c.dec_layers:
        raise ConfigError(f"LM has {lm.layers} layers, decoder needs {c.dec_layers}")
    if lm.d != c.d_dec or lm.d_ff != c.dec_ff or lm.heads != c.dec_heads:
        raise ConfigError(
            f"LM dims (d={lm.d}, ff={lm.d_ff}, heads={lm.heads}) do not match decoder "
            f"(d={c.d_dec}, ff={c.dec_ff}, heads={c.dec_heads})"
        )
    asr_ids = np.array(sorted(vmap.mapping), dtype=np.int64)
    lm_ids = np.array([vmap.mapping[i] for i in asr_ids], dtype=np.int64)
    dtype = model.params["dec.embed"].dtype
    for name in transferred_names(model):
        src = lm.params[name].data
        dst = model.params[name]
        if name == "dec.embed":
            dst.data[asr_ids] = src[lm_ids]
        elif name == "dec.out.w":
            dst.data[:, asr_ids] = src[:, lm_ids]
        elif name == "dec.out.b":
            dst.data[asr_ids] = src[lm_ids]
        else:
            dst.data = np.array(src, dtype=dtype)
    return model


def count_parameters(params) -> int:
    if hasattr(params, "trainable"):
        params = params.trainable()
    return int(sum(p.size for p in params.values()))


# -- checkpoint format ------------------------------------------------------
CKPT_FORMAT = "a2asr-checkpoint"
CKPT_VERSION = 1


def _jsonable(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return obj


def save_checkpoint(path, params: dict, config=None, extra=None) -> None:
    """Write a JSON header line followed by one little-endian float blob.

    ``params`` maps names to arrays (or tensors); all are stored with the
    dtype of the first entry.
    """
    arrays = {k: np.asarray(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    dtype = np.dtype(next(iter(arrays.values())).dtype if arrays else np.float64).newbyteorder("<")
    manifest, offset = [], 0
    for name, arr in arrays.items():
        nbytes = arr.size * dtype.itemsize
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "dtype": dtype.str,
        "config": _jsonable(config),
        "params": manifest,
        "extra": extra or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> tuple:
    """Return ``(params, header)`` with params as a name-ordered dict of arrays."""
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format") != CKPT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint")
    blob = memoryview(raw)[nl + 1 :]
    dtype = np.dtype(header["dtype"])
    params = {}
    for entry in header["params"]:
        chunk = blob[entry["offset"] : entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return params, header
