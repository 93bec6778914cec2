"""Synthetic long-tailed multilingual corpus, vocabulary and batching."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SPECIALS = ("<unk>", "<sos>", "<eos>", "<blank>")


# -- vocabulary --------------------------------------------------------------
class Vocabulary:
    """Token inventory with reserved specials; the CTC blank is the last id."""

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.itos = self.tokens + list(SPECIALS)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.unk, self.sos, self.eos, self.blank = (self.stoi[s] for s in SPECIALS)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def n_out(self) -> int:
        """Output classes of the attention decoder (everything but blank)."""
        return len(self.itos) - 1

    def encode(self, text: str) -> list:
        return [self.stoi.get(tok, self.unk) for tok in text.split()]

    def decode(self, ids) -> str:
        special = {self.sos, self.eos, self.blank}
        return " ".join(self.itos[i] for i in ids if i not in special)

    def to_list(self) -> list:
        return list(self.itos)


def build_vocabulary(transcripts, min_count: int = 1) -> Vocabulary:
    """Frequency-ranked whitespace tokens with count >= ``min_count``."""
    counts = Counter(tok for line in transcripts for tok in line.split())
    if not counts:
        raise DataError("no transcripts to build a vocabulary from")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# -- corpus ------------------------------------------------------------------
@dataclass
class CorpusSpec:
    languages: list = field(default_factory=lambda: ["en", "es", "tr", "ky"])
    train_counts: list = field(default_factory=lambda: [2000, 800, 300, 100])
    valid_counts: list = field(default_factory=lambda: [40, 40, 40, 40])
    test_counts: list = field(default_factory=lambda: [200, 200, 200, 200])
    vocab_size: int = 40
    subset_size: int = 18
    zipf_exponent: float = 1.2
    feat_dim: int = 8
    frames_per_token: list = field(default_factory=lambda: [2, 4])
    tokens_per_utt: list = field(default_factory=lambda: [3, 6])
    noise: float = 0.5
    accent: float = 1.5
    seed: int = 0

    def __post_init__(self):
        n = len(self.languages)
        for name in ("train_counts", "valid_counts", "test_counts"):
            counts = getattr(self, name)
            if len(counts) != n or any(c < 1 for c in counts):
                raise DataError(f"{name} needs one positive count per language")
        if not 1 <= self.subset_size <= self.vocab_size:
            raise DataError("subset_size must lie in [1, vocab_size]")


@dataclass
class Utterance:
    id: str
    lang: str
    tokens: list
    frames: np.ndarray

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass
class Corpus:
    spec: CorpusSpec
    splits: dict
    inventory: list
    subsets: dict

    def by_language(self, split: str = "train") -> dict:
        out = {lang: [] for lang in self.spec.languages}
        for utt in self.splits[split]:
            out[utt.lang].append(utt)
        return out


def token_inventory(n: int) -> list:
    """``n`` distinct syllable strings (consonant + vowel, then with a coda)."""
    consonants = "bdfgklmnprstvz"
    vowels = "aeiou"
    out = [c + v for v in vowels for c in consonants]
    out += [c + v + "n" for v in vowels for c in consonants]
    if n > len(out):
        raise DataError(f"at most {len(out)} synthetic tokens available")
    return out[:n]


def zipf_probs(n: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return w / w.sum()


def sample_tokens(rng: np.random.Generator, probs: np.ndarray, length: int) -> list:
    """Draw ranks from ``probs`` without immediate repeats."""
    out = []
    while len(out) < length:
        r = int(rng.choice(len(probs), p=probs))
        if out and r == out[-1]:
            continue
        out.append(r)
    return out


def render_frames(rng, prototypes: np.ndarray, ids, reps_range, noise: float, transform=None) -> np.ndarray:
    """Repeat each token's prototype 2-4 times (``reps_range``) and add Gaussian noise."""
    lo, hi = reps_range
    chunks = []
    for tok in ids:
        proto = prototypes[tok] if transform is None else transform @ prototypes[tok]
        reps = int(rng.integers(lo, hi + 1))
        chunks.append(np.repeat(proto[None], reps, axis=0))
    frames = np.concatenate(chunks, axis=0)
    if noise > 0:
        frames = frames + rng.normal(0.0, noise, size=frames.shape)
    return frames


def _language_tables(spec: CorpusSpec):
    g = np.random.default_rng(np.random.SeedSequence(spec.seed).spawn(1)[0])
    protos = g.normal(size=(spec.vocab_size, spec.feat_dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    subsets, transforms = {}, {}
    for lang in spec.languages:
        subsets[lang] = [int(i) for i in g.permutation(spec.vocab_size)[: spec.subset_size]]
        mix = g.normal(size=(spec.feat_dim, spec.feat_dim)) / np.sqrt(spec.feat_dim)
        transforms[lang] = np.eye(spec.feat_dim) + spec.accent * mix if spec.accent else None
    return protos, subsets, transforms


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic train/valid/test utterances for every language of ``spec``."""
    inventory = token_inventory(spec.vocab_size)
    protos, subsets, transforms = _language_tables(spec)
    probs = zipf_probs(spec.subset_size, spec.zipf_exponent)
    splits = {}
    for s_idx, split in enumerate(("train", "valid", "test")):
        counts = getattr(spec, f"{split}_counts")
        utts = []
        for l_idx, lang in enumerate(spec.languages):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1 + s_idx, l_idx)))
            for i in range(counts[l_idx]):
                n_tok = int(rng.integers(spec.tokens_per_utt[0], spec.tokens_per_utt[1] + 1))
                ranks = sample_tokens(rng, probs, n_tok)
                ids = [subsets[lang][r] for r in ranks]
                frames = render_frames(rng, protos, ids, spec.frames_per_token, spec.noise, transforms[lang])
                utts.append(Utterance(f"{split}-{lang}-{i:05d}", lang, [inventory[t] for t in ids], frames))
        splits[split] = utts
    return Corpus(spec, splits, inventory, subsets)


def generate_text(spec: CorpusSpec, n_per_lang: int, seed: int) -> list:
    """Text-only sentences drawn from the same per-language token laws."""
    inventory = token_inventory(spec.vocab_size)
    _, subsets, _ = _language_tables(spec)
    probs = zipf_probs(spec.subset_size, spec.zipf_exponent)
    rng = np.random.default_rng(seed)
    lines = []
    for lang in spec.languages:
        for _ in range(n_per_lang):
            n_tok = int(rng.integers(spec.tokens_per_utt[0], spec.tokens_per_utt[1] + 1))
            lines.append(" ".join(inventory[subsets[lang][r]] for r in sample_tokens(rng, probs, n_tok)))
    return lines


# -- persistence ---------------------------------------------------------------
def save_corpus(corpus: Corpus, directory) -> None:
    """JSON-lines per split plus a ``manifest.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, utts in corpus.splits.items():
        with open(directory / f"{split}.jsonl", "w", encoding="utf-8") as fh:
            for u in utts:
                rec = {"id": u.id, "lang": u.lang, "text": u.text, "frames": u.frames.tolist()}
                fh.write(json.dumps(rec) + "\n")
    manifest = {
        "format": "a2asr-corpus",
        "spec": asdict(corpus.spec),
        "seed": corpus.spec.seed,
        "splits": {split: [u.id for u in utts] for split, utts in corpus.splits.items()},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


def load_corpus(directory) -> Corpus:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    spec = CorpusSpec(**manifest["spec"])
    splits = {}
    for split in manifest["splits"]:
        utts = []
        with open(directory / f"{split}.jsonl", encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                utts.append(Utterance(rec["id"], rec["lang"], rec["text"].split(), np.asarray(rec["frames"], dtype=np.float64)))
        splits[split] = utts
    _, subsets, _ = _language_tables(spec)
    return Corpus(spec, splits, token_inventory(spec.vocab_size), subsets)


def regenerate_corpus(directory) -> Corpus:
    """Rebuild a corpus from its manifest alone."""
    manifest = json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))
    return generate_corpus(CorpusSpec(**manifest["spec"]))


# -- batching ------------------------------------------------------------------
@dataclass
class Batch:
    ids: list
    langs: list
    feats: np.ndarray
    feat_lens: np.ndarray
    frame_mask: np.ndarray
    ys_in: np.ndarray
    ys_out: np.ndarray
    ys_lens: np.ndarray
    ctc_targets: list
    texts: list

    def __len__(self) -> int:
        return len(self.ids)


def make_batch(utts, vocab: Vocabulary) -> Batch:
    """Pad features to the longest utterance and targets to the longest label.

    ``ys_in`` is ``<sos> y``; ``ys_out`` is ``y <eos>`` padded with ``-1``.
    """
    for u in utts:
        if not u.lang:
            raise DataError(f"utterance {u.id} has no language tag")
    n = len(utts)
    t_max = max(u.n_frames for u in utts)
    f = utts[0].frames.shape[1]
    feats = np.zeros((n, t_max, f))
    lens = np.array([u.n_frames for u in utts])
    targets = [np.asarray(vocab.encode(u.text), dtype=np.int64) for u in utts]
    u_max = max(len(y) for y in targets) + 1
    ys_in = np.full((n, u_max), vocab.eos, dtype=np.int64)
    ys_out = np.full((n, u_max), -1, dtype=np.int64)
    for i, (u, y) in enumerate(zip(utts, targets)):
        feats[i, : u.n_frames] = u.frames
        ys_in[i, 0] = vocab.sos
        ys_in[i, 1 : len(y) + 1] = y
        ys_out[i, : len(y)] = y
        ys_out[i, len(y)] = vocab.eos
    return Batch(
        ids=[u.id for u in utts],
        langs=[u.lang for u in utts],
        feats=feats,
        feat_lens=lens,
        frame_mask=np.arange(t_max)[None, :] < lens[:, None],
        ys_in=ys_in,
        ys_out=ys_out,
        ys_lens=np.array([len(y) + 1 for y in targets]),
        ctc_targets=targets,
        texts=[u.text for u in utts],
    )


def assemble_batch_random(rng: np.random.Generator, utts, batch_size: int) -> list:
    """Uniform draw (with replacement) from the pooled corpus."""
    if batch_size < 1:
        raise ValueError("batch size must be positive")
    idx = rng.integers(0, len(utts), size=batch_size)
    return [utts[i] for i in idx]


def random_epoch(rng: np.random.Generator, utts, batch_size: int):
    """One shuffled pass over ``utts`` in batches of ``batch_size``."""
    order = rng.permutation(len(utts))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        yield [utts[i] for i in order[start : start + batch_size]]


def assemble_batch_balanced(rng: np.random.Generator, by_lang: dict, k: int, languages=None) -> list:
    """Exactly ``k`` utterances per language, drawn with replacement."""
    languages = list(by_lang) if languages is None else list(languages)
    out = []
    for lang in languages:
        if lang not in by_lang:
            raise DataError(f"unknown language {lang!r}; known: {sorted(by_lang)}")
        pool = by_lang[lang]
        if not pool:
            raise DataError(f"language {lang!r} has no utterances")
        out.extend(pool[i] for i in rng.integers(0, len(pool), size=k))
    return out
