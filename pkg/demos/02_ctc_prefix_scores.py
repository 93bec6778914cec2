"""CTC likelihoods and the prefix scores that guide joint beam search.

Run with ``python demos/02_ctc_prefix_scores.py``.
"""

import itertools

import numpy as np

from a2asr.decode import CTCPrefixScorer
from a2asr.losses import ctc_forward_backward

rng = np.random.default_rng(0)
labels = ["a", "b", "<eos>", "_"]  # "_" is the blank
blank, eos = 3, 2
z = rng.normal(size=(4, 4)) * 1.5
log_probs = z - np.log(np.exp(z).sum(-1, keepdims=True))
probs = np.exp(log_probs)


def collapse(path):
    out, prev = [], None
    for s in path:
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


# The forward algorithm sums over every alignment of "a b" in four frames.
loglik, _ = ctc_forward_backward(log_probs[None], [np.array([0, 1])], [4], blank)
paths = [p for p in itertools.product(range(4), repeat=4) if collapse(p) == [0, 1]]
brute = sum(np.prod([probs[t, s] for t, s in enumerate(p)]) for p in paths)
print(f"P(a b) forward algorithm {np.exp(loglik[0]):.6f}, enumeration of {len(paths)} paths {brute:.6f}")

# Prefix scores: probability that the output *starts with* a prefix.
scorer = CTCPrefixScorer(log_probs, blank, eos)
state = scorer.initial_state()
psi, states = scorer.score([], [0, 1, eos], state)
print("\nafter the empty prefix:")
for name, s in zip(["a...", "b...", "(empty, final)"], psi):
    print(f"  {name:<15} {np.exp(s):.4f}")
psi2, _ = scorer.score([0], [0, 1, eos], states[0])
print("after 'a':")
for name, s in zip(["a a...", "a b...", "a (final)"], psi2):
    print(f"  {name:<15} {np.exp(s):.4f}")
print("prefix scores never grow as the prefix gets longer, which lets the search stop early")
