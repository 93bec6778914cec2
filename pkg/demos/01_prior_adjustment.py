"""How subtracting scaled log-priors moves probability mass toward rare tokens.

Run with ``python demos/01_prior_adjustment.py``.
"""

import numpy as np

from a2asr import tensor as T
from a2asr.data import CorpusSpec, build_vocabulary, generate_corpus
from a2asr.losses import adjust_logits, estimate_priors
from a2asr.tensor import Tensor

# A small long-tailed corpus: four languages, Zipf-distributed tokens.
spec = CorpusSpec(train_counts=[400, 160, 60, 20], valid_counts=[1] * 4, test_counts=[1] * 4)
corpus = generate_corpus(spec)
vocab = build_vocabulary(u.text for u in corpus.splits["train"])
targets = [vocab.encode(u.text) + [vocab.eos] for u in corpus.splits["train"]]
priors = estimate_priors(targets, vocab.n_out)

order = np.argsort(-priors.pi)
print("most frequent  :", [(vocab.itos[i], round(float(priors.pi[i]), 4)) for i in order[:4]])
print("least frequent :", [(vocab.itos[i], round(float(priors.pi[i]), 4)) for i in order[-4:]])
print(f"{priors.n_zero} output classes never occur and share {1 / priors.total:.2e} of the mass\n")

# A decoder that is unsure between a head token and a tail token.
head, tail = int(order[0]), int(order[-5])
logits = np.zeros(vocab.n_out)
logits[head], logits[tail] = 2.0, 1.8
for tau in (0.0, 0.1, 0.3, 0.5):
    p = T.softmax(Tensor(adjust_logits(logits, priors, tau))).data
    print(f"tau={tau:.1f}  p(head)={p[head]:.3f}  p(tail)={p[tail]:.3f}  argmax={vocab.itos[int(p.argmax())]}")
