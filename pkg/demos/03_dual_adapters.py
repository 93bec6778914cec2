"""Language-specific plus shared adapters: free at initialisation, cheap in parameters.

Run with ``python demos/03_dual_adapters.py``.
"""

import numpy as np

from a2asr.model import ModelConfig, SpeechTransformer, count_parameters

langs = ["en", "es", "tr", "ky"]
base = dict(feat_dim=8, vocab_size=30, d_model=32, n_heads=2, d_ff=64, enc_layers=2, dec_layers=2,
            languages=langs, adapter_bottleneck=8)
plain = SpeechTransformer(ModelConfig(**base), seed=0)
dual = SpeechTransformer(ModelConfig(**base, adapter_kind="dual"), seed=0)

x = np.random.default_rng(1).normal(size=(2, 20, 8))
h_plain, _ = plain.encode(x, [20, 14])
h_dual, _ = dual.encode(x, [20, 14], dual.route(["en", "ky"]))
print("fresh adapters change nothing:", np.array_equal(h_plain.data, h_dual.data))

extra = count_parameters(dual) - count_parameters(plain)
print(f"backbone {count_parameters(plain)} parameters, adapters add {extra} "
      f"({100 * extra / count_parameters(plain):.1f}%)")

# Each utterance is routed to its own language adapter; the shared one sees all.
batch_langs = ["ky", "en", "ky"]
print("language adapter used by each utterance:", dict(zip(range(3), (dual.bank.keys[i] for i in dual.route(batch_langs)))))
