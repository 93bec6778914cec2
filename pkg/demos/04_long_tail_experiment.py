"""Compare random sampling, balanced sampling and the full adapt-and-adjust recipe.

The default run is a reduced corpus that finishes in about a minute.  Pass
``--full`` for the default-scale corpus (a few minutes per system).
"""

import argparse

from a2asr.presets import run_grid

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--full", action="store_true", help="use the default-scale corpus")
parser.add_argument("--out", default=None, help="directory for run artefacts")
args = parser.parse_args()

small = {
    "data.train_counts": [600, 240, 90, 30],
    "data.test_counts": [60] * 4,
    "train.epochs": 6,
    "lm.sentences_per_language": 800,
}
results, table = run_grid(["smt", "bs", "a2_adjust_train"], args.out, None if args.full else small)
print(table)

smt, bs, a2 = (results[n].report for n in ("smt", "bs", "a2_adjust_train"))
print(f"\nbalanced sampling moves the tail language by {100 * (bs.per_language['ky'] - smt.per_language['ky']):+.1f} "
      f"CER points and the head language by {100 * (bs.per_language['en'] - smt.per_language['en']):+.1f}")
print(f"adapters + adjusted training reach {100 * a2.macro:.1f} macro CER "
      f"(random {100 * smt.macro:.1f}, balanced {100 * bs.macro:.1f})")
