"""Contrastive, matching and generation losses on one random batch."""

import math

import numpy as np

from speechqformer import objectives as O
from speechqformer.qformer import AdapterParams, QFormerConfig
from speechqformer.tensor import Tensor
from speechqformer.textproc import EOS

rng = np.random.default_rng(0)
params = AdapterParams.init(QFormerConfig(), seed=42)

frames = rng.normal(size=(8, 24, 64)).astype(np.float32)
valid = np.ones((8, 24), dtype=bool)
texts = [list(rng.integers(10, 64, size=int(rng.integers(4, 9)))) + [EOS] for _ in range(8)]
batch = O.PairBatch(frames, valid, texts, tau=0.07)

# %% an untrained adapter: generation sits near ln |V|, matching near ln 2
bundle = O.pretraining_losses(batch, params, seed=0)
print(f"stc {bundle.stc:.3f}  stm {bundle.stm:.3f}  stg {bundle.stg:.3f}  (ln 64 = {math.log(64):.3f})")

# %% contrastive loss on a hand-made similarity matrix
sim = Tensor(np.eye(2))
print("two pairs, tau 1:", O.info_nce(sim, 1.0).item(), "expected", math.log(1 + math.exp(-1)))

# %% negatives for matching never pick the positive
print("negatives:", O.sample_negatives(8, seed=3))
