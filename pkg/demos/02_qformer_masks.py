"""The three attention masks and what the query transformer returns under each."""

import numpy as np

from speechqformer import qformer
from speechqformer import tensor as T
from speechqformer.qformer import MODES, AdapterParams, QFormerConfig, build_mask
from speechqformer.textproc import CLS

K, L = 3, 4

# %% rows attend to columns; queries come first, then text
for mode in MODES:
    m = build_mask(mode, K, L).matrix.astype(int)
    print(mode)
    print(m, "\n")

# %% one forward pass per mode on random speech frames
cfg = QFormerConfig(num_queries=K)
params = AdapterParams.init(cfg, seed=0)
rng = np.random.default_rng(0)
frames = rng.normal(size=(2, 20, cfg.d_enc)).astype(np.float32)
valid = np.ones((2, 20), dtype=bool)
valid[1, 12:] = False                      # second utterance is shorter
ids = np.array([[CLS, 10, 11, 12], [CLS, 13, 14, 15]])
pad = np.zeros_like(ids, dtype=bool)

with T.no_grad():
    for mode in MODES:
        q, t = qformer.run(params, frames, valid, ids, pad, mode)
        print(mode, "queries", q.shape, "text", None if t is None else t.shape)

    # the projected queries are what the language model sees
    proj = qformer.project(params, qformer.encode_queries_batch(params, frames, valid))
    print("projected into LM width:", proj.shape)
