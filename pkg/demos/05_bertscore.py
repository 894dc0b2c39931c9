"""Greedy-matching similarity: the hand case, then scores from a small frozen LM."""

import numpy as np

from speechqformer import evaluation as E
from speechqformer import llm

# %% three candidate tokens against two reference tokens
sim = np.array([[1.0, 0.0],
                [0.0, 1.0],
                [0.0, 0.0]])
print(E.greedy_match(sim))   # precision 2/3, recall 1, f1 0.8

# %% contextual embeddings from an (untrained, frozen) causal LM
lm = llm.FrozenLM.init(llm.LMConfig(num_layers=1, d_model=32, num_heads=2, d_ff=64), seed=0)
lm.freeze()
ref = [20, 21, 22, 23, 24, 25]
print("identical  ", E.bertscore(ref, ref, lm))
print("last swapped", E.bertscore(ref[:-1] + [40], ref, lm))
print("first swapped", E.bertscore([40] + ref[1:], ref, lm))
print("empty      ", E.bertscore([], ref, lm))
