"""A complete run at toy size: corpus, frozen LM, adapter pre-training, fine-tuning, generation.

Every stage goes through the command line entry point, exactly as a user
would call it.  Sizes are far too small to learn anything; the point is the
plumbing.  The default configuration (no ``--set`` overrides) is what the
acceptance suite trains.
"""

import json
import sys
import tempfile
from pathlib import Path

from speechqformer.cli import main

TOY = [
    "corpus.n_train=64", "corpus.n_dev=16", "corpus.n_test=16", "corpus.n_lm_train=400", "corpus.n_lm_dev=32",
    "lm.num_layers=1", "lm.d_model=32", "lm.num_heads=2", "lm.d_ff=64",
    "lm_train.max_steps=20", "lm_train.warmup_steps=5", "lm_train.eval_every=10", "lm_train.max_perplexity=100",
    "pretrain.steps=20", "pretrain.warmup_steps=5", "pretrain.eval_every=10",
    "finetune.steps=20", "finetune.warmup_steps=5", "finetune.eval_every=10", "finetune.batch_size=8",
    "eval.max_len=8",
]


def cli(*args):
    sets = [a for kv in TOY for a in ("--set", kv)]
    argv = [str(a) for a in args] + sets
    code = main(argv)
    if code:
        sys.exit(f"{args[0]} failed with exit code {code}")


root = Path(tempfile.mkdtemp(prefix="speechqformer-"))
print("working in", root)

cli("synth-data", "--out", root / "data")
cli("pretrain-lm", "--data", root / "data", "--out", root / "lm")
cli("pretrain", "--data", root / "data", "--out", root / "pt")
cli("finetune", "--data", root / "data", "--lm", root / "lm/lm.spqc", "--init", root / "pt/adapter.spqc",
    "--out", root / "ft")
print(json.dumps(json.loads((root / "ft/frozen_sweep.json").read_text())["ok"]), "<- frozen weights untouched")

# %% translate one utterance into a language the adapter never saw in fine-tuning
row = json.loads((root / "data/test.jsonl").read_text().splitlines()[0])
cli("generate", "--checkpoint", root / "ft/adapter.spqc", "--lm", root / "lm/lm.spqc",
    "--features", root / "data" / row["features"], "--language", "de")
print("reference:", row["translations"]["de"])
