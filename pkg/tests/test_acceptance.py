"""Acceptance criteria, each run at its stated tolerance.

The pipeline criteria (3, 5, 6, 7, 8, 11) share two full runs of the CLI at
the default configuration, seed 42.  Expect roughly 15 minutes on one core.
Set ``SPEECHQFORMER_ACCEPTANCE_DIR`` to keep the run directories.
"""

import hashlib
import json
import math
import os
import string
import time
from pathlib import Path

import numpy as np
import pytest

import test_qformer
from speechqformer import cli, gradsuite, objectives, trainer
from speechqformer import evaluation as E
from speechqformer.data import CorpusSpec, languages_for, no_speech_chance_bound, read_manifest
from speechqformer.optim import ScheduleConfig, lr_at
from speechqformer.qformer import MODES, AdapterParams, QFormerConfig
from speechqformer.tensor import Tensor
from speechqformer.textproc import EOS, normalize, remove_actions, strip_chat_artifacts, tokenize

pytestmark = pytest.mark.slow


def _stage(argv):
    t0, c0 = time.perf_counter(), time.process_time()
    code = cli.main([str(a) for a in argv])
    assert code == 0, f"{argv[0]} exited {code}"
    return {"wall": time.perf_counter() - t0, "cpu": time.process_time() - c0}


def run_pipeline(root: Path) -> dict:
    """synth-data, pretrain-lm, pretrain, finetune, select-prompt, eval at default config."""
    d = {k: root / k for k in ("data", "lm", "pt", "ft", "sel", "eval")}
    times = {}
    times["synth-data"] = _stage(["synth-data", "--out", d["data"]])
    feature_hash = _tree_hash(d["data"])
    times["pretrain-lm"] = _stage(["pretrain-lm", "--data", d["data"], "--out", d["lm"]])
    lm_sum = trainer.file_checksum(d["lm"] / "lm.spqc")
    times["pretrain"] = _stage(["pretrain", "--data", d["data"], "--out", d["pt"]])
    times["finetune"] = _stage(["finetune", "--data", d["data"], "--lm", d["lm"] / "lm.spqc",
                                "--init", d["pt"] / "adapter.spqc", "--out", d["ft"]])
    times["select-prompt"] = _stage(["select-prompt", "--dev-manifest", d["data"] / "dev.jsonl",
                                     "--checkpoint", d["ft"] / "adapter.spqc", "--lm", d["lm"] / "lm.spqc",
                                     "--out", d["sel"]])
    times["eval"] = _stage(["eval", "--test-manifest", d["data"] / "test.jsonl",
                            "--checkpoint", d["ft"] / "adapter.spqc", "--lm", d["lm"] / "lm.spqc",
                            "--prompt-selection", d["sel"] / "prompt_selection.json", "--out", d["eval"]])
    return {**d, "root": root, "times": times, "data_hash_before": feature_hash, "lm_checksum_before": lm_sum}


def _tree_hash(path: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(path).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def _root(tmp_path_factory, name):
    keep = os.environ.get("SPEECHQFORMER_ACCEPTANCE_DIR")
    if keep:
        path = Path(keep) / name
        path.mkdir(parents=True, exist_ok=True)
        return path
    return tmp_path_factory.mktemp(name)


@pytest.fixture(scope="session")
def run_a(tmp_path_factory):
    return run_pipeline(_root(tmp_path_factory, "run_a"))


@pytest.fixture(scope="session")
def run_b(tmp_path_factory, run_a):
    return run_pipeline(_root(tmp_path_factory, "run_b"))


def _report(run):
    samples, summary = E.read_report(run["eval"] / "eval_report.jsonl")
    by = {}
    for s in samples:
        by.setdefault(s["language"], []).append(s)
    stats = {k: {"em": float(np.mean([s["exact_match"] for s in v])), "f1": float(np.mean([s["f1"] for s in v])),
                 "n": len(v)} for k, v in by.items()}
    return samples, summary, stats


# -- 1 -------------------------------------------------------------------------------

@pytest.mark.criterion(1, "gradient fidelity")
def test_gradient_fidelity(record_property):
    t0 = time.perf_counter()
    results = gradsuite.run_suite("all", seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r[2])
    record_property("detail", f"{len(results)} cases, worst {worst[1]} {worst[2]:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")
    assert {s for s, _, _ in results} == {"primitives", "blocks", "losses"}
    assert worst[2] < 1e-4
    assert elapsed < 120


# -- 2 -------------------------------------------------------------------------------

@pytest.mark.criterion(2, "mask exactness")
def test_mask_exactness(record_property):
    t0 = time.perf_counter()
    for mode in MODES:
        test_qformer.test_zero_influence_exhaustive(mode)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"3 modes, K 1..4, text_len 0..6, bit-exact; {elapsed:.1f}s (< 60s)")
    assert elapsed < 60


# -- 3 -------------------------------------------------------------------------------

@pytest.mark.criterion(3, "frozen contracts")
def test_frozen_contracts(run_a, record_property):
    sweep = json.loads((run_a["ft"] / "frozen_sweep.json").read_text())
    lm_after = trainer.file_checksum(run_a["lm"] / "lm.spqc")
    data_after = _tree_hash(run_a["data"])
    adapter_names = set(trainer.load_checkpoint(run_a["ft"] / "adapter.spqc").params)
    trainable = set(AdapterParams.init(QFormerConfig(), 0).names())
    record_property("detail", f"{sweep['num_parameters']} frozen tensors, max diff {sweep['max_abs_diff']}, "
                              f"LM checksum {run_a['lm_checksum_before']} -> {lm_after}")
    assert sweep["ok"] and sweep["max_abs_diff"] == 0.0
    assert run_a["lm_checksum_before"] == lm_after == sweep["lm_checksum_before"] == sweep["lm_checksum_after"]
    assert data_after == run_a["data_hash_before"]
    assert adapter_names == trainable


# -- 4 -------------------------------------------------------------------------------

@pytest.mark.criterion(4, "loss oracles")
def test_loss_oracles(record_property):
    cfg = QFormerConfig(num_layers=1, num_queries=1, d_model=2, num_heads=1, d_ff=4, cross_attn_every=1,
                        vocab_size=64, d_enc=2, d_proj=2, d_lm=2)
    p = AdapterParams.init(cfg, 0, dtype=np.float64)
    p["speech_proj.w"].data[:] = np.eye(2)
    p["text_proj.w"].data[:] = np.eye(2)
    pair = objectives.PairBatch(np.zeros((2, 3, 2)), np.ones((2, 3), dtype=bool), [[10, EOS], [11, EOS]], tau=1.0)
    q = Tensor(np.array([[[1.0, 0.0]], [[0.0, 1.0]]]))
    cls = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    stc = objectives.stc_loss(pair, p, (q, cls)).item()

    rng = np.random.default_rng(0)
    big = AdapterParams.init(QFormerConfig(), 42, dtype=np.float64)
    feats = rng.normal(size=(8, 20, 64))
    texts = [list(rng.integers(40, 64, size=6)) + [EOS] for _ in range(8)]
    batch = objectives.PairBatch(feats, np.ones((8, 20), dtype=bool), texts)
    stg = objectives.stg_loss(batch, big).item()
    big["itm_head.w"].data[:] = 0.0
    big["itm_head.b"].data[:] = 0.0
    stm = objectives.stm_loss(batch, big, 7).item()

    record_property("detail", f"STC {stc:.9f} vs {math.log(1 + math.exp(-1)):.9f}; STM {stm:.9f} vs ln2; "
                              f"STG {stg:.4f} vs ln64 {math.log(64):.4f}")
    assert abs(stc - math.log(1 + math.exp(-1))) <= 1e-6
    assert abs(stm - math.log(2)) <= 1e-6
    assert abs(stg - math.log(64)) <= 0.5


# -- 5 -------------------------------------------------------------------------------

@pytest.mark.criterion(5, "pre-training efficacy")
def test_pretraining_efficacy(run_a, record_property):
    status = json.loads((run_a["pt"] / "status.json").read_text())
    n_dev = len(trainer.unique_utterances(read_manifest(run_a["data"] / "dev.jsonl")))
    cpu = run_a["times"]["pretrain"]["cpu"]
    record_property("detail", f"R@1 {status['r_at_1']:.3f}, STM acc {status['stm_accuracy']:.3f} on {n_dev} dev "
                              f"pairs, step {status['step']}, {cpu:.0f}s CPU")
    assert n_dev == 128 and status["step"] == 2000
    assert status["r_at_1"] >= 0.9 and status["stm_accuracy"] >= 0.9
    assert cpu <= 600


# -- 6 -------------------------------------------------------------------------------

@pytest.mark.criterion(6, "fine-tuning efficacy")
def test_finetuning_efficacy(run_a, record_property):
    _, summary, stats = _report(run_a)
    status = json.loads((run_a["ft"] / "status.json").read_text())
    cpu = run_a["times"]["finetune"]["cpu"]
    record_property("detail", f"test EM fr {stats['fr']['em']:.3f} (n={stats['fr']['n']}), en {stats['en']['em']:.3f} "
                              f"(n={stats['en']['n']}), template {summary['template_id']}, step {status['step']}, "
                              f"{cpu:.0f}s CPU")
    assert status["step"] == 2000
    assert stats["fr"]["em"] >= 0.8 and stats["en"]["em"] >= 0.95
    assert cpu <= 600


# -- 7 -------------------------------------------------------------------------------

@pytest.mark.criterion(7, "zero-shot analogue")
def test_zero_shot(run_a, record_property):
    _, summary, stats = _report(run_a)
    chosen = json.loads((run_a["sel"] / "prompt_selection.json").read_text())["chosen"]
    train_langs = {r.language for r in read_manifest(run_a["data"] / "train.jsonl")}
    bound = no_speech_chance_bound(CorpusSpec())
    de = stats["de"]
    record_property("detail", f"de EM {de['em']:.3f}, F1 {de['f1']:.4f} (n={de['n']}), template {chosen}, "
                              f"chance bound {bound:.2e}")
    assert "de" not in train_langs
    assert summary["template_id"] == chosen
    assert bound < 0.05
    assert de["em"] >= 0.5 and de["f1"] >= 0.7 and de["em"] > bound


# -- 8 -------------------------------------------------------------------------------

def _minimal_pairs(rows, vocab, content):
    """Each reference against itself with the middle word replaced by the next content word."""
    pairs = []
    for r in rows:
        ref = tokenize(r.transcript, vocab)
        j = len(ref) // 2
        alt = list(ref)
        alt[j] = int(content[(int(np.searchsorted(content, ref[j])) + 1) % len(content)])
        pairs.append((alt, ref))
    return pairs


@pytest.mark.criterion(8, "metric oracle")
def test_metric_oracle(run_a, record_property, monkeypatch):
    hand = E.greedy_match(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    lm = trainer.load_frozen_lm(run_a["lm"] / "lm.spqc")
    langs = languages_for(CorpusSpec())
    rows = trainer.unique_utterances(read_manifest(run_a["data"] / "test.jsonl"))
    identical = [E.bertscore(t, t, lm).f1 for t in (tokenize(r.transcript, langs.vocab) for r in rows)]
    pair_f1 = np.array([E.bertscore(a, b, lm).f1 for a, b in _minimal_pairs(rows, langs.vocab, langs.content_ids)])

    with monkeypatch.context() as m:
        table = {10: [1.0, 0.0, 0.0], 11: [0.0, 1.0, 0.0], 12: [0.0, 0.0, 1.0]}
        m.setattr(E, "embed_tokens", lambda lm, toks: np.array([table[t] for t in toks]))
        via_bertscore = E.bertscore([10, 11, 12], [10, 11], None)

    record_property("detail", f"hand P {hand.precision:.6f} R {hand.recall} F1 {hand.f1:.6f}; identical F1 min "
                              f"{min(identical):.9f}; one-word minimal pair F1 mean {pair_f1.mean():.4f} "
                              f"(min {pair_f1.min():.4f}, {np.mean(pair_f1 > 0.9):.0%} of {len(pair_f1)} pairs > 0.9)")
    for s in (hand, via_bertscore):
        assert s.precision == 2 / 3 and s.recall == 1.0 and abs(s.f1 - 0.8) < 1e-15
    assert all(abs(f - 1.0) <= 1e-6 for f in identical)
    assert pair_f1.mean() > 0.9


# -- 9 -------------------------------------------------------------------------------

def _random_strings(n, seed=0):
    rng = np.random.default_rng(seed)
    alphabet = list(string.printable) + list("ÀéÇßØñ«»\u2014\u2013…¿¡“”‘’、。！？") + [" ", " ", "\U0001f600"]
    return ["".join(rng.choice(alphabet, size=int(rng.integers(0, 40)))) for _ in range(n)]


@pytest.mark.criterion(9, "text pipeline golden tests")
def test_text_pipeline(record_property):
    checks = {
        "applause": remove_actions("<|speech|> (applause) <|speech|>") == "<|speech|> <|speech|>",
        "lowercase+punctuation": normalize("Hello, World! It's (really) DONE.") == "hello world it s really done",
        "actions then normalize": normalize(remove_actions("So (laughter) we went home.")) == "so we went home",
        "artifact": strip_chat_artifacts("here is the transcribed text: bonjour le monde", "") == "bonjour le monde",
    }
    fuzz = _random_strings(1000)
    bad = [s for s in fuzz if normalize(normalize(s)) != normalize(s)]
    record_property("detail", f"{sum(checks.values())}/{len(checks)} golden cases, "
                              f"{len(fuzz) - len(bad)}/{len(fuzz)} fuzz strings idempotent")
    assert all(checks.values()), checks
    assert not bad


# -- 10 ------------------------------------------------------------------------------

@pytest.mark.criterion(10, "schedule conformance")
def test_schedule(record_property):
    s = ScheduleConfig()
    w, n = s.warmup_steps, s.total_steps
    anchors = (lr_at(0, s), lr_at(w, s), lr_at(n, s))
    jump = max(abs(lr_at(w - 1e-9, s) - lr_at(w, s)), abs(lr_at(w + 1e-9, s) - lr_at(w, s)))
    record_property("detail", f"lr(0, {w}, {n}) = {anchors}; jump at warmup {jump:.1e}")
    assert anchors == (1e-6, 1e-4, 1e-5)
    assert jump <= 1e-12


# -- 11 ------------------------------------------------------------------------------

@pytest.mark.criterion(11, "reproducibility")
def test_reproducibility(run_a, run_b, record_property):
    names = {}
    for stage in ("data", "lm", "pt", "ft", "sel", "eval"):
        for p in sorted(run_a[stage].rglob("*")):
            if p.is_file():
                names[f"{stage}/{p.relative_to(run_a[stage]).as_posix()}"] = p
    differ = [k for k, p in names.items()
              if not (run_b["root"] / k).is_file() or (run_b["root"] / k).read_bytes() != p.read_bytes()]
    ckpts = [k for k in names if k.endswith(".spqc")]
    record_property("detail", f"{len(names)} files compared ({len(ckpts)} checkpoints, eval report), "
                              f"{len(differ)} differ")
    assert "eval/eval_report.jsonl" in names and len(ckpts) >= 3
    assert not differ, differ
