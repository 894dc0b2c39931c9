"""Training loops for the adapter and the frozen LM, SPQC checkpoints, frozen-weight sweeps.

Every source of randomness inside a run is derived from ``(seed, step)``:
batch order, sampled negatives and the prompt template drawn per sample.
A checkpoint therefore only needs parameters, Adam moments and the step
counter to resume bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import llm, objectives, qformer
from . import tensor as T
from .data import SampleRecord
from .errors import ContractError, CorruptCheckpointError, FormatError
from .frontend import FeatureSequence, SynthEncoderSpec, frozen_weights, load_features, pad_features
from .optim import AdamState, ScheduleConfig, batch_indices, train_steps
from .prompts import BUILTIN_TEMPLATES, PromptTemplate, builtin_template, language_name
from .qformer import AdapterParams, QFormerConfig
from .tensor import Tensor
from .textproc import CLS, EOS, Vocab, pad_tokens, tokenize

log = logging.getLogger(__name__)

# -- checkpoint format ----------------------------------------------------------

SPQC_MAGIC = b"SPQC"
SPQC_VERSION = 1
_HEAD = struct.Struct("<4sIQI")
_U32 = struct.Struct("<I")
_DIGEST = 8
META_ENTRY = "meta.json"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    meta: dict = field(default_factory=dict)


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_DIGEST).digest()


def _entries(items: dict[str, np.ndarray]) -> bytes:
    out = [_U32.pack(len(items))]
    for name, arr in items.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        out.append(_U32.pack(len(raw)) + raw + _U32.pack(a.ndim))
        out.append(struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(np.ascontiguousarray(a).tobytes())
    return b"".join(out)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    meta = np.frombuffer(json.dumps(ckpt.meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float32)
    moments = dict(ckpt.moments)
    moments[META_ENTRY] = meta
    body = _HEAD.pack(SPQC_MAGIC, SPQC_VERSION, ckpt.step, len(ckpt.params))
    body += _entries(ckpt.params)[_U32.size:] + _entries(moments)
    return body + _digest(body)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> str:
    """Write ``ckpt``; returns the hex checksum stored in the trailer."""
    data = encode_checkpoint(ckpt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return data[-_DIGEST:].hex()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError("checkpoint ends inside an entry")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def entries(self, count: int) -> dict[str, np.ndarray]:
        out = {}
        for _ in range(count):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
            n = int(np.prod(dims, dtype=np.int64)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEAD.size + _DIGEST:
        raise CorruptCheckpointError("checkpoint is truncated")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if _digest(body) != digest:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    magic, version, step, count = _HEAD.unpack_from(body)
    if magic != SPQC_MAGIC:
        raise CorruptCheckpointError(f"bad magic {magic!r}")
    if version != SPQC_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}")
    r = _Reader(body)
    r.pos = _HEAD.size
    params = r.entries(count)
    moments = r.entries(r.u32())
    if r.pos != len(body):
        raise CorruptCheckpointError("trailing bytes after checkpoint entries")
    meta_arr = moments.pop(META_ENTRY, None)
    meta = {} if meta_arr is None else json.loads(meta_arr.astype(np.uint8).tobytes().decode("utf-8"))
    return Checkpoint(params, moments, int(step), meta)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def file_checksum(path: str | Path) -> str:
    return Path(path).read_bytes()[-_DIGEST:].hex()


def _adam_moments(state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name in state.m:
        out["adam.m/" + name] = state.m[name]
        out["adam.v/" + name] = state.v[name]
        out["adam.t/" + name] = np.float32(state.t[name])
    return out


def _adam_from(moments: dict[str, np.ndarray]) -> AdamState:
    state = AdamState()
    for key, arr in moments.items():
        kind, _, name = key.partition("/")
        if kind == "adam.m":
            state.m[name] = arr.copy()
        elif kind == "adam.v":
            state.v[name] = arr.copy()
        elif kind == "adam.t":
            state.t[name] = int(arr)
    return state


def adapter_checkpoint(params: AdapterParams, state: AdamState, step: int, meta: dict | None = None) -> Checkpoint:
    m = {"kind": "adapter", "qformer": asdict(params.config), **(meta or {})}
    return Checkpoint(params.snapshot(), _adam_moments(state), step, m)


def restore_adapter(ckpt: Checkpoint) -> tuple[AdapterParams, AdamState]:
    if ckpt.meta.get("kind") != "adapter":
        raise FormatError("checkpoint does not hold adapter parameters")
    cfg = QFormerConfig(**ckpt.meta["qformer"])
    ref = AdapterParams.init(cfg, 0)
    if set(ref.names()) != set(ckpt.params):
        raise FormatError("checkpoint parameter names do not match the adapter configuration")
    params = AdapterParams(cfg, {k: Tensor(ckpt.params[k].copy(), requires_grad=True, name=k) for k in ref.names()})
    return params, _adam_from(ckpt.moments)


def lm_checkpoint(run: llm.LMRun, meta: dict | None = None) -> Checkpoint:
    m = {"kind": "lm", "lm": asdict(run.lm.config), "frozen": run.lm.frozen, "perplexity": run.perplexity,
         **(meta or {})}
    return Checkpoint(run.lm.snapshot(), _adam_moments(run.state), run.step, m)


def restore_lm(ckpt: Checkpoint) -> llm.LMRun:
    if ckpt.meta.get("kind") != "lm":
        raise FormatError("checkpoint does not hold a language model")
    cfg = llm.LMConfig(**ckpt.meta["lm"])
    frozen = bool(ckpt.meta.get("frozen"))
    lm = llm.FrozenLM(cfg, {k: Tensor(v.copy(), requires_grad=not frozen, name=k) for k, v in sorted(ckpt.params.items())})
    lm.frozen = frozen
    return llm.LMRun(lm, _adam_from(ckpt.moments), ckpt.step, float(ckpt.meta.get("perplexity", float("inf"))))


def load_frozen_lm(path: str | Path) -> llm.FrozenLM:
    run = restore_lm(load_checkpoint(path))
    if not run.lm.frozen:
        raise ContractError(f"{path} holds an LM that was never frozen")
    return run.lm


# -- data ---------------------------------------------------------------------

@dataclass
class SpeechSet:
    """Manifest rows with their features loaded once."""

    rows: list[SampleRecord]
    features: list[FeatureSequence]

    @classmethod
    def load(cls, rows: Sequence[SampleRecord], root: str | Path, d_enc: int | None = None) -> "SpeechSet":
        root = Path(root)
        cache: dict[str, FeatureSequence] = {}
        feats = []
        for r in rows:
            if r.features not in cache:
                cache[r.features] = load_features(root / r.features, d_enc=d_enc)
            feats.append(cache[r.features])
        return cls(list(rows), feats)

    def __len__(self) -> int:
        return len(self.rows)

    def transcript_ids(self, i: int, vocab: Vocab) -> list[int]:
        return tokenize(self.rows[i].transcript, vocab) + [EOS]

    def target_ids(self, i: int, vocab: Vocab) -> list[int]:
        return tokenize(self.rows[i].target_text(), vocab) + [EOS]

    def batch(self, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        return pad_features([self.features[i] for i in idx])


def unique_utterances(rows: Sequence[SampleRecord]) -> list[SampleRecord]:
    """One row per feature file (the first one), preserving order."""
    seen, out = set(), []
    for r in rows:
        if r.features not in seen:
            seen.add(r.features)
            out.append(r)
    return out


# -- configs -----------------------------------------------------------------------

@dataclass(frozen=True)
class PretrainConfig:
    batch_size: int = 8
    steps: int = 2000
    warmup_steps: int = 200
    lr_warmup_start: float = 1e-6
    lr_peak: float = 1e-3  # desk value; 1e-4 leaves STM stuck near ln 2 within 2000 steps
    lr_final: float = 1e-5
    grad_clip: float = 1.0
    tau: float = 0.07
    w_stc: float = 1.0
    w_stm: float = 1.0
    w_stg: float = 1.0
    hard_negatives: bool = False
    eval_every: int = 500
    checkpoint_every: int = 0

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_warmup_start, self.lr_peak, self.lr_final, self.warmup_steps, self.steps)


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 32
    steps: int = 2000
    warmup_steps: int = 200
    lr_warmup_start: float = 1e-6
    lr_peak: float = 3e-3  # desk value; lower peaks plateau on the longest sentences
    lr_final: float = 1e-5
    grad_clip: float = 1.0
    eval_every: int = 500
    checkpoint_every: int = 0

    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.lr_warmup_start, self.lr_peak, self.lr_final, self.warmup_steps, self.steps)


@dataclass
class AdapterRun:
    params: AdapterParams
    state: AdamState
    step: int
    metrics: list[dict] = field(default_factory=list)


StepHook = Callable[[dict], None]
CheckpointHook = Callable[[AdapterRun], None]


# -- pre-training ------------------------------------------------------------------

def retrieval_eval(params: AdapterParams, data: SpeechSet, vocab: Vocab, seed: int = 0,
                   batch_size: int = 64) -> dict[str, float]:
    """Speech-to-text R@1 over all pairs and STM accuracy on each positive plus one sampled negative."""
    n = len(data)
    texts = [data.transcript_ids(i, vocab)[:-1] for i in range(n)]
    with T.no_grad():
        qs, cls = [], []
        for s in range(0, n, batch_size):
            idx = list(range(s, min(n, s + batch_size)))
            x, valid = data.batch(idx)
            qs.append(qformer.encode_queries_batch(params, x, valid).data)
            ids, pad = pad_tokens([[CLS] + texts[i] for i in idx])
            cls.append(qformer.encode_text_batch(params, ids, pad).data[:, 0])
        q = Tensor(np.concatenate(qs))
        c = Tensor(np.concatenate(cls))
        sim = objectives.similarity_matrix(params, q, c).data
        r_at_1 = float(np.mean(sim.argmax(axis=1) == np.arange(n)))

        negatives = objectives.sample_negatives(n, seed)
        correct = 0
        for s in range(0, n, batch_size):
            idx = np.arange(s, min(n, s + batch_size))
            x, valid = data.batch(idx)
            for texts_idx, label in ((idx, 1), (negatives[idx], 0)):
                ids, pad = pad_tokens([[CLS] + texts[i] for i in texts_idx])
                logits = qformer.matching_logits_batch(params, x, valid, ids, pad).data
                correct += int((logits.argmax(axis=1) == label).sum())
    return {"r_at_1": r_at_1, "stm_accuracy": correct / (2 * n)}


def pretrain(
    train: SpeechSet,
    dev: SpeechSet | None,
    qcfg: QFormerConfig,
    cfg: PretrainConfig,
    seed: int,
    vocab: Vocab,
    on_step: StepHook | None = None,
    resume: AdapterRun | None = None,
    on_checkpoint: CheckpointHook | None = None,
) -> AdapterRun:
    """Joint STC + STM + STG training of the adapter."""
    run = resume or AdapterRun(AdapterParams.init(qcfg, seed), AdamState(), 0)
    params = run.params
    weights = (cfg.w_stc, cfg.w_stm, cfg.w_stg)
    transcripts = [train.transcript_ids(i, vocab) for i in range(len(train))]

    def loss_fn(step):
        idx = batch_indices(len(train), cfg.batch_size, seed, step)
        x, valid = train.batch(idx)
        batch = objectives.PairBatch(x, valid, [transcripts[i] for i in idx], cfg.tau)
        bundle = objectives.pretraining_losses(batch, params, int(seed * 1_000_003 + step), weights,
                                               cfg.hard_negatives)
        return bundle.objective, {"stc": bundle.stc, "stm": bundle.stm, "stg": bundle.stg}

    def after(record):
        run.step = record["step"] + 1
        if dev is not None and cfg.eval_every and (run.step % cfg.eval_every == 0 or run.step == cfg.steps):
            record.update(retrieval_eval(params, dev, vocab, seed))
            log.info("pretrain step %d loss %.4f R@1 %.3f STM acc %.3f", record["step"], record["loss"],
                     record["r_at_1"], record["stm_accuracy"])
        run.metrics.append(record)
        if on_step:
            on_step(record)
        if on_checkpoint and cfg.checkpoint_every and run.step % cfg.checkpoint_every == 0:
            on_checkpoint(run)
        return False

    run.step = train_steps(params.tensors, loss_fn, run.state, cfg.schedule(), run.step, cfg.steps,
                           cfg.grad_clip, after)
    return run


# -- fine-tuning ---------------------------------------------------------------------

def template_choices(seed: int, step: int, n: int, num_templates: int = len(BUILTIN_TEMPLATES)) -> list[int]:
    """Template ids (1-based) drawn uniformly for the ``n`` samples of ``step``."""
    rng = np.random.default_rng([seed, step, 1])
    return [int(t) + 1 for t in rng.integers(num_templates, size=n)]


def finetune(
    train: SpeechSet,
    params: AdapterParams,
    lm: llm.FrozenLM,
    cfg: FinetuneConfig,
    seed: int,
    vocab: Vocab,
    templates: Sequence[PromptTemplate] | None = None,
    on_step: StepHook | None = None,
    resume: AdapterRun | None = None,
    on_checkpoint: CheckpointHook | None = None,
    dev_eval: Callable[[AdapterParams], dict] | None = None,
) -> AdapterRun:
    """Instruction fine-tuning through the frozen LM with a random template per sample."""
    if not lm.frozen:
        raise ContractError("language model must be frozen before fine-tuning")
    templates = list(templates) if templates else [builtin_template(i) for i in range(1, len(BUILTIN_TEMPLATES) + 1)]
    run = resume or AdapterRun(params, AdamState(), 0)
    params = run.params
    targets = [train.target_ids(i, vocab) for i in range(len(train))]
    langs = [language_name(r.language) for r in train.rows]

    def loss_fn(step):
        idx = batch_indices(len(train), cfg.batch_size, seed, step)
        x, valid = train.batch(idx)
        tpl = [templates[t - 1] for t in template_choices(seed, step, len(idx), len(templates))]
        loss = llm.finetune_loss_batch(params, lm, x, valid, tpl, [langs[i] for i in idx],
                                       [targets[i] for i in idx], vocab)
        return loss, {}

    def after(record):
        run.step = record["step"] + 1
        if dev_eval is not None and cfg.eval_every and (run.step % cfg.eval_every == 0 or run.step == cfg.steps):
            record.update(dev_eval(params))
            log.info("finetune step %d loss %.4f %s", record["step"], record["loss"],
                     {k: v for k, v in record.items() if k.startswith("dev_")})
        run.metrics.append(record)
        if on_step:
            on_step(record)
        if on_checkpoint and cfg.checkpoint_every and run.step % cfg.checkpoint_every == 0:
            on_checkpoint(run)
        return False

    run.step = train_steps(params.tensors, loss_fn, run.state, cfg.schedule(), run.step, cfg.steps,
                           cfg.grad_clip, after)
    return run


# -- frozen-weight sweep ----------------------------------------------------------------

def frozen_snapshot(lm: llm.FrozenLM, encoder: SynthEncoderSpec) -> dict[str, np.ndarray]:
    """Copies of every parameter that must never move: LM weights and speech-encoder weights."""
    snap = {"lm." + k: v.copy() for k, v in lm.snapshot().items()}
    w = frozen_weights(encoder)
    snap["encoder.token_table"] = np.array(w.token_table)
    snap["encoder.mixing"] = np.array(w.mixing)
    return snap


def frozen_sweep(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> dict:
    """Max absolute difference per frozen parameter; ``ok`` only if every one is exactly zero."""
    if set(before) != set(after):
        raise ContractError("frozen snapshots cover different parameters")
    diffs = {}
    for k in sorted(before):
        a, b = before[k], after[k]
        same = a.shape == b.shape and np.array_equal(a.view(np.uint8), b.view(np.uint8))
        diffs[k] = 0.0 if same else float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64)))) or float("nan")
    return {"ok": all(v == 0.0 for v in diffs.values()), "num_parameters": len(diffs),
            "max_abs_diff": max(diffs.values()) if diffs else 0.0, "diffs": diffs}
