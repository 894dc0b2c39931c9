"""Frozen decoder language model and the instruction path that feeds it query embeddings.

The language model is pre-trained once on text-only instruction data for
every language tag, then frozen.  During adapter fine-tuning the projected
query states are spliced between the prompt prefix and suffix; the loss is
taken on the answer tokens only and gradients stop at the splice.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import qformer
from . import tensor as T
from .errors import ConfigError, ContractError, TrainingError
from .frontend import pad_features
from .optim import AdamState, ScheduleConfig, batch_indices, train_steps
from .prompts import PromptTemplate, render_prompt
from .qformer import AdapterParams
from .tensor import Tensor
from .textproc import BOS, EOS, PAD, Vocab, pad_tokens

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LMConfig:
    num_layers: int = 4
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 512
    vocab_size: int = 64
    max_len: int = 48
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError("LM d_model must be divisible by num_heads")


class FrozenLM:
    """Pre-LN causal transformer that consumes embedding vectors."""

    def __init__(self, config: LMConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.frozen = False

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @classmethod
    def init(cls, config: LMConfig, seed: int = 0, dtype=np.float32) -> "FrozenLM":
        rng = np.random.default_rng(seed)
        c = config
        arrays: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(0, c.init_std, (c.vocab_size, c.d_model)),
            "pos_emb": rng.normal(0, c.init_std, (c.max_len, c.d_model)),
            "head.w": rng.normal(0, c.init_std, (c.d_model, c.vocab_size)),
            "head.b": np.zeros(c.vocab_size),
            "final_ln.g": np.ones(c.d_model),
            "final_ln.b": np.zeros(c.d_model),
        }
        for i in range(c.num_layers):
            p = f"layers.{i}."
            for w in ("wq", "wk", "wv", "wo"):
                arrays[p + "self." + w] = rng.normal(0, c.init_std, (c.d_model, c.d_model))
                arrays[p + "self." + w + "_b"] = np.zeros(c.d_model)
            arrays[p + "ffn.w1"] = rng.normal(0, c.init_std, (c.d_model, c.d_ff))
            arrays[p + "ffn.w1_b"] = np.zeros(c.d_ff)
            arrays[p + "ffn.w2"] = rng.normal(0, c.init_std, (c.d_ff, c.d_model))
            arrays[p + "ffn.w2_b"] = np.zeros(c.d_model)
            for ln in ("ln_self", "ln_ffn"):
                arrays[p + ln + ".g"] = np.ones(c.d_model)
                arrays[p + ln + ".b"] = np.zeros(c.d_model)
        return cls(config, {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)
                            for k, v in sorted(arrays.items())})

    def freeze(self) -> str:
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None
        self.frozen = True
        return self.checksum()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "FrozenLM":
        lm = FrozenLM(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad, name=k)
                                    for k, v in self.tensors.items()})
        lm.frozen = self.frozen
        return lm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    # -- forward ------------------------------------------------------------
    def embed_ids(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self["tok_emb"], ids)

    def hidden(self, embeds: Tensor, pad: np.ndarray | None = None) -> Tensor:
        """Final-layer (post-LN) states for a (B,N,d) embedding sequence under a causal mask."""
        b, n, _ = embeds.shape
        c = self.config
        if n > c.max_len:
            raise ContractError(f"sequence of {n} positions exceeds LM context {c.max_len}")
        h = T.add(embeds, T.getitem(self["pos_emb"], slice(0, n)))
        allowed = np.tril(np.ones((n, n), dtype=bool))[None]
        if pad is not None:
            allowed = allowed & ~pad[:, None, :]
        blocked = ~allowed[:, None]
        for i in range(c.num_layers):
            pre = f"layers.{i}."
            z = qformer._ln(h, self, pre + "ln_self")
            h = T.add(h, qformer.attention(z, z, self, pre + "self.", c.num_heads, blocked))
            z = qformer._ln(h, self, pre + "ln_ffn")
            z = qformer._linear(T.gelu(qformer._linear(z, self, pre + "ffn.w1")), self, pre + "ffn.w2")
            h = T.add(h, z)
        return qformer._ln(h, self, "final_ln")

    def logits(self, hidden: Tensor) -> Tensor:
        return T.add(T.matmul(hidden, self["head.w"]), self["head.b"])

    def forward_ids(self, ids: np.ndarray, pad: np.ndarray | None = None) -> Tensor:
        return self.logits(self.hidden(self.embed_ids(ids), pad))


# -- text-only pre-training ---------------------------------------------------

def lm_sequences(pairs: Sequence[tuple[list[int], list[int]]]):
    """(input ids, targets with PAD outside the answer, pad mask) for prompt/answer pairs."""
    seqs, tgts = [], []
    for prompt, answer in pairs:
        full = [BOS] + list(prompt) + list(answer) + [EOS]
        seqs.append(full[:-1])
        tgts.append([PAD] * len(prompt) + list(answer) + [EOS])
    ids, pad = pad_tokens(seqs)
    targets, _ = pad_tokens(tgts)
    return ids, targets, pad


def slot_positions(ids: np.ndarray, open_id: int, close_id: int) -> np.ndarray:
    """True strictly between the open and close markers of the speech span in each row."""
    opened = np.cumsum(ids == open_id, axis=1) > 0
    closed = np.cumsum(ids == close_id, axis=1) > 0
    return opened & ~closed & (ids != open_id)


def lm_loss(lm: FrozenLM, pairs, slot_noise: float = 0.0, noise_prob: float = 0.5,
            rng: np.random.Generator | None = None, slot_span: tuple[int, int] | None = None) -> Tensor:
    """Answer-span cross-entropy.

    With ``slot_noise > 0`` a random ``noise_prob`` share of the rows get Gaussian
    noise on their speech-slot embeddings, at a per-row level drawn from
    ``[0, slot_noise]`` times the embedding norm.  This keeps the model
    readable from continuous, imperfect slot inputs.
    """
    ids, targets, pad = lm_sequences(pairs)
    emb = lm.embed_ids(ids)
    if slot_noise > 0 and rng is not None and slot_span is not None:
        b, n, d = emb.shape
        level = rng.uniform(0.0, slot_noise, size=(b, 1, 1)) * (rng.random((b, 1, 1)) < noise_prob)
        norm = np.linalg.norm(emb.data, axis=-1, keepdims=True)
        z = rng.normal(size=(b, n, d)) * norm / math.sqrt(d) * level * slot_positions(ids, *slot_span)[..., None]
        emb = T.add(emb, Tensor(z.astype(emb.dtype)))
    logits = lm.logits(lm.hidden(emb, pad))
    b, n, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * n, v)), targets.reshape(-1), ignore_id=PAD)


def answer_perplexity(lm: FrozenLM, pairs, batch_size: int = 256) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for s in range(0, len(pairs), batch_size):
            chunk = pairs[s:s + batch_size]
            n = sum(len(a) + 1 for _, a in chunk)
            total += lm_loss(lm, chunk).item() * n
            count += n
    return math.exp(total / count)


@dataclass(frozen=True)
class LMTrainConfig:
    seed: int = 0
    batch_size: int = 32
    max_steps: int = 5000
    eval_every: int = 250
    stop_perplexity: float = 1.01
    max_perplexity: float = 1.5
    grad_clip: float = 1.0
    lr_warmup_start: float = 1e-5
    lr_peak: float = 1e-3
    lr_final: float = 1e-4
    warmup_steps: int = 200
    checkpoint_every: int = 0
    slot_noise: float = 1.5
    slot_noise_prob: float = 0.5


@dataclass
class LMRun:
    lm: FrozenLM
    state: AdamState
    step: int
    perplexity: float


def train_lm(
    train_pairs: Sequence[tuple[list[int], list[int]]],
    dev_pairs: Sequence[tuple[list[int], list[int]]],
    config: LMConfig,
    train: LMTrainConfig = LMTrainConfig(),
    on_step: Callable[[dict], None] | None = None,
    resume: LMRun | None = None,
    on_checkpoint: Callable[["LMRun"], None] | None = None,
    slot_span: tuple[int, int] | None = None,
) -> LMRun:
    """Answer-span next-token training with early stopping on dev perplexity (not frozen)."""
    if resume is None:
        run = LMRun(FrozenLM.init(config, train.seed), AdamState(), 0, float("inf"))
    else:
        run = resume
    lm = run.lm
    sched = ScheduleConfig(train.lr_warmup_start, train.lr_peak, train.lr_final, train.warmup_steps, train.max_steps)
    if run.perplexity <= train.stop_perplexity:
        return run

    def loss_fn(step):
        idx = batch_indices(len(train_pairs), train.batch_size, train.seed, step)
        rng = np.random.default_rng([train.seed, step, 2])
        return lm_loss(lm, [train_pairs[i] for i in idx], train.slot_noise, train.slot_noise_prob, rng, slot_span), {}

    def after(record):
        done = record["step"] + 1
        run.step = done
        if done % train.eval_every == 0 or done == train.max_steps:
            run.perplexity = answer_perplexity(lm, dev_pairs)
            record["dev_perplexity"] = run.perplexity
            log.info("lm step %d loss %.4f dev ppl %.4f", record["step"], record["loss"], run.perplexity)
        if on_step:
            on_step(record)
        if on_checkpoint and train.checkpoint_every and done % train.checkpoint_every == 0:
            on_checkpoint(run)
        return run.perplexity <= train.stop_perplexity

    run.step = train_steps(lm.tensors, loss_fn, run.state, sched, run.step, train.max_steps, train.grad_clip, after)
    return run


def pretrain_frozen_lm(
    train_pairs: Sequence[tuple[list[int], list[int]]],
    dev_pairs: Sequence[tuple[list[int], list[int]]],
    config: LMConfig,
    train: LMTrainConfig = LMTrainConfig(),
    on_step: Callable[[dict], None] | None = None,
    slot_span: tuple[int, int] | None = None,
) -> FrozenLM:
    """Train until dev perplexity reaches ``stop_perplexity``, then freeze.

    Raises :class:`TrainingError` if training ends above ``max_perplexity``.
    """
    run = train_lm(train_pairs, dev_pairs, config, train, on_step, slot_span=slot_span)
    check_lm_run(run, train)
    run.lm.freeze()
    return run.lm


def check_lm_run(run: LMRun, train: LMTrainConfig) -> None:
    if not run.perplexity <= train.max_perplexity:
        raise TrainingError(f"LM dev perplexity {run.perplexity:.3f} above {train.max_perplexity} after {run.step} steps")


# -- splicing, fine-tuning loss and generation ------------------------------

@dataclass
class SplicedBatch:
    const: np.ndarray      # (B,N,d) token embeddings, zeros on query rows
    place: np.ndarray      # (B,N,K) one-hot placement of query rows
    pad: np.ndarray        # (B,N)
    targets: np.ndarray    # (B,N) next-token targets, PAD where no loss
    query_start: list[int]
    prefix: list[list[int]]
    suffix: list[list[int]]


def splice(lm: FrozenLM, k: int, prefixes, suffixes, answers=None) -> SplicedBatch:
    """Lay out ``prefix ++ K query rows ++ suffix [++ answer[:-1]]`` per sample, right-padded."""
    b = len(prefixes)
    answers = answers if answers is not None else [[] for _ in range(b)]
    lengths = [len(p) + k + len(s) + max(len(a) - 1, 0) for p, s, a in zip(prefixes, suffixes, answers)]
    n = max(lengths)
    if n > lm.config.max_len:
        raise ContractError(f"spliced input of {n} positions exceeds LM context {lm.config.max_len}")
    table = lm["tok_emb"].data
    d = table.shape[1]
    const = np.zeros((b, n, d), dtype=table.dtype)
    place = np.zeros((b, n, k), dtype=table.dtype)
    pad = np.ones((b, n), dtype=bool)
    targets = np.full((b, n), PAD, dtype=np.int64)
    for i, (p, s, a) in enumerate(zip(prefixes, suffixes, answers)):
        text_after = list(s) + list(a[:-1])
        const[i, : len(p)] = table[p]
        place[i, len(p) + np.arange(k), np.arange(k)] = 1
        start = len(p) + k
        const[i, start: start + len(text_after)] = table[text_after]
        pad[i, : lengths[i]] = False
        if a:
            first = start + len(s) - 1
            targets[i, first: first + len(a)] = a
    return SplicedBatch(const, place, pad, targets, [len(p) for p in prefixes], list(prefixes), list(suffixes))


def spliced_embeddings(sb: SplicedBatch, projected: Tensor) -> Tensor:
    return T.add(Tensor(sb.const), T.matmul(Tensor(sb.place), projected))


def _require_frozen(lm: FrozenLM) -> None:
    if not lm.frozen:
        raise ContractError("language model must be frozen before adapter training or inference")


def prompt_parts(templates: Sequence[PromptTemplate], languages: Sequence[str], vocab: Vocab):
    pre, suf = [], []
    for tpl, lang in zip(templates, languages):
        p, s = render_prompt(tpl, lang, vocab)
        pre.append(p)
        suf.append(s)
    return pre, suf


def finetune_loss_batch(params: AdapterParams, lm: FrozenLM, feats: np.ndarray, feat_valid: np.ndarray,
                        templates: Sequence[PromptTemplate], languages: Sequence[str],
                        targets: Sequence[Sequence[int]], vocab: Vocab) -> Tensor:
    """Answer-only cross-entropy of the frozen LM fed with projected query embeddings."""
    _require_frozen(lm)
    for t in targets:
        if not t or t[-1] != EOS:
            raise ContractError("fine-tuning target must end with EOS")
    prefixes, suffixes = prompt_parts(templates, languages, vocab)
    sb = splice(lm, params.config.num_queries, prefixes, suffixes, targets)
    q = qformer.encode_queries_batch(params, feats, feat_valid)
    logits = lm.logits(lm.hidden(spliced_embeddings(sb, qformer.project(params, q)), sb.pad))
    b, n, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * n, v)), sb.targets.reshape(-1), ignore_id=PAD)


def finetune_loss(fs, template: PromptTemplate, language: str, target: Sequence[int],
                  params: AdapterParams, lm: FrozenLM, vocab: Vocab) -> Tensor:
    feats, valid = pad_features([fs])
    return finetune_loss_batch(params, lm, feats, valid, [template], [language], [list(target)], vocab)


def generate_batch(params: AdapterParams, lm: FrozenLM, feats: np.ndarray, feat_valid: np.ndarray,
                   template: PromptTemplate, language: str, vocab: Vocab, max_len: int) -> list[list[int]]:
    """Greedy decoding for a batch that shares one prompt; each output stops after EOS."""
    _require_frozen(lm)
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    b = feats.shape[0]
    prefix, suffix = render_prompt(template, language, vocab)
    sb = splice(lm, params.config.num_queries, [prefix] * b, [suffix] * b)
    table = lm["tok_emb"].data
    with T.no_grad():
        q = qformer.project(params, qformer.encode_queries_batch(params, feats, feat_valid))
        seq = spliced_embeddings(sb, q).data
        out = [[] for _ in range(b)]
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            if seq.shape[1] > lm.config.max_len:
                break
            h = lm.hidden(Tensor(seq))
            last = lm.logits(T.getitem(h, (slice(None), -1))).data
            nxt = last.argmax(axis=-1)
            for i in range(b):
                if not done[i]:
                    out[i].append(int(nxt[i]))
                    done[i] = nxt[i] == EOS
            if done.all():
                break
            seq = np.concatenate([seq, table[nxt][:, None, :]], axis=1)
    return out


def generate(fs, template: PromptTemplate, language: str, params: AdapterParams, lm: FrozenLM,
             vocab: Vocab, max_len: int = 16) -> list[int]:
    feats, valid = pad_features([fs])
    return generate_batch(params, lm, feats, valid, template, language, vocab, max_len)[0]
