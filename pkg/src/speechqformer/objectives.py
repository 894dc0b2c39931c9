"""Speech-text contrastive (STC), matching (STM) and grounded generation (STG) losses."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import qformer
from . import tensor as T
from .errors import ContractError
from .frontend import FeatureSequence, pad_features
from .qformer import AdapterParams
from .tensor import Tensor
from .textproc import BOS, CLS, EOS, PAD, pad_tokens


@dataclass
class PairBatch:
    """B aligned (speech, transcript) pairs; index i of each side forms a positive pair.

    ``transcripts`` hold content ids followed by EOS (trailing PAD allowed).
    """

    feats: np.ndarray
    feat_valid: np.ndarray
    transcripts: list[list[int]]
    tau: float = 0.07

    @classmethod
    def from_sequences(cls, seqs: Sequence[FeatureSequence], transcripts: Sequence[Sequence[int]], tau: float = 0.07) -> "PairBatch":
        if len(seqs) != len(transcripts):
            raise ContractError("speech and text sides of a batch differ in size")
        feats, valid = pad_features(seqs)
        return cls(feats, valid, [list(t) for t in transcripts], tau)

    def __len__(self) -> int:
        return len(self.transcripts)

    def content(self, i: int) -> list[int]:
        return [t for t in self.transcripts[i] if t not in (EOS, PAD)]

    def cls_text(self) -> tuple[np.ndarray, np.ndarray]:
        ids, pad = pad_tokens([[CLS] + self.content(i) for i in range(len(self))])
        return ids, pad

    def subset(self, idx: Sequence[int]) -> "PairBatch":
        idx = list(idx)
        return PairBatch(self.feats[idx], self.feat_valid[idx], [self.transcripts[i] for i in idx], self.tau)


ContrastiveBatch = PairBatch


@dataclass
class LossBundle:
    stc: float
    stm: float
    stg: float
    weights: tuple[float, float, float]
    total: float
    objective: Tensor | None = field(default=None, repr=False)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def combine(losses: Sequence, weights: Sequence[float] = (1.0, 1.0, 1.0)) -> LossBundle:
    """Weighted sum of (stc, stm, stg); ``objective`` keeps the differentiable total."""
    if len(losses) != 3 or len(weights) != 3:
        raise ContractError("combine expects three losses and three weights")
    if any(w < 0 for w in weights):
        raise ContractError("loss weights must be non-negative")
    objective = None
    for loss, w in zip(losses, weights):
        if isinstance(loss, Tensor) and w:
            term = T.scale(loss, w)
            objective = term if objective is None else T.add(objective, term)
    total = sum(w * _value(l) for l, w in zip(losses, weights))
    return LossBundle(_value(losses[0]), _value(losses[1]), _value(losses[2]), tuple(float(w) for w in weights),
                      total, objective)


# -- contrastive --------------------------------------------------------------

def speech_embeddings(params: AdapterParams, query_states: Tensor) -> Tensor:
    return T.l2_normalize(T.matmul(query_states, params["speech_proj.w"]))


def text_embeddings(params: AdapterParams, cls_states: Tensor) -> Tensor:
    return T.l2_normalize(T.matmul(cls_states, params["text_proj.w"]))


def pair_similarity(query_states: Tensor, text_cls: Tensor, params: AdapterParams) -> Tensor:
    """Best cosine between any projected query and the projected text CLS state."""
    s = speech_embeddings(params, query_states)
    t = text_embeddings(params, T.reshape(text_cls, (1, -1)))
    return T.tmax(T.reshape(T.matmul(s, T.transpose(t)), (-1,)), axis=0)


def similarity_matrix(params: AdapterParams, query_states: Tensor, cls_states: Tensor) -> Tensor:
    """S[i, j] = max_k cos(speech_i query k, text_j) for (B,K,d) queries and (B,d) CLS states."""
    b, k, _ = query_states.shape
    s = speech_embeddings(params, query_states)
    t = text_embeddings(params, cls_states)
    flat = T.matmul(T.reshape(s, (b * k, -1)), T.transpose(t))
    return T.tmax(T.reshape(flat, (b, k, cls_states.shape[0])), axis=1)


def info_nce(sim: Tensor, tau: float) -> Tensor:
    """Symmetric InfoNCE over a square similarity matrix with the diagonal as positives."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    b = sim.shape[0]
    logits = T.scale(sim, 1.0 / tau)
    diag = np.arange(b)
    rows = T.cross_entropy(logits, diag)
    cols = T.cross_entropy(T.transpose(logits), diag)
    return T.scale(T.add(rows, cols), 0.5)


def encode_pair_batch(params: AdapterParams, batch: PairBatch) -> tuple[Tensor, Tensor]:
    q = qformer.encode_queries_batch(params, batch.feats, batch.feat_valid)
    ids, pad = batch.cls_text()
    cls = T.getitem(qformer.encode_text_batch(params, ids, pad), (slice(None), 0))
    return q, cls


def stc_loss(batch: PairBatch, params: AdapterParams, encoded: tuple[Tensor, Tensor] | None = None) -> Tensor:
    if batch.tau <= 0:
        raise ContractError("temperature must be positive")
    dtype = params["query_embeddings"].dtype
    if len(batch) < 2:
        return Tensor(np.zeros((), dtype=dtype))
    q, cls = encoded if encoded is not None else encode_pair_batch(params, batch)
    return info_nce(similarity_matrix(params, q, cls), batch.tau)


# -- matching -----------------------------------------------------------------

def sample_negatives(b: int, seed: int, sim: np.ndarray | None = None) -> np.ndarray:
    """For each i, a text index j != i: uniform, or drawn from softmax(sim[i]) for hard negatives."""
    if b < 2:
        raise ContractError("matching needs at least two pairs to form negatives")
    rng = np.random.default_rng(seed)
    out = np.empty(b, dtype=np.int64)
    for i in range(b):
        if sim is None:
            j = int(rng.integers(b - 1))
            out[i] = j + (j >= i)
        else:
            w = np.exp(sim[i] - sim[i].max())
            w[i] = 0.0
            out[i] = int(rng.choice(b, p=w / w.sum()))
    return out


def matching_inputs(batch: PairBatch, negatives: np.ndarray):
    b = len(batch)
    ids, pad = batch.cls_text()
    feats = np.concatenate([batch.feats, batch.feats])
    valid = np.concatenate([batch.feat_valid, batch.feat_valid])
    text = np.concatenate([ids, ids[negatives]])
    text_pad = np.concatenate([pad, pad[negatives]])
    labels = np.concatenate([np.ones(b, dtype=np.int64), np.zeros(b, dtype=np.int64)])
    return feats, valid, text, text_pad, labels


def stm_loss(batch: PairBatch, params: AdapterParams, negative_sampler_seed: int,
             hard_negative_sim: np.ndarray | None = None) -> Tensor:
    """Binary match/no-match cross-entropy over B positives and B sampled negatives."""
    negatives = sample_negatives(len(batch), negative_sampler_seed, hard_negative_sim)
    feats, valid, text, text_pad, labels = matching_inputs(batch, negatives)
    logits = qformer.matching_logits_batch(params, feats, valid, text, text_pad)
    return T.cross_entropy(logits, labels)


# -- generation ----------------------------------------------------------------

def generation_targets(transcripts: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing input ``BOS + t[:-1]`` and targets ``t``, both right-padded."""
    for t in transcripts:
        if not t:
            raise ContractError("empty transcript")
        body = [x for x in t if x != PAD]
        if not body or body[-1] != EOS:
            raise ContractError("transcript must end with EOS")
    ids, pad = pad_tokens([[BOS] + list(t[:-1]) for t in transcripts])
    targets, _ = pad_tokens([list(t) for t in transcripts])
    pad |= ids == PAD
    return ids, pad, targets


def stg_loss(batch: PairBatch, params: AdapterParams) -> Tensor:
    ids, pad, targets = generation_targets(batch.transcripts)
    logits = qformer.generation_logits_batch(params, batch.feats, batch.feat_valid, ids, pad)
    b, n, v = logits.shape
    return T.cross_entropy(T.reshape(logits, (b * n, v)), targets.reshape(-1), ignore_id=PAD)


def stg_loss_single(fs: FeatureSequence, transcript: Sequence[int], params: AdapterParams) -> Tensor:
    return stg_loss(PairBatch.from_sequences([fs], [transcript]), params)


def pretraining_losses(batch: PairBatch, params: AdapterParams, seed: int,
                       weights: Sequence[float] = (1.0, 1.0, 1.0), hard_negatives: bool = False) -> LossBundle:
    """All three objectives on one batch, combined with ``weights``."""
    encoded = encode_pair_batch(params, batch)
    stc = stc_loss(batch, params, encoded)
    if len(batch) >= 2:
        sim = None
        if hard_negatives:
            with T.no_grad():
                sim = similarity_matrix(params, encoded[0], encoded[1]).data.astype(np.float64) / batch.tau
        stm = stm_loss(batch, params, seed, sim)
    else:
        stm = Tensor(np.zeros((), dtype=params["query_embeddings"].dtype))
    stg = stg_loss(batch, params)
    return combine((stc, stm, stg), weights)
