"""Query transformer that turns a variable-length speech feature sequence into K vectors.

One set of self-attention and feed-forward weights serves the learnable
queries and the text tokens; which positions may see each other is decided
by the attention mask mode (unimodal, bidirectional or multimodal-causal).
Only the query rows cross-attend to the frozen speech features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .frontend import FeatureSequence, pad_features
from .tensor import Tensor
from .textproc import BOS, CLS, PAD, pad_tokens

MODES = ("unimodal", "bidirectional", "multimodal_causal")


@dataclass(frozen=True)
class QFormerConfig:
    num_layers: int = 2
    num_queries: int = 8
    d_model: int = 64
    num_heads: int = 2
    d_ff: int = 256
    cross_attn_every: int = 2
    vocab_size: int = 64
    max_text_len: int = 16
    d_enc: int = 64
    d_proj: int = 32
    d_lm: int = 128
    init_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ConfigError("d_model must be divisible by num_heads")
        if self.num_layers and not 1 <= self.cross_attn_every <= self.num_layers:
            raise ConfigError("cross_attn_every must lie in [1, num_layers]")
        if self.num_queries < 1:
            raise ConfigError("need at least one query")

    def has_cross(self, layer: int) -> bool:
        return layer % self.cross_attn_every == 0


@dataclass
class AttentionMask:
    matrix: np.ndarray
    mode: str


def build_mask(mode: str, num_queries: int, text_len: int, pad_mask: Sequence[bool] | None = None) -> AttentionMask:
    """Boolean (K+L) x (K+L) matrix, True where row may attend column."""
    if mode not in MODES:
        raise ContractError(f"unknown mask mode {mode!r}")
    k, n = num_queries, num_queries + text_len
    m = np.zeros((n, n), dtype=bool)
    if mode == "bidirectional":
        m[:] = True
    else:
        m[:k, :k] = True
        if mode == "unimodal":
            m[k:, k:] = True
        else:
            m[k:, :k] = True
            m[k:, k:] = np.tril(np.ones((text_len, text_len), dtype=bool))
    if pad_mask is not None and text_len:
        m[:, k:] &= ~np.asarray(pad_mask, dtype=bool)[None, :]
    return AttentionMask(m, mode)


class AdapterParams:
    """Every trainable tensor of the adapter, keyed by dotted name."""

    def __init__(self, config: QFormerConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def astype(self, dtype) -> "AdapterParams":
        return AdapterParams(self.config, {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                                           for k, v in self.tensors.items()})

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.tensors.values())

    @classmethod
    def init(cls, config: QFormerConfig, seed: int = 0, dtype=np.float32) -> "AdapterParams":
        rng = np.random.default_rng(seed)
        c = config
        shapes: dict[str, tuple] = {
            "query_embeddings": (c.num_queries, c.d_model),
            "text.tok_emb": (c.vocab_size, c.d_model),
            "text.pos_emb": (c.max_text_len, c.d_model),
        }
        ln_names = ["final_ln"]
        for i in range(c.num_layers):
            p = f"layers.{i}."
            for w in ("wq", "wk", "wv", "wo"):
                shapes[p + "self." + w] = (c.d_model, c.d_model)
            shapes[p + "ffn.w1"] = (c.d_model, c.d_ff)
            shapes[p + "ffn.w2"] = (c.d_ff, c.d_model)
            ln_names += [p + "ln_self", p + "ln_ffn"]
            if c.has_cross(i):
                shapes[p + "cross.wq"] = (c.d_model, c.d_model)
                shapes[p + "cross.wk"] = (c.d_enc, c.d_model)
                shapes[p + "cross.wv"] = (c.d_enc, c.d_model)
                shapes[p + "cross.wo"] = (c.d_model, c.d_model)
                ln_names.append(p + "ln_cross")
        shapes["lm_head.w"] = (c.d_model, c.vocab_size)
        shapes["speech_proj.w"] = (c.d_model, c.d_proj)
        shapes["text_proj.w"] = (c.d_model, c.d_proj)
        shapes["itm_head.w"] = (c.d_model, 2)
        shapes["llm_proj.w"] = (c.d_model, c.d_lm)

        tensors: dict[str, Tensor] = {}
        for name, shape in shapes.items():
            tensors[name] = rng.normal(0.0, c.init_std, size=shape)
            if name.endswith(".w") or name.split(".")[-1] in ("wq", "wk", "wv", "wo", "w1", "w2"):
                tensors[name[:-1] + "b" if name.endswith(".w") else name + "_b"] = np.zeros(shape[-1])
        for name in ln_names:
            tensors[name + ".g"] = np.ones(c.d_model)
            tensors[name + ".b"] = np.zeros(c.d_model)
        return cls(config, {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)
                            for k, v in sorted(tensors.items())})


def _linear(x: Tensor, p: AdapterParams, name: str) -> Tensor:
    return T.add(T.matmul(x, p[name]), p[name + "_b"])


def _ln(x: Tensor, p: AdapterParams, name: str) -> Tensor:
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"])


def attention(x: Tensor, kv: Tensor, p: AdapterParams, prefix: str, heads: int, blocked: np.ndarray) -> Tensor:
    """Multi-head attention from ``x`` (B,N,d) over ``kv`` (B,M,·); ``blocked`` broadcasts to (B,H,N,M)."""
    b, n, d = x.shape
    m = kv.shape[1]
    dh = d // heads

    def split(t: Tensor, length: int) -> Tensor:
        return T.transpose(T.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, p, prefix + "wq"), n)
    k = split(_linear(kv, p, prefix + "wk"), m)
    v = split(_linear(kv, p, prefix + "wv"), m)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    weights = T.softmax(T.masked_fill(scores, blocked), axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    return _linear(ctx, p, prefix + "wo")


def _speech_memory(feats: np.ndarray, dtype) -> Tensor:
    # unscaled positions dominate the keys, so a query can learn to pick out a time span
    pe = T.sinusoidal_positions(feats.shape[1], feats.shape[2])
    return Tensor((feats + pe[None]).astype(dtype))


def run(
    params: AdapterParams,
    feats: np.ndarray | None,
    feat_valid: np.ndarray | None,
    text_ids: np.ndarray | None,
    text_pad: np.ndarray | None,
    mode: str,
    with_queries: bool = True,
) -> tuple[Tensor | None, Tensor | None]:
    """Batched pass; returns (query states (B,K,d) or None, text states (B,L,d) or None)."""
    cfg = params.config
    dtype = params["query_embeddings"].dtype
    if feats is not None and feats.shape[-1] != cfg.d_enc:
        raise ConfigError(f"feature width {feats.shape[-1]} != configured d_enc {cfg.d_enc}")
    if text_ids is not None and text_ids.shape[1] > cfg.max_text_len:
        raise ContractError(f"text length {text_ids.shape[1]} exceeds max_text_len {cfg.max_text_len}")
    b = feats.shape[0] if feats is not None else text_ids.shape[0]
    k = cfg.num_queries if with_queries else 0
    length = 0 if text_ids is None else text_ids.shape[1]

    parts = []
    if with_queries:
        parts.append(T.expand(params["query_embeddings"], b))
    if text_ids is not None:
        tok = T.embedding(params["text.tok_emb"], text_ids)
        parts.append(T.add(tok, T.getitem(params["text.pos_emb"], slice(0, length))))
    h = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)

    if text_pad is None:
        text_pad = np.zeros((b, length), dtype=bool)
    allowed = np.stack([build_mask(mode, k, length, text_pad[i]).matrix for i in range(b)])
    blocked = ~allowed[:, None]

    memory = mem_blocked = None
    if with_queries and feats is not None:
        memory = _speech_memory(feats, dtype)
        mem_blocked = ~feat_valid[:, None, None, :]

    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        h = T.add(h, _self_attn(h, params, pre, cfg.num_heads, blocked))
        if memory is not None and cfg.has_cross(i):
            hq = T.getitem(h, (slice(None), slice(0, k)))
            hq = T.add(hq, attention(_ln(hq, params, pre + "ln_cross"), memory, params, pre + "cross.",
                                     cfg.num_heads, mem_blocked))
            h = T.concat([hq, T.getitem(h, (slice(None), slice(k, None)))], axis=1) if length else hq
        z = _ln(h, params, pre + "ln_ffn")
        z = _linear(T.gelu(_linear(z, params, pre + "ffn.w1")), params, pre + "ffn.w2")
        h = T.add(h, z)
    h = _ln(h, params, "final_ln")

    if not length:
        return h, None
    if not k:
        return None, h
    return T.getitem(h, (slice(None), slice(0, k))), T.getitem(h, (slice(None), slice(k, None)))


def _self_attn(h: Tensor, p: AdapterParams, pre: str, heads: int, blocked: np.ndarray) -> Tensor:
    z = _ln(h, p, pre + "ln_self")
    return attention(z, z, p, pre + "self.", heads, blocked)


# -- single-sample and batched entry points ---------------------------------

def encode_queries_batch(params: AdapterParams, feats: np.ndarray, feat_valid: np.ndarray) -> Tensor:
    q, _ = run(params, feats, feat_valid, None, None, "unimodal")
    return q


def encode_queries(params: AdapterParams, fs: FeatureSequence) -> Tensor:
    """K x d_model query states for one utterance."""
    feats, valid = pad_features([fs])
    return encode_queries_batch(params, feats, valid)[0]


def encode_text_batch(params: AdapterParams, text_ids: np.ndarray, text_pad: np.ndarray) -> Tensor:
    if not (text_ids[:, 0] == CLS).all():
        raise ContractError("text for the contrastive pathway must start with CLS")
    _, t = run(params, None, None, text_ids, text_pad, "unimodal", with_queries=False)
    return t


def encode_text(params: AdapterParams, tokens: Sequence[int]) -> tuple[Tensor, Tensor]:
    """(all text states L x d, CLS state d) for one token sequence starting with CLS."""
    ids, pad = pad_tokens([list(tokens)])
    pad |= ids == PAD
    states = encode_text_batch(params, ids, pad)[0]
    return states, states[0]


def generation_logits_batch(params: AdapterParams, feats: np.ndarray, feat_valid: np.ndarray,
                            text_ids: np.ndarray, text_pad: np.ndarray) -> Tensor:
    if not (text_ids[:, 0] == BOS).all():
        raise ContractError("generation input must start with BOS")
    _, t = run(params, feats, feat_valid, text_ids, text_pad, "multimodal_causal")
    return T.add(T.matmul(t, params["lm_head.w"]), params["lm_head.b"])


def forward_generation(params: AdapterParams, fs: FeatureSequence, text_in: Sequence[int]) -> Tensor:
    """Next-token logits (L x V) at each text position, conditioned on the speech via the queries."""
    feats, valid = pad_features([fs])
    ids, pad = pad_tokens([list(text_in)])
    pad |= ids == PAD
    return generation_logits_batch(params, feats, valid, ids, pad)[0]


def matching_logits_batch(params: AdapterParams, feats: np.ndarray, feat_valid: np.ndarray,
                          text_ids: np.ndarray, text_pad: np.ndarray) -> Tensor:
    """(B, 2) match/no-match logits: matching head averaged over the K query outputs."""
    q, _ = run(params, feats, feat_valid, text_ids, text_pad, "bidirectional")
    logits = T.add(T.matmul(q, params["itm_head.w"]), params["itm_head.b"])
    return T.mean(logits, axis=1)


def project(params: AdapterParams, query_states: Tensor) -> Tensor:
    """Affine bridge from adapter width to language-model width."""
    return T.add(T.matmul(query_states, params["llm_proj.w"]), params["llm_proj.b"])
