"""Finite-difference checks over primitives, composed blocks and the training losses.

Each case builds a float64 scalar function and the leaves to perturb.  The
suite is what the ``gradcheck`` command runs; tests reuse the same cases.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import llm, objectives, qformer
from . import tensor as T
from .gradcheck import grad_check
from .prompts import builtin_template
from .qformer import AdapterParams, QFormerConfig
from .tensor import Tensor
from .textproc import EOS, Vocab

SCOPES = ("primitives", "blocks", "losses")
TOLERANCE = 1e-4


@dataclass(frozen=True)
class Case:
    name: str
    scope: str
    build: Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[Tensor]]]
    max_coords: int | None = None


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0, scale, shape), requires_grad=True)


def _weighted(out: Tensor, rng) -> Tensor:
    """Random linear functional so every output coordinate matters."""
    w = Tensor(rng.normal(size=out.shape))
    return T.tsum(T.mul(out, w))


def _unary(op):
    def build(rng):
        x = _leaf(rng, 3, 4)
        w = rng.normal(size=(3, 4))
        return (lambda x: T.tsum(T.mul(op(x), Tensor(w)))), [x]
    return build


def _binary(op, shape_b=(3, 4)):
    def build(rng):
        a, b = _leaf(rng, 3, 4), _leaf(rng, *shape_b)
        w = rng.normal(size=(3, 4))
        return (lambda a, b: T.tsum(T.mul(op(a, b), Tensor(w)))), [a, b]
    return build


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda a, b: T.tsum(T.mul(T.matmul(a, b), Tensor(w)))), [a, b]


def _bmm(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    return (lambda a, b: T.tsum(T.mul(T.matmul(a, b), Tensor(w)))), [a, b]


def _layer_norm(rng):
    x, g, b = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    w = rng.normal(size=(3, 5))
    return (lambda x, g, b: T.tsum(T.mul(T.layer_norm(x, g, b), Tensor(w)))), [x, g, b]


def _embedding(rng):
    table = _leaf(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    w = rng.normal(size=(2, 3, 3))
    return (lambda t: T.tsum(T.mul(T.embedding(t, ids), Tensor(w)))), [table]


def _cross_entropy(rng):
    x = _leaf(rng, 4, 6)
    targets = np.array([1, 0, 5, 3])
    return (lambda x: T.cross_entropy(x, targets, ignore_id=3)), [x]


def _masked_softmax(rng):
    x = _leaf(rng, 3, 4)
    mask = np.array([[False, True, False, False], [True, True, False, True], [False, False, False, False]])
    w = rng.normal(size=(3, 4))
    return (lambda x: T.tsum(T.mul(T.softmax(T.masked_fill(x, mask)), Tensor(w)))), [x]


def _getitem_concat(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 2, 4)
    w = rng.normal(size=(4, 4))
    return (lambda a, b: T.tsum(T.mul(T.concat([T.getitem(a, np.array([0, 2, 2])), T.getitem(b, slice(1, 2))]),
                                      Tensor(w)))), [a, b]


def _shape_ops(rng):
    a = _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(2, 3, 8))
    return (lambda a: T.tsum(T.mul(T.expand(T.reshape(T.transpose(a, (1, 0, 2)), (3, 8)), 2), Tensor(w)))), [a]


def _reductions(rng):
    a = _leaf(rng, 3, 4)
    return (lambda a: T.add(T.add(T.tsum(T.tmax(a, axis=1)), T.mean(T.tsum(a, axis=0))),
                            T.tsum(T.mean(a, axis=1, keepdims=True)))), [a]


PRIMITIVES = [
    Case("add", "primitives", _binary(T.add)),
    Case("add_row_bias", "primitives", _binary(T.add, (4,))),
    Case("sub", "primitives", _binary(T.sub)),
    Case("mul", "primitives", _binary(T.mul)),
    Case("scale", "primitives", _unary(lambda x: T.scale(x, -2.5))),
    Case("matmul_shared", "primitives", _matmul),
    Case("matmul_batched", "primitives", _bmm),
    Case("shape_ops", "primitives", _shape_ops),
    Case("getitem_concat", "primitives", _getitem_concat),
    Case("reductions", "primitives", _reductions),
    Case("embedding", "primitives", _embedding),
    Case("gelu", "primitives", _unary(T.gelu)),
    Case("softmax_masked", "primitives", _masked_softmax),
    Case("log_softmax", "primitives", _unary(T.log_softmax)),
    Case("layer_norm", "primitives", _layer_norm),
    Case("l2_normalize", "primitives", _unary(T.l2_normalize)),
    Case("cross_entropy", "primitives", _cross_entropy),
]


# -- blocks and losses ------------------------------------------------------------

SMALL = QFormerConfig(num_layers=2, num_queries=3, d_model=8, num_heads=2, d_ff=16, cross_attn_every=1,
                      vocab_size=12, max_text_len=6, d_enc=5, d_proj=4, d_lm=8, init_std=0.3)
SMALL_LM = llm.LMConfig(num_layers=1, d_model=8, num_heads=2, d_ff=16, vocab_size=12, max_len=24, init_std=0.3)


def _small_params(seed: int = 0) -> AdapterParams:
    return AdapterParams.init(SMALL, seed, dtype=np.float64)


def _feats(rng, b=2, t=4):
    x = rng.normal(size=(b, t, SMALL.d_enc))
    valid = np.ones((b, t), dtype=bool)
    valid[-1, t - 1:] = False
    return x, valid


def _params_case(fn, names=None):
    def build(rng):
        p = _small_params(int(rng.integers(1 << 30)))
        pts = [p[n] for n in (names or p.names())]
        rng_fixed = np.random.default_rng(int(rng.integers(1 << 30)))
        state = rng_fixed.bit_generator.state

        def call(*_):
            rng_fixed.bit_generator.state = state
            return fn(p, rng_fixed)
        return call, pts
    return build


def _queries(p, rng):
    x, valid = _feats(rng)
    return _weighted(qformer.encode_queries_batch(p, x, valid), rng)


def _text(p, rng):
    ids = np.array([[3, 7, 8, 9], [3, 10, 0, 0]])
    pad = ids == 0
    return _weighted(qformer.encode_text_batch(p, ids, pad), rng)


def _generation(p, rng):
    x, valid = _feats(rng)
    ids = np.array([[1, 7, 8], [1, 9, 0]])
    return _weighted(qformer.generation_logits_batch(p, x, valid, ids, ids == 0), rng)


def _matching(p, rng):
    x, valid = _feats(rng)
    ids = np.array([[3, 7, 8], [3, 9, 0]])
    return _weighted(qformer.matching_logits_batch(p, x, valid, ids, ids == 0), rng)


def _project(p, rng):
    q = Tensor(rng.normal(size=(SMALL.num_queries, SMALL.d_model)))
    return _weighted(qformer.project(p, q), rng)


def _batch(rng) -> objectives.PairBatch:
    x, valid = _feats(rng, b=3)
    return objectives.PairBatch(x, valid, [[7, 8, EOS], [9, EOS], [10, 11, 7, EOS]], tau=0.5)


def _stc(p, rng):
    return objectives.stc_loss(_batch(rng), p)


def _stm(p, rng):
    return objectives.stm_loss(_batch(rng), p, 3)


def _stg(p, rng):
    return objectives.stg_loss(_batch(rng), p)


def _combined(p, rng):
    return objectives.pretraining_losses(_batch(rng), p, 5, (1.0, 0.5, 2.0)).objective


_VOCAB = Vocab(["<Speech>", "</Speech>", "w0", "w1", "w2", "w3"])


def _finetune(p, rng):
    lm = llm.FrozenLM.init(SMALL_LM, 7, dtype=np.float64)
    lm.freeze()
    x, valid = _feats(rng)
    tpl = builtin_template(1)
    return llm.finetune_loss_batch(p, lm, x, valid, [tpl, tpl], ["w0", "w1"], [[8, 9, EOS], [10, EOS]], _VOCAB)


def _lm_embeddings(rng):
    lm = llm.FrozenLM.init(SMALL_LM, 3, dtype=np.float64)
    e = _leaf(rng, 2, 5, SMALL_LM.d_model)
    w = rng.normal(size=(2, 5, SMALL_LM.vocab_size))
    pad = np.array([[False] * 5, [False] * 3 + [True] * 2])
    return (lambda e: T.tsum(T.mul(lm.logits(lm.hidden(e, pad)), Tensor(w)))), [e]


def _attention(rng):
    p = _small_params(int(rng.integers(1 << 30)))
    x = _leaf(rng, 2, 3, SMALL.d_model)
    kv = _leaf(rng, 2, 4, SMALL.d_enc)
    blocked = np.zeros((2, 1, 3, 4), dtype=bool)
    blocked[1, :, :, 3] = True
    w = rng.normal(size=(2, 3, SMALL.d_model))
    names = ["layers.0.cross." + n for n in ("wq", "wk", "wv", "wo")]
    return (lambda x, kv, *_: T.tsum(T.mul(qformer.attention(x, kv, p, "layers.0.cross.", 2, blocked), Tensor(w)))), \
        [x, kv] + [p[n] for n in names]


BLOCKS = [
    Case("attention", "blocks", _attention),
    Case("qformer_queries", "blocks", _params_case(_queries), max_coords=12),
    Case("qformer_text", "blocks", _params_case(_text, ["text.tok_emb", "text.pos_emb", "layers.0.self.wq",
                                                        "layers.1.ffn.w1", "final_ln.g"]), max_coords=12),
    Case("qformer_generation", "blocks", _params_case(_generation), max_coords=12),
    Case("qformer_matching", "blocks", _params_case(_matching), max_coords=12),
    Case("projection", "blocks", _params_case(_project, ["llm_proj.w", "llm_proj.b"])),
    Case("lm_over_embeddings", "blocks", _lm_embeddings),
]

LOSSES = [
    Case("stc", "losses", _params_case(_stc), max_coords=10),
    Case("stm", "losses", _params_case(_stm), max_coords=10),
    Case("stg", "losses", _params_case(_stg), max_coords=10),
    Case("pretraining_total", "losses", _params_case(_combined), max_coords=10),
    Case("finetune_through_frozen_lm", "losses", _params_case(_finetune), max_coords=10),
]

ALL_CASES = PRIMITIVES + BLOCKS + LOSSES


def cases_for(scope: str) -> list[Case]:
    if scope == "all":
        return list(ALL_CASES)
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES + ('all',)}")
    return [c for c in ALL_CASES if c.scope == scope]


def run_case(case: Case, seed: int = 0) -> float:
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    f, pts = case.build(rng)
    return grad_check(f, pts, eps=1e-5, max_coords=case.max_coords, seed=seed)


def run_suite(scope: str = "all", seed: int = 0) -> list[tuple[str, str, float]]:
    return [(c.scope, c.name, run_case(c, seed)) for c in cases_for(scope)]
