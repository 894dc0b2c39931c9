import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from speechqformer import objectives as O
from speechqformer import tensor as T
from speechqformer.errors import ContractError
from speechqformer.qformer import AdapterParams, QFormerConfig
from speechqformer.tensor import Tensor
from speechqformer.textproc import BOS, EOS, PAD

SMALL = QFormerConfig(num_layers=2, num_queries=3, d_model=16, num_heads=2, d_ff=32, vocab_size=64,
                      d_enc=8, d_proj=8, d_lm=8)


def batch(rng, b=4, t=10, d=8, tau=0.07):
    return O.PairBatch(rng.normal(size=(b, t, d)), np.ones((b, t), dtype=bool),
                       [list(rng.integers(10, 64, size=int(rng.integers(2, 6)))) + [EOS] for _ in range(b)], tau)


def test_info_nce_two_pair_oracle():
    sim = Tensor(np.eye(2))
    assert O.info_nce(sim, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)


def test_stc_loss_is_info_nce_over_similarity_matrix(rng):
    p = AdapterParams.init(SMALL, 0, dtype=np.float64)
    b = batch(rng, tau=1.0)
    q, cls = O.encode_pair_batch(p, b)
    expect = O.info_nce(O.similarity_matrix(p, q, cls), 1.0).item()
    assert O.stc_loss(b, p).item() == pytest.approx(expect, abs=1e-12)


def test_similarity_takes_best_query(rng):
    p = AdapterParams.init(SMALL, 0, dtype=np.float64)
    q = Tensor(rng.normal(size=(2, 3, SMALL.d_model)))
    cls = Tensor(rng.normal(size=(2, SMALL.d_model)))
    s = O.similarity_matrix(p, q, cls).data
    for i in range(2):
        for j in range(2):
            assert s[i, j] == pytest.approx(O.pair_similarity(Tensor(q.data[i]), Tensor(cls.data[j]), p).item())


@given(st.integers(2, 6), st.integers(0, 1000))
def test_info_nce_symmetric_under_transpose(b, seed):
    sim = np.random.default_rng(seed).uniform(-1, 1, size=(b, b))
    a = O.info_nce(Tensor(sim), 0.07).item()
    assert a == pytest.approx(O.info_nce(Tensor(sim.T), 0.07).item(), rel=1e-12)
    assert a >= 0


def test_uninformed_matching_is_ln2(rng):
    p = AdapterParams.init(SMALL, 0, dtype=np.float64)
    p["itm_head.w"].data[:] = 0.0
    p["itm_head.b"].data[:] = 0.0
    assert O.stm_loss(batch(rng), p, 7).item() == pytest.approx(math.log(2), abs=1e-12)


def test_untrained_generation_near_uniform(rng):
    p = AdapterParams.init(QFormerConfig(), 42)
    b = O.PairBatch(rng.normal(size=(4, 20, 64)).astype(np.float32), np.ones((4, 20), dtype=bool),
                    [list(rng.integers(40, 64, size=6)) + [EOS] for _ in range(4)])
    assert abs(O.stg_loss(b, p).item() - math.log(64)) < 0.5


@given(st.integers(2, 12), st.integers(0, 10**6))
def test_negatives_never_pick_the_positive(b, seed):
    neg = O.sample_negatives(b, seed)
    assert np.all(neg != np.arange(b))
    np.testing.assert_array_equal(neg, O.sample_negatives(b, seed))


def test_hard_negatives_follow_similarity():
    sim = np.array([[0.0, 50.0, -50.0], [50.0, 0.0, -50.0], [-50.0, 50.0, 0.0]])
    neg = O.sample_negatives(3, 0, sim)
    np.testing.assert_array_equal(neg, [1, 0, 1])


def test_matching_needs_two_pairs():
    with pytest.raises(ContractError):
        O.sample_negatives(1, 0)


def test_matching_inputs_layout(rng):
    b = batch(rng, b=3)
    neg = np.array([2, 0, 1])
    feats, valid, text, text_pad, labels = O.matching_inputs(b, neg)
    assert feats.shape[0] == 6
    np.testing.assert_array_equal(labels, [1, 1, 1, 0, 0, 0])
    ids, _ = b.cls_text()
    np.testing.assert_array_equal(text[3:], ids[neg])


def test_generation_targets_shift():
    ids, pad, targets = O.generation_targets([[7, 8, EOS], [9, EOS]])
    np.testing.assert_array_equal(ids, [[BOS, 7, 8], [BOS, 9, PAD]])
    np.testing.assert_array_equal(targets, [[7, 8, EOS], [9, EOS, PAD]])
    np.testing.assert_array_equal(pad, [[False, False, False], [False, False, True]])
    with pytest.raises(ContractError):
        O.generation_targets([[7, 8]])


def test_combine_weights_and_objective(rng):
    p = AdapterParams.init(SMALL, 0, dtype=np.float64)
    b = batch(rng)
    bundle = O.pretraining_losses(b, p, 3, (1.0, 0.5, 2.0))
    assert bundle.total == pytest.approx(bundle.stc + 0.5 * bundle.stm + 2.0 * bundle.stg)
    assert bundle.objective.item() == pytest.approx(bundle.total)
    with pytest.raises(ContractError):
        O.combine((1.0, 1.0, 1.0), (1.0, -1.0, 1.0))


def test_stc_single_pair_is_zero(rng):
    p = AdapterParams.init(SMALL, 0)
    b = batch(rng, b=1)
    b = O.PairBatch(b.feats.astype(np.float32), b.feat_valid, b.transcripts)
    assert O.stc_loss(b, p).item() == 0.0


def test_nonpositive_temperature_rejected(rng):
    with pytest.raises(ContractError):
        O.info_nce(Tensor(np.eye(2)), 0.0)
