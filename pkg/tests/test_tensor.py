import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from speechqformer import tensor as T
from speechqformer.gradcheck import grad_check
from speechqformer.tensor import Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_add_suffix_broadcast_reduces_gradient():
    a = leaf(np.ones((2, 3, 4)))
    b = leaf(np.arange(4.0))
    out = T.tsum(T.add(a, b))
    out.backward()
    assert out.item() == pytest.approx(24 + 2 * 3 * 6)
    np.testing.assert_array_equal(b.grad, np.full(4, 6.0))
    np.testing.assert_array_equal(a.grad, np.ones((2, 3, 4)))


def test_non_suffix_broadcast_rejected():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_matmul_shared_right_operand():
    a = leaf(np.arange(24.0).reshape(2, 3, 4))
    b = leaf(np.eye(4)[:, :2])
    out = T.matmul(a, b)
    np.testing.assert_array_equal(out.data, a.data[..., :2])
    T.tsum(out).backward()
    np.testing.assert_array_equal(b.grad, a.data.reshape(-1, 4).sum(0)[:, None].repeat(2, 1))


def test_gradients_accumulate_until_zeroed():
    x = leaf([1.0, 2.0])
    for _ in range(2):
        T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert T.is_grad_enabled()


def test_reused_node_gradient_sums_paths():
    x = leaf([3.0])
    y = T.mul(x, x)
    z = T.add(y, y)
    T.tsum(z).backward()
    np.testing.assert_allclose(x.grad, [12.0])


def test_gelu_reference_values():
    x = Tensor(np.array([-3.0, -1.0, 0.0, 1.0, 3.0]))
    c = math.sqrt(2 / math.pi)
    ref = [0.5 * v * (1 + math.tanh(c * (v + 0.044715 * v ** 3))) for v in x.data]
    np.testing.assert_allclose(T.gelu(x).data, ref, rtol=1e-12)
    assert T.gelu(Tensor(np.array([1.0]))).data[0] == pytest.approx(0.841192, abs=1e-6)


def test_masked_softmax_gives_zero_weight():
    x = Tensor(np.array([[1.0, 5.0, 2.0]]))
    p = T.softmax(T.masked_fill(x, np.array([[False, True, False]]))).data
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())


def test_cross_entropy_ignores_padding():
    logits = Tensor(np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]])))
    assert T.cross_entropy(logits, np.array([0, 0]), ignore_id=0).item() == 0.0
    loss = T.cross_entropy(logits, np.array([1, 2]), ignore_id=0)
    assert loss.item() == pytest.approx(-(math.log(0.25) + math.log(0.8)) / 2)


def test_layer_norm_statistics():
    x = Tensor(np.random.default_rng(0).normal(3, 5, size=(4, 16)))
    y = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


def test_sinusoidal_positions_prefix_stable():
    a = T.sinusoidal_positions(10, 8)
    b = T.sinusoidal_positions(32, 8)
    np.testing.assert_array_equal(a, b[:10])
    np.testing.assert_array_equal(a[0, 0::2], 0.0)
    np.testing.assert_array_equal(a[0, 1::2], 1.0)


def test_embedding_scatter_adds_repeated_ids():
    table = leaf(np.zeros((5, 2)))
    out = T.embedding(table, np.array([1, 1, 3]))
    T.tsum(out).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])


@given(arrays(np.float64, (3, 5), elements=finite))
def test_softmax_rows_sum_to_one_and_shift_invariant(a):
    p = T.softmax(Tensor(a)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=1e-12)
    np.testing.assert_allclose(T.softmax(Tensor(a + 7.5)).data, p, rtol=1e-9, atol=1e-15)


@given(arrays(np.float64, (2, 4), elements=finite))
def test_log_softmax_matches_log_of_softmax(a):
    np.testing.assert_allclose(np.exp(T.log_softmax(Tensor(a)).data), T.softmax(Tensor(a)).data,
                               rtol=1e-9, atol=1e-15)


@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(lambda a: np.all(np.abs(a).sum(-1) > 1e-3)))
def test_l2_normalize_unit_rows(a):
    np.testing.assert_allclose(np.linalg.norm(T.l2_normalize(Tensor(a)).data, axis=-1), 1.0, rtol=1e-9)


@given(st.integers(0, 2**16))
def test_random_composite_gradient(seed):
    rng = np.random.default_rng(seed)
    x, w = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(3, 4)))
    f = lambda x, w: T.tsum(T.mul(T.gelu(T.matmul(x, w)), T.softmax(T.matmul(x, w))))
    assert grad_check(f, [x, w]) < 1e-6
