import numpy as np
import pytest

from speechqformer import gradsuite
from speechqformer import tensor as T
from speechqformer.gradcheck import GradCheckError, grad_check, relative_error
from speechqformer.tensor import Tensor


@pytest.mark.parametrize("case", gradsuite.ALL_CASES, ids=lambda c: f"{c.scope}-{c.name}")
def test_suite_case_under_tolerance(case):
    assert gradsuite.run_case(case) < gradsuite.TOLERANCE


def test_scopes_partition_the_suite():
    names = [c.name for s in gradsuite.SCOPES for c in gradsuite.cases_for(s)]
    assert sorted(names) == sorted(c.name for c in gradsuite.ALL_CASES)
    with pytest.raises(ValueError):
        gradsuite.cases_for("everything")


def broken_square(x):
    """x*x with a deliberately wrong backward rule (2.02x instead of 2x)."""
    return T._make(x.data * x.data, (x,), lambda g: (g * 2.02 * x.data,), "broken_square")


BROKEN = gradsuite.Case("broken_square", "primitives", gradsuite._unary(broken_square))


def test_corrupted_rule_is_detected():
    assert gradsuite.run_case(BROKEN) > gradsuite.TOLERANCE


def test_requires_float64():
    x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(GradCheckError):
        grad_check(lambda x: T.tsum(x), [x])


def test_relative_error_zero_gradients():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3)


def test_exact_quadratic():
    x = Tensor(np.array([0.5, -2.0, 3.0]), requires_grad=True)
    assert grad_check(lambda x: T.tsum(T.mul(x, x)), [x]) < 1e-9
