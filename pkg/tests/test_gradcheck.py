import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from msvm import tensor as T
from msvm.errors import DomainError, GradCheckError
from msvm.gradcheck import grad_check
from msvm.tensor import Tensor
from msvm.verify import DIFF_OPS


@pytest.mark.parametrize("name", sorted(DIFF_OPS))
@given(seed=st.integers(0, 2**31))
def test_every_diff_op_matches_fd(name, seed):
    fn, sampler = DIFF_OPS[name]
    rep = grad_check(fn, sampler(np.random.default_rng(seed)), step=1e-5, name=name, seed=seed)
    assert rep.passed(1e-4), (name, rep.max_rel_err)


def test_tape_gradient_matches_independent_fd(rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))
    weights = rng.standard_normal((3, 2))

    def f(xv):
        return float((O.layer_norm(xv @ w.T, np.ones(2), np.zeros(2)) * weights).sum())

    t = Tensor(x, requires_grad=True)
    out = T.layer_norm(T.dense_affine(t, Tensor(w)), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    out.backward(weights)
    np.testing.assert_allclose(t.grad, O.central_difference(f, x), rtol=1e-6, atol=1e-8)


def test_broken_vjp_is_caught():
    def bad_square(x):
        return T._result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")

    rep = grad_check(bad_square, [np.array([1.0, 2.0])])
    assert not rep.passed(1e-4)
    assert rep.max_rel_err == pytest.approx(0.5, rel=1e-6)


def test_plain_sum_hides_layer_norm_errors():
    # output sum of layer_norm is constant in x, so the "ones" cotangent sees zero gradient
    x = np.array([[0.3, -1.2, 2.0]])
    g, b = np.ones(3), np.zeros(3)
    rep = grad_check(T.layer_norm, [x, g, b], wrt=[0], cotangent="ones")
    assert rep.passed(1e-4)


@pytest.mark.parametrize("step", [1e-7, 1e-2])
def test_step_outside_range(step):
    with pytest.raises(DomainError):
        grad_check(T.exp, [np.ones(2)], step=step)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_names_op():
    with pytest.raises(GradCheckError, match="explode"):
        grad_check(lambda x: T.exp(T.mul(x, Tensor(np.array([1e6])))), [np.ones(1)], name="explode")


def test_report_per_input():
    rep = grad_check(T.mul, [np.ones(2), np.full(2, 3.0)])
    assert len(rep.per_input) == 2
