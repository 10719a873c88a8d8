import numpy as np
import pytest

from xlcontrast import autograd as ag
from xlcontrast.gradcheck import (NonDeterministicError, finite_difference_check, joint_loss_check,
                                  numerical_gradient, relative_error)


def test_relative_error_values():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([3.0, 0.0]), np.array([0.0, 4.0])) == pytest.approx(5.0 / 4.0)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0
    assert relative_error(np.zeros(1), np.array([1e-9]), floor=1e-5) == pytest.approx(1e-4)


def test_square_gradient():
    x = ag.Tensor(np.array([1.5, -2.0, 0.25]), requires_grad=True)
    num = numerical_gradient(lambda: float(ag.sum(x * x).data), x, 1e-5)
    np.testing.assert_allclose(num, 2 * x.data, rtol=1e-8)
    rep = finite_difference_check(lambda: ag.sum(x * x), {"x": x})
    assert rep.passed and rep.max_relative_error < 1e-8


def test_detects_wrong_gradient():
    x = ag.Tensor(np.array([0.3, 0.7]), requires_grad=True)
    # detach hides the second factor from the tape, so the analytic gradient is half the truth
    rep = finite_difference_check(lambda: ag.sum(x * x.detach()), {"x": x})
    assert not rep.passed
    assert rep.failures() == {"x": pytest.approx(0.5)}


def test_nondeterministic_function_rejected():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    rng = np.random.default_rng(0)
    with pytest.raises(NonDeterministicError):
        finite_difference_check(lambda: ag.sum(x * float(rng.random())), {"x": x})


def test_constant_param_with_gradient_is_flagged():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    c = ag.Tensor(np.full(2, 2.0), requires_grad=True)
    rep = finite_difference_check(lambda: ag.sum(x * c), {"x": x}, constant_params={"c": c})
    assert rep.relative_errors["c"] == float("inf") and rep.zero_grad == []
    rep = finite_difference_check(lambda: ag.sum(x * c.detach()), {"x": x}, constant_params={"c": c})
    assert rep.passed and rep.zero_grad == ["c"]


def test_bad_step_rejected():
    x = ag.Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ValueError):
        finite_difference_check(lambda: ag.sum(x), {"x": x}, h=0.0)


def test_joint_loss_check_small():
    rep = joint_loss_check(seed=1, num_layers=1, hidden_size=8, vocab_size=16, queue_capacity=4, batch_size=1)
    assert rep.passed, rep.failures()
    assert rep.zero_grad and all(n.startswith("key/") for n in rep.zero_grad)
