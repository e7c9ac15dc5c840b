import numpy as np
import pytest
import torch

from mvcount.substrate import (
    Adam,
    GradientNaNError,
    OptimizerState,
    SubstrateError,
    adam_step,
    assert_finite,
    forward_backward,
    grad_check,
)


def test_forward_backward_sum_gives_unit_gradients():
    x = torch.zeros(3, requires_grad=True)
    loss = x.sum()
    forward_backward(loss)
    assert torch.equal(x.grad, torch.ones(3))
    assert loss.grad.item() == 1.0  # d(loss)/d(loss)


def test_forward_backward_square():
    x = torch.tensor([2.0], requires_grad=True)
    forward_backward((x * x).sum())
    assert torch.allclose(x.grad, torch.tensor([4.0]))


def test_forward_backward_rejects_nonscalar():
    x = torch.ones(2, requires_grad=True)
    with pytest.raises(SubstrateError, match="scalar"):
        forward_backward(x * 2)


def test_forward_backward_names_nan_operation():
    x = torch.tensor([0.0], requires_grad=True)
    loss = torch.sqrt(x).sum()  # d sqrt/dx at 0 is inf -> nan downstream of 0*inf
    loss = loss * 0.0
    with pytest.raises(GradientNaNError, match="Backward"):
        forward_backward(loss)


def test_forward_backward_collects_all_leaves():
    a = torch.ones(2, requires_grad=True)
    b = torch.ones(3, requires_grad=True)
    leaves = forward_backward(a.sum() * b.sum())
    assert {id(t) for t in leaves} == {id(a), id(b)}


def test_assert_finite_raises():
    with pytest.raises(SubstrateError):
        assert_finite(torch.tensor([1.0, float("nan")]))


def test_adam_zero_gradient_leaves_params_unchanged():
    p = torch.tensor([1.5, -2.0])
    state = OptimizerState(learning_rate=0.1)
    adam_step([p], [torch.zeros(2)], state)
    assert torch.equal(p, torch.tensor([1.5, -2.0]))
    assert state.step_count == 1


def test_adam_first_step_magnitude_is_lr():
    # bias-corrected first step with grad 1 moves by ~lr
    p = torch.tensor([0.0])
    state = OptimizerState(learning_rate=1e-3)
    adam_step([p], [torch.ones(1)], state)
    assert p.item() == pytest.approx(-1e-3, rel=1e-6)


def test_adam_converges_on_quadratic():
    # independent oracle: run the optimization itself and require convergence
    w = torch.tensor([0.0])
    state = OptimizerState(learning_rate=0.1)
    for _ in range(100):
        grad = 2.0 * (w - 3.0)
        adam_step([w], [grad], state)
    assert abs(w.item() - 3.0) < 0.5
    assert state.step_count == 100


def test_adam_shape_mismatch_errors():
    p = torch.zeros(2)
    state = OptimizerState(learning_rate=0.1)
    with pytest.raises(SubstrateError, match="shape"):
        adam_step([p], [torch.zeros(3)], state)


def test_adam_deterministic():
    def run():
        torch.manual_seed(3)
        p = torch.randn(4)
        state = OptimizerState(learning_rate=0.01)
        for k in range(10):
            adam_step([p], [p * 0.5 + k], state)
        return p.clone()

    assert torch.equal(run(), run())


def test_adam_wrapper_uses_param_grads():
    p = torch.tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.5)
    (p * p).sum().backward()
    opt.step()
    assert p.item() < 1.0
    opt.zero_grad()
    assert p.grad is None


def test_grad_check_sum_is_exact():
    rep = grad_check(lambda t: t.sum(), torch.randn(5))
    assert rep.max_rel_err < 1e-8


def test_grad_check_detects_nondeterminism():
    calls = []

    def flaky(t):
        calls.append(1)
        return t.sum() * len(calls)

    with pytest.raises(SubstrateError, match="deterministic"):
        grad_check(flaky, torch.randn(3))


def test_grad_check_eps_bounds():
    with pytest.raises(SubstrateError):
        grad_check(lambda t: t.sum(), torch.randn(2), eps=1.0)


def test_grad_check_nonlinear():
    rep = grad_check(lambda t: (t**3).sum(), torch.tensor([0.5, -1.2, 2.0]))
    assert rep.max_rel_err < 1e-6
