"""Numeric substrate shared by every learned module.

Reverse-mode differentiation is delegated to torch; this module pins down the
contracts the rest of the code relies on: scalar-loss backprop with NaN
surfacing, a deterministic Adam update with explicit state, and a central
finite-difference gradient checker used as the independent oracle for every
analytic gradient in the pipeline.

Convention: training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch


class SubstrateError(RuntimeError):
    """Contract violation in the numeric substrate (non-finite values, bad shapes)."""


class GradientNaNError(SubstrateError):
    """A backward pass produced NaN; the message names the offending operation."""


def assert_finite(tensor: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    """Raise SubstrateError if `tensor` contains NaN or Inf, else return it."""
    if not torch.isfinite(tensor).all():
        raise SubstrateError(f"{what} contains NaN/Inf values")
    return tensor


def _collect_leaves(loss: torch.Tensor) -> list[torch.Tensor]:
    """All requires-grad leaf tensors participating in `loss`'s graph."""
    leaves: list[torch.Tensor] = []
    seen: set[int] = set()
    stack = [loss.grad_fn]
    while stack:
        node = stack.pop()
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        if hasattr(node, "variable"):  # AccumulateGrad wraps the leaf itself
            leaves.append(node.variable)
            continue
        stack.extend(fn for fn, _ in node.next_functions)
    return leaves


def forward_backward(loss: torch.Tensor) -> list[torch.Tensor]:
    """Backpropagate a scalar loss and return the participating leaf tensors.

    Every requires-grad leaf receives its gradient in `.grad` (accumulating,
    as usual); the loss's own gradient slot is populated with 1. A NaN in any
    gradient raises GradientNaNError whose message names the backward
    operation that produced it.
    """
    if loss.dim() != 0:
        raise SubstrateError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise SubstrateError("loss does not require grad; no parameter participates")
    assert_finite(loss, "loss")
    loss.retain_grad()
    loss.backward(retain_graph=True)
    leaves = _collect_leaves(loss)
    for leaf in leaves:
        if leaf.grad is not None and not torch.isfinite(leaf.grad).all():
            # Re-run under anomaly detection purely to recover the name of
            # the operation that emitted the NaN; the happy path pays nothing.
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    with torch.autograd.detect_anomaly():
                        loss.backward(retain_graph=True)
                except RuntimeError as exc:
                    raise GradientNaNError(str(exc)) from None
            raise GradientNaNError("NaN gradient detected (operation unidentified)")
    return leaves


@dataclass
class OptimizerState:
    """Adam accumulators. Shapes mirror the parameter list they were built for."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)


def adam_step(
    params: list[torch.Tensor],
    grads: list[torch.Tensor | None],
    state: OptimizerState,
) -> tuple[list[torch.Tensor], OptimizerState]:
    """One bias-corrected Adam update, in place on `params`.

    A None gradient is treated as zero (the parameter and its accumulators
    stay untouched by the gradient but still see moment decay — identical to
    a genuinely zero gradient). Deterministic given (params, grads, state).
    """
    if state.learning_rate <= 0:
        raise SubstrateError("learning_rate must be positive")
    if len(params) != len(grads):
        raise SubstrateError("params and grads length mismatch")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            if m.shape != p.shape:
                raise SubstrateError(
                    f"moment shape {tuple(m.shape)} does not match parameter {tuple(p.shape)}"
                )
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise SubstrateError(
                    f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}"
                )
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-state.learning_rate)
    return params, state


class Adam:
    """Convenience wrapper tying an OptimizerState to a fixed parameter list."""

    def __init__(self, params: list[torch.Tensor], lr: float):
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class GradCheckReport:
    max_rel_err: float
    mean_rel_err: float
    rel_err: torch.Tensor
    analytic: torch.Tensor
    numeric: torch.Tensor

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_err < tol


def grad_check(f, x: torch.Tensor, eps: float = 1e-5) -> GradCheckReport:
    """Central finite differences of scalar f at x versus the analytic gradient.

    Runs in float64 regardless of x's dtype. f is evaluated twice at the base
    point first; a bitwise mismatch means f is not deterministic and is a
    contract violation. Relative error per element uses a 1e-6 floor on the
    denominator so that near-zero gradients are compared absolutely.
    """
    if not (1e-7 <= eps <= 1e-2):
        raise SubstrateError(f"eps {eps} outside [1e-7, 1e-2]")
    x64 = x.detach().to(torch.float64).requires_grad_(True)
    y0 = f(x64)
    y1 = f(x64)
    if y0.dim() != 0:
        raise SubstrateError("f must return a scalar")
    if not torch.equal(y0.detach(), y1.detach()):
        raise SubstrateError("f is not deterministic: two base evaluations differ")
    (analytic,) = torch.autograd.grad(y0, x64)
    flat = x64.detach().clone().reshape(-1)
    numeric = torch.empty_like(flat)
    for i in range(flat.numel()):
        for sign, slot in ((+1.0, 0), (-1.0, 1)):
            probe = flat.clone()
            probe[i] += sign * eps
            val = f(probe.reshape(x64.shape)).detach()
            if slot == 0:
                plus = val
            else:
                numeric[i] = (plus - val) / (2.0 * eps)
    numeric = numeric.reshape(x64.shape)
    denom = torch.maximum(
        torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(numeric, 1e-6)
    )
    rel = (analytic - numeric).abs() / denom
    return GradCheckReport(
        max_rel_err=rel.max().item(),
        mean_rel_err=rel.mean().item(),
        rel_err=rel,
        analytic=analytic,
        numeric=numeric,
    )
