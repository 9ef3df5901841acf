"""Finite-difference gradient verification harness.

Runs in 64-bit only: float32 central differences are too noisy to certify
the adjoints at the tolerances used by the verification suite.
"""

from __future__ import annotations

import numpy as np

from .tensor import GradTape, NonFiniteError, Tensor, TensorError, backward, zero_grads


def grad_check(f, params, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f: nullary callable returning a scalar Tensor computed from `params`.
    params: Tensor or list of Tensors with requires_grad=True that f reads.
    Returns max over all coordinates of
        |analytic - central| / max(1, |central|).
    """
    if isinstance(params, Tensor):
        params = [params]
    for p in params:
        if p.dtype != np.float64:
            raise TensorError(f"grad_check requires float64 parameters, got {p.dtype.name}")
        if not p.requires_grad:
            raise TensorError("grad_check parameters must have requires_grad=True")

    zero_grads(params)
    with GradTape() as tape:
        loss = f()
    if loss.data.size != 1:
        raise TensorError(f"grad_check requires a scalar-valued f, got shape {loss.shape}")
    backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)

    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            f_plus = _eval_scalar(f, p, pi, i)
            flat[i] = original - epsilon
            f_minus = _eval_scalar(f, p, pi, i)
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = analytic[pi].reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _eval_scalar(f, p: Tensor, param_index: int, coord: int) -> float:
    try:
        value = f().item()
    except NonFiniteError as e:
        raise NonFiniteError(
            f"grad_check: non-finite intermediate while perturbing parameter "
            f"{p.name or param_index} coordinate {coord}: {e}"
        ) from e
    if not np.isfinite(value):
        raise NonFiniteError(
            f"grad_check: non-finite value while perturbing parameter "
            f"{p.name or param_index} coordinate {coord}"
        )
    return value
