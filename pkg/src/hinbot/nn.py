"""Small differentiable numeric core.

Everything downstream works on plain numpy arrays; trainable state lives in
:class:`Param`, which carries its own gradient buffer and AdamW moments.
Backward passes are written by hand per layer, so the only contract here is
that every ``*_backward`` helper returns exact analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

LEAKY_SLOPE = 0.01


class NonFiniteError(ValueError):
    """Raised when NaN or Inf shows up at an API boundary."""


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; same seed gives the same stream everywhere."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(x: np.ndarray, what: str = "input") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


@dataclass(eq=False)
class Param:
    """A trainable tensor with gradient and optimizer moments."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    moment1: np.ndarray = field(init=False)
    moment2: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.moment1 = self.moment1.astype(dtype)
        self.moment2 = self.moment2.astype(dtype)


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int, dtype=np.float64) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_out, fan_in)).astype(dtype)


# -- activations -------------------------------------------------------------

def leaky_relu(x: np.ndarray) -> np.ndarray:
    check_finite(x)
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def leaky_relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, grad_out, LEAKY_SLOPE * grad_out)


def sigmoid(x: np.ndarray) -> np.ndarray:
    check_finite(x)
    return expit(x)


def tanh(x: np.ndarray) -> np.ndarray:
    check_finite(x)
    return np.tanh(x)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with max-subtraction."""
    check_finite(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_out: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (grad_out - np.sum(p * grad_out, axis=axis, keepdims=True))


# -- affine maps -------------------------------------------------------------

def linear(W: Param, b: Param, x: np.ndarray) -> np.ndarray:
    """Row-wise affine map: ``x`` is (n, in), returns ``x @ W.T + b``.

    Each row is one node, so this is ``W x_i + b`` applied per node.
    """
    if x.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(
            f"linear: shape mismatch W{W.shape} b{b.shape} x{x.shape}"
        )
    return x @ W.value.T + b.value


def linear_backward(W: Param, b: Param, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate into ``W.grad``/``b.grad`` and return the input gradient."""
    W.grad += grad_out.T @ x
    b.grad += grad_out.sum(axis=0)
    return grad_out @ W.value


# -- optimizer ---------------------------------------------------------------

def adamw_step(
    params: Iterable[Param],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One AdamW update. Grads are read, never cleared."""
    beta1, beta2 = betas
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
    if lr == 0.0:
        for p in params:
            p.step_count += 1
        return
    for p in params:
        p.step_count += 1
        t = p.step_count
        if weight_decay:
            p.value *= 1.0 - lr * weight_decay
        p.moment1 *= beta1
        p.moment1 += (1.0 - beta1) * p.grad
        p.moment2 *= beta2
        p.moment2 += (1.0 - beta2) * p.grad * p.grad
        m_hat = p.moment1 / (1.0 - beta1**t)
        v_hat = p.moment2 / (1.0 - beta2**t)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# -- gradient oracle ---------------------------------------------------------

def finite_diff_check(
    loss_fn: Callable[[], float],
    params: Sequence[Param],
    h: float = 1e-6,
) -> float:
    """Max relative error between ``p.grad`` and central differences.

    ``loss_fn`` is re-evaluated with each coordinate nudged in place; the
    analytic gradients must already sit in ``p.grad``. The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if not h > 0:
        raise ValueError("finite difference step h must be positive")
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        analytic = p.grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = loss_fn()
            flat[k] = orig - h
            f_minus = loss_fn()
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic[k]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
