"""Small numerical kernel: fixed-order matmul, dense layers, LeakyReLU, Adam.

Tensors are plain float64 numpy arrays. Every product goes through
:func:`matmul`, whose accumulation order is fixed (row-major, ascending inner
index), so results are bitwise reproducible and bitwise equal to a naive
triple loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

LEAKY_SLOPE = 0.3


class DimensionError(ValueError):
    pass


class FrozenParamError(RuntimeError):
    pass


class NumericError(ArithmeticError):
    pass


@numba.njit(cache=True)
def _matmul_kernel(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with out[i, j] accumulated over k in ascending order."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    return _matmul_kernel(
        np.ascontiguousarray(a, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
        out,
    )


def linear_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """y = x @ w.T + bias, with x of shape (batch, d_in) and w of shape (d_out, d_in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or bias.shape != (w.shape[0],):
        raise DimensionError(
            f"linear layer shapes disagree: x {x.shape}, w {w.shape}, bias {bias.shape}"
        )
    return matmul(x, w.T) + bias


def linear_backward(
    x: np.ndarray, w: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (grad_x, grad_w, grad_bias) for :func:`linear_forward`."""
    if upstream.ndim != 2 or upstream.shape != (x.shape[0], w.shape[0]) or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"linear backward shapes disagree: x {x.shape}, w {w.shape}, upstream {upstream.shape}"
        )
    grad_x = matmul(upstream, w)
    grad_w = matmul(upstream.T, x)
    grad_bias = upstream.sum(axis=0)
    return grad_x, grad_w, grad_bias


def act_forward(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, LEAKY_SLOPE * x)


def act_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # slope at exactly 0 is taken from the negative branch
    return np.where(x > 0.0, upstream, LEAKY_SLOPE * upstream)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    frozen: bool = False

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def copy(self) -> "Param":
        return Param(self.value.copy(), self.grad.copy(), self.frozen)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Param, lr: float, **kwargs) -> "AdamState":
        return cls(np.zeros_like(param.value), np.zeros_like(param.value), lr, **kwargs)


def adam_step(param: Param, state: AdamState) -> tuple[Param, AdamState]:
    """Apply one bias-corrected Adam update in place and zero the gradient."""
    if param.frozen:
        raise FrozenParamError("refusing to step a frozen parameter")
    if state.m.shape != param.value.shape:
        raise DimensionError(f"Adam state shape {state.m.shape} != param shape {param.value.shape}")
    g = param.grad
    state.step_count += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step_count)
    v_hat = state.v / (1.0 - state.beta2**state.step_count)
    param.value = param.value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()
    return param, state


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
