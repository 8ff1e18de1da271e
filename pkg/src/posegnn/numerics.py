"""Dense float64 arithmetic shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64. Random
streams come from numpy's PCG64 bit generator (``numpy.random.Generator``),
which is seedable and produces the same stream on every platform.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{what} contains non-finite values")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return check_finite(a @ b, "matmul")


def relu(m) -> np.ndarray:
    return np.maximum(as_matrix(m), 0.0)


def relu_backward(pre_activation: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(pre_activation > 0.0, upstream, 0.0)


def finite_diff_grad(f: Callable[[np.ndarray], float], at, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time.

    ``f`` receives a perturbed copy of ``at`` with the same shape.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    x = np.array(at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at entry {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
