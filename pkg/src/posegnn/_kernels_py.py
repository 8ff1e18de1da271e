"""Numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``POSEGNN_PURE_PYTHON=1`` is set. Accumulation order matches the compiled
version: self term first, then neighbors in ascending index order.
"""
from __future__ import annotations

import numpy as np


def _rows(indptr: np.ndarray) -> np.ndarray:
    return np.repeat(np.arange(indptr.size - 1), np.diff(indptr))


def normalized_aggregate(indptr: np.ndarray, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
    deg = np.diff(indptr).astype(np.float64) + 1.0
    out = x * (1.0 / np.sqrt(deg * deg))[:, None]
    rows = _rows(indptr)
    w = 1.0 / np.sqrt(deg[rows] * deg[indices])
    np.add.at(out, rows, x[indices] * w[:, None])
    return out


def neighbor_sum(indptr: np.ndarray, indices: np.ndarray, x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    np.add.at(out, _rows(indptr), x[indices])
    return out


def knn_query(queries: np.ndarray, base: np.ndarray, k: int, exclude_self: bool) -> np.ndarray:
    m, n = queries.shape[0], base.shape[0]
    # accumulate squared differences column by column, the same order the
    # compiled kernel uses, so equal distances tie-break identically
    d2 = np.zeros((m, n))
    for c in range(base.shape[1]):
        t = base[None, :, c] - queries[:, None, c]
        d2 += t * t
    if exclude_self:
        d2[np.arange(m), np.arange(m)] = np.inf
    return np.argsort(d2, axis=1, kind="stable")[:, :k].astype(np.int64)
