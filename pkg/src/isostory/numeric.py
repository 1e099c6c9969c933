"""Dense float32 matrix kernels with a fixed reduction order.

Every reduction (matrix product cells, softmax row sums) accumulates strictly
left to right in float64 and rounds once to float32, so repeated calls on
identical inputs are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

NEG_INF = np.float32(-np.inf)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskedRowError(ValueError):
    """A score row has no finite entry, so softmax is undefined."""


def as_matrix(x, *, allow_neg_inf: bool = False) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float32 array.

    Only additive masks may hold ``-inf``; everything else must be finite.
    """
    m = np.ascontiguousarray(x, dtype=np.float32)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeError(f"expected a non-empty 2-D matrix, got shape {m.shape}")
    if allow_neg_inf:
        bad = np.isnan(m) | (m == np.inf)
    else:
        bad = ~np.isfinite(m)
    if bad.any():
        raise ValueError("matrix holds non-finite values")
    return m


@numba.njit(cache=True)
def _matmul_kernel(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = np.empty((n, p), np.float32)
    acc = np.empty(p, np.float64)
    for i in range(n):
        acc[:] = 0.0
        for k in range(m):
            aik = np.float64(a[i, k])
            for j in range(p):
                acc[j] += aik * np.float64(b[k, j])
        for j in range(p):
            out[i, j] = np.float32(acc[j])
    return out


@numba.njit(cache=True)
def _softmax_kernel(s):
    n, m = s.shape
    out = np.empty((n, m), np.float32)
    e = np.empty(m, np.float64)
    bad = -1
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            if s[i, j] > mx:
                mx = s[i, j]
        if mx == -np.inf:
            bad = i
            break
        total = 0.0
        for j in range(m):
            if s[i, j] == -np.inf:
                e[j] = 0.0
            else:
                e[j] = math.exp(np.float64(s[i, j]) - np.float64(mx))
            total += e[j]
        for j in range(m):
            out[i, j] = np.float32(e[j] / total)
    return out, bad


@numba.njit(cache=True)
def _row_sums_kernel(x):
    n, m = x.shape
    out = np.zeros(n, np.float64)
    for i in range(n):
        total = 0.0
        for j in range(m):
            total += np.float64(x[i, j])
        out[i] = total
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _matmul_kernel(a, b)


def row_sums(x: np.ndarray) -> np.ndarray:
    """Left-to-right float64 row sums."""
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise ShapeError(f"expected 2-D input, got shape {x.shape}")
    return _row_sums_kernel(x.astype(np.float64, copy=False))


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    s = as_matrix(scores, allow_neg_inf=True)
    out, bad = _softmax_kernel(s)
    if bad >= 0:
        raise MaskedRowError(f"row {bad} is entirely -inf")
    return out


@dataclass(frozen=True)
class AttentionTensors:
    """Every intermediate of one attention evaluation.

    ``raw_weights`` is only set when weights were modified after the softmax
    (reference re-weighting); ``weights`` is then the modified matrix that
    produced ``output``.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    output: np.ndarray
    raw_weights: np.ndarray | None = None


def attention_scores(q: np.ndarray, k: np.ndarray, additive_mask=None) -> np.ndarray:
    q = as_matrix(q)
    k = as_matrix(k)
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"query width {q.shape[1]} != key width {k.shape[1]}")
    scores = matmul(q, np.ascontiguousarray(k.T)) / np.float32(math.sqrt(q.shape[1]))
    if additive_mask is not None:
        mask = as_matrix(additive_mask, allow_neg_inf=True)
        if mask.shape != scores.shape:
            raise ShapeError(f"mask shape {mask.shape} != score shape {scores.shape}")
        scores = scores + mask
    return scores


def scaled_dot_attention(q, k, v, additive_mask=None) -> AttentionTensors:
    q = as_matrix(q)
    k = as_matrix(k)
    v = as_matrix(v)
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"{k.shape[0]} keys but {v.shape[0]} values")
    scores = attention_scores(q, k, additive_mask)
    weights = softmax_rows(scores)
    return AttentionTensors(q, k, v, scores, weights, matmul(weights, v))
