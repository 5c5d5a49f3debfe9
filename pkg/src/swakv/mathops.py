"""Dense float64 math kernels shared by every other module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64 and vectors
are 1-D arrays. The kernels here avoid BLAS on purpose: ``matmul`` accumulates
in a fixed sequential order so results are bit-reproducible across machines
and match a naive triple loop exactly.
"""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


class UndefinedCorrelation(ValueError):
    """Raised when a rank correlation has zero variance on one side."""


def as_matrix(values) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    # one rank-1 update per inner index keeps the summation order fixed
    for p in range(a.shape[1]):
        out += np.multiply.outer(a[:, p], b[p])
    return out


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max subtraction.

    Entries equal to ``-inf`` act as masks and come out as exact zeros. A row
    must contain at least one finite entry.
    """
    m = as_matrix(m)
    if m.size == 0:
        raise ContractViolation("softmax of an empty matrix")
    row_max = m.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise ContractViolation("softmax row has no finite entry")
    e = np.exp(m - row_max)
    return e / e.sum(axis=1, keepdims=True)


def top_k_indices(v, k: int) -> list[int]:
    """Indices of the ``k`` largest entries, ties to the lower index, sorted ascending."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if k < 0 or k > v.size:
        raise ContractViolation(f"top_k with k={k} on a vector of length {v.size}")
    order = np.argsort(-v, kind="stable")
    return sorted(int(i) for i in order[:k])


def spearman(a, b) -> float:
    """Spearman rank correlation using average ranks for ties."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ContractViolation(
            f"spearman needs two equal-length vectors of length >= 2, got {a.size} and {b.size}"
        )
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    denom = np.sqrt(np.dot(ra, ra) * np.dot(rb, rb))
    if denom == 0.0:
        raise UndefinedCorrelation("spearman correlation undefined for constant input")
    return float(np.clip(np.dot(ra, rb) / denom, -1.0, 1.0))
