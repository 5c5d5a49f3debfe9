"""Dense, KV-cached and sparse attention plus the sparsity/correlation metrics.

Sparse Window Attention keeps ``k`` locally static tokens (the most recent
positions) and ``k`` globally dynamic tokens picked by the largest local
attention sum, i.e. the attention mass each past position received over the
last ``k`` decode steps, summed over heads. Local and strided masks are the
fixed-pattern baselines.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from swakv.mathops import (
    ContractViolation,
    as_matrix,
    matmul,
    softmax_rows,
    spearman,
    top_k_indices,
)

VARIANTS = ("dense", "swa", "local", "strided")


@dataclass(frozen=True)
class SparseSelection:
    local_indices: tuple[int, ...]
    global_indices: tuple[int, ...]
    k: int

    @property
    def indices(self) -> list[int]:
        return sorted(self.local_indices + self.global_indices)

    def __len__(self) -> int:
        return len(self.local_indices) + len(self.global_indices)


@dataclass(frozen=True)
class SparsityConfig:
    """Which attention variant to run and how many tokens it may keep.

    ``ratio`` is the caching ratio. ``stride`` only matters for the strided
    variant; when left unset it is derived from the ratio as ``round(1/ratio)``,
    but never below 2 for ``ratio < 1`` since stride 1 is plain dense attention.
    """

    variant: str = "swa"
    ratio: float = 1.0
    stride: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown attention variant {self.variant!r}")
        if not (0.0 < self.ratio <= 1.0):
            raise ContractViolation(f"caching ratio must lie in (0, 1], got {self.ratio}")
        if self.stride is not None and self.stride < 1:
            raise ContractViolation(f"stride must be >= 1, got {self.stride}")

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        if self.ratio >= 1.0:
            return 1
        return max(2, round(1.0 / self.ratio))

    def local_window_for(self, n: int) -> int:
        return max(1, min(n, round(n * self.ratio)))


def dense_attention(q, k, v, mask_causal: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Single-head scaled dot-product attention.

    With ``mask_causal`` the query rows are aligned to the last rows of ``k``,
    so a 1-row query attends to every key and a square query is lower
    triangular. Returns ``(attn, aw)``.
    """
    q, k, v = as_matrix(q), as_matrix(k), as_matrix(v)
    if not (q.shape[1] == k.shape[1] == v.shape[1]) or k.shape[0] != v.shape[0]:
        raise ContractViolation(f"attention shapes q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[0] > k.shape[0] and mask_causal:
        raise ContractViolation("causal attention with more queries than keys")
    logits = matmul(q, k.T) / math.sqrt(q.shape[1])
    if mask_causal:
        offset = k.shape[0] - q.shape[0]
        rows = np.arange(q.shape[0])[:, None] + offset
        logits = np.where(np.arange(k.shape[0])[None, :] > rows, -np.inf, logits)
    aw = softmax_rows(logits)
    return matmul(aw, v), aw


def sparse_k(n: int, ratio: float) -> int:
    return max(1, round(n * ratio / 2))


def swa_select(prev_aw_row, n: int, r: float) -> SparseSelection:
    """Pick locally static and globally dynamic positions for sequence length ``n``.

    ``prev_aw_row`` is the local attention sum over positions ``0..n-2``.
    Global candidates exclude the local window; when ``2k >= n`` (or the
    ratio is 1) every position is kept.
    """
    if not (0.0 < r <= 1.0):
        raise ContractViolation(f"caching ratio must lie in (0, 1], got {r}")
    if n < 2:
        return SparseSelection(tuple(range(n)), (), 1)
    scores = np.asarray(prev_aw_row, dtype=np.float64).ravel()
    if scores.size != n - 1:
        raise ContractViolation(f"local attention sum has length {scores.size}, expected {n - 1}")
    k = sparse_k(n, r)
    local = tuple(range(n - k, n))
    # r == 1 must keep everything even when half-even rounding gives 2k == n - 1
    if 2 * k >= n or r >= 1.0:
        return SparseSelection(local, tuple(range(n - k)), k)
    chosen = top_k_indices(scores[: n - k], k)
    return SparseSelection(local, tuple(chosen), k)


def local_attention_mask(n: int, window: int) -> list[int]:
    if window < 1:
        raise ContractViolation(f"window must be >= 1, got {window}")
    return list(range(max(0, n - window), n))


def strided_attention_mask(n: int, stride: int) -> list[int]:
    if stride < 1:
        raise ContractViolation(f"stride must be >= 1, got {stride}")
    return list(range((n - 1) % stride, n, stride)) if n > 0 else []


def select_positions(cfg: SparsityConfig, n: int, local_sum=None) -> SparseSelection:
    """Selection for any variant. The current token (``n-1``) is always local."""
    if n < 1:
        raise ContractViolation("selection over an empty sequence")
    if cfg.variant == "swa":
        if local_sum is None:
            local_sum = np.zeros(n - 1)
        return swa_select(local_sum, n, cfg.ratio)
    if cfg.variant == "dense":
        return SparseSelection((n - 1,), tuple(range(n - 1)), 1)
    if cfg.variant == "local":
        window = local_attention_mask(n, cfg.local_window_for(n))
        return SparseSelection(tuple(window), (), len(window))
    picks = strided_attention_mask(n, cfg.effective_stride)
    return SparseSelection((n - 1,), tuple(p for p in picks if p != n - 1), 1)


def selection_counts(cfg: SparsityConfig, n: int) -> tuple[int, int]:
    """``(selected, local)`` sizes the variant uses at sequence length ``n``.

    These depend only on ``n`` (never on attention values), which is what the
    scheduler's cost model relies on.
    """
    if cfg.variant == "swa":
        if n < 2:
            return n, n
        k = sparse_k(n, cfg.ratio)
        return (n if cfg.ratio >= 1.0 else min(2 * k, n)), k
    if cfg.variant == "dense":
        return n, 1
    if cfg.variant == "local":
        w = cfg.local_window_for(n)
        return w, w
    return (n - 1) // cfg.effective_stride + 1, 1


class LocalAttentionSum:
    """Trailing window of head-reduced attention rows.

    Only the most recent rows are retained, so memory stays bounded by the
    window rather than growing with the full attention history.
    """

    def __init__(self):
        self._rows: deque[np.ndarray] = deque()

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, row) -> None:
        self._rows.append(np.asarray(row, dtype=np.float64).ravel().copy())

    def window_sum(self, k: int, length: int) -> np.ndarray:
        out = np.zeros(length)
        for row in list(self._rows)[-k:] if k > 0 else []:
            m = min(length, row.size)
            out[:m] += row[:m]
        return out

    def trim(self, keep: int) -> None:
        while len(self._rows) > keep:
            self._rows.popleft()


@dataclass
class AttentionState:
    """Per-layer KV cache for all heads plus the SWA local-sum window.

    Keys and values live in preallocated ``(heads, capacity, head_dim)``
    buffers. ``present[p]`` is False for positions whose KV was deleted by the
    scheduler; gathering such a position is an error.
    """

    head_count: int
    head_dim: int
    capacity: int = 64
    length: int = 0
    keys: np.ndarray = field(init=False, repr=False)
    values: np.ndarray = field(init=False, repr=False)
    present: np.ndarray = field(init=False, repr=False)
    local_sum: LocalAttentionSum = field(default_factory=LocalAttentionSum, repr=False)
    prev_attention_row: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.keys = np.zeros((self.head_count, self.capacity, self.head_dim))
        self.values = np.zeros_like(self.keys)
        self.present = np.zeros(self.capacity, dtype=bool)

    def _grow(self, needed: int) -> None:
        if needed <= self.capacity:
            return
        cap = max(needed, 2 * self.capacity)
        for name in ("keys", "values"):
            buf = np.zeros((self.head_count, cap, self.head_dim))
            buf[:, : self.length] = getattr(self, name)[:, : self.length]
            setattr(self, name, buf)
        present = np.zeros(cap, dtype=bool)
        present[: self.length] = self.present[: self.length]
        self.present = present
        self.capacity = cap

    def append(self, k_rows, v_rows) -> int:
        """Append one or more tokens; rows are ``(heads, head_dim)`` or ``(heads, t, head_dim)``."""
        k_rows = np.asarray(k_rows, dtype=np.float64)
        v_rows = np.asarray(v_rows, dtype=np.float64)
        if k_rows.ndim == 2:
            k_rows, v_rows = k_rows[:, None, :], v_rows[:, None, :]
        if k_rows.shape != v_rows.shape or k_rows.shape[0] != self.head_count:
            raise ContractViolation(f"kv shapes {k_rows.shape} / {v_rows.shape}")
        t = k_rows.shape[1]
        self._grow(self.length + t)
        sl = slice(self.length, self.length + t)
        self.keys[:, sl] = k_rows
        self.values[:, sl] = v_rows
        self.present[sl] = True
        self.length += t
        return self.length

    def drop(self, positions) -> None:
        for p in positions:
            self.keys[:, p] = np.nan
            self.values[:, p] = np.nan
            self.present[p] = False

    def restore(self, position: int, k_row, v_row) -> None:
        self.keys[:, position] = k_row
        self.values[:, position] = v_row
        self.present[position] = True

    def gather(self, indices) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.max() >= self.length or idx.min() < 0):
            raise ContractViolation(f"gather index outside cache of length {self.length}")
        if not np.all(self.present[idx]):
            missing = [int(p) for p in idx if not self.present[p]]
            raise ContractViolation(f"gather of deleted KV positions {missing}")
        return self.keys[:, idx], self.values[:, idx]

    def record(self, aw_rows) -> None:
        """Store a new ``(heads, n)`` attention row, reduced over heads."""
        aw_rows = np.atleast_2d(aw_rows)
        row = aw_rows.sum(axis=0)
        self.prev_attention_row = row
        self.local_sum.push(row)

    def seed_from_prefill(self, aw_maps) -> None:
        """Seed the local-sum window from dense prefill maps ``(heads, s, s)``."""
        total = np.asarray(aw_maps).sum(axis=0)
        for i in range(total.shape[0]):
            self.local_sum.push(total[i, : i + 1])
        self.prev_attention_row = total[-1].copy()

    def local_sum_for(self, n: int, ratio: float) -> np.ndarray:
        k = sparse_k(n, ratio)
        return self.local_sum.window_sum(k, n - 1)


def select_for_step(state: AttentionState, cfg: SparsityConfig) -> SparseSelection:
    n = state.length
    if n < 1:
        raise ContractViolation("sparse attention over an empty cache")
    local_sum = state.local_sum_for(n, cfg.ratio) if cfg.variant == "swa" else None
    selection = select_positions(cfg, n, local_sum)
    if cfg.variant == "swa":
        state.local_sum.trim(2 * selection.k + 1)
    return selection


def attend(state: AttentionState, q_step, indices) -> tuple[np.ndarray, np.ndarray]:
    """Gather the selected KV rows and attend one query per head.

    Returns ``(attn, aw_full)`` where ``attn`` is ``(heads, head_dim)`` and
    ``aw_full`` is ``(heads, n)`` with exact zeros at unselected positions.
    """
    q_step = np.asarray(q_step, dtype=np.float64).reshape(state.head_count, state.head_dim)
    k_s, v_s = state.gather(indices)
    n = state.length
    attn = np.zeros((state.head_count, state.head_dim))
    aw_full = np.zeros((state.head_count, n))
    scale = math.sqrt(state.head_dim)
    idx = np.asarray(indices, dtype=np.int64)
    for h in range(state.head_count):
        logits = matmul(q_step[h][None, :], k_s[h].T) / scale
        aw = softmax_rows(logits)
        attn[h] = matmul(aw, v_s[h])[0]
        aw_full[h, idx] = aw[0]
    return attn, aw_full


def swa_attention(
    state: AttentionState, q_step, cfg: SparsityConfig
) -> tuple[np.ndarray, np.ndarray, SparseSelection]:
    """One decode step of configured attention over the cache (current token included)."""
    selection = select_for_step(state, cfg)
    attn, aw_full = attend(state, q_step, selection.indices)
    state.record(aw_full)
    return attn, aw_full, selection


def attention_sparsity(aw, rel_threshold: float = 0.01, causal: bool = False) -> float:
    """Fraction of unmasked entries below ``rel_threshold`` times their row maximum.

    With ``causal`` the rows are aligned to the last columns as in
    :func:`dense_attention` and entries above the diagonal are not counted.
    """
    aw = as_matrix(aw)
    if aw.size == 0:
        raise ContractViolation("sparsity of an empty attention map")
    rows, cols = aw.shape
    valid = np.ones_like(aw, dtype=bool)
    if causal:
        offset = cols - rows
        valid = np.arange(cols)[None, :] <= (np.arange(rows)[:, None] + offset)
    row_max = np.where(valid, aw, -np.inf).max(axis=1, keepdims=True)
    small = (aw < rel_threshold * row_max) | (row_max <= 0.0)
    counted = valid.sum()
    if counted == 0:
        return 0.0
    return float((small & valid).sum() / counted)


def score_distribution_correlation(dense_scores, sparse_scores) -> float:
    """Spearman correlation between attention-score magnitudes."""
    return spearman(np.abs(np.asarray(dense_scores)), np.abs(np.asarray(sparse_scores)))
