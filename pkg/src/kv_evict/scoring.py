"""Base retention policies: H2O, TOVA, SnapKV-style window pooling and Sink.

A higher score means "keep". Policy state is aligned with the cache rows of
one head and is pruned through :meth:`PolicyState.keep` whenever the cache
evicts.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .attention import AttentionRow


class Policy(str, Enum):
    H2O = "h2o"
    TOVA = "tova"
    SNAPKV = "snapkv"
    SINK = "sink"


@dataclass
class ScoreVector:
    scores: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)

    def __len__(self) -> int:
        return self.scores.shape[0]


@dataclass
class PolicyState:
    kind: Policy
    sink_count: int = 4
    window: int = 8
    pool_kernel: int = 3
    accumulated: np.ndarray = field(default_factory=lambda: np.zeros(0))
    last_row: np.ndarray | None = None
    rows: deque = field(default_factory=deque)
    length: int = 0

    def __post_init__(self):
        self.kind = Policy(self.kind)
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be a positive odd integer")
        if self.sink_count < 0:
            raise ValueError("sink_count must be >= 0")
        self.rows = deque(self.rows, maxlen=self.window)

    def _extend(self, n: int) -> None:
        pad = n - self.length
        if pad < 0:
            raise ValueError(
                f"row length mismatch: rows cover {n} tokens, state tracks {self.length}"
            )
        if pad:
            self.accumulated = np.concatenate([self.accumulated, np.zeros(pad)])
            if self.last_row is not None:
                self.last_row = np.concatenate([self.last_row, np.zeros(pad)])
            for i, r in enumerate(self.rows):
                self.rows[i] = np.concatenate([r, np.zeros(pad)])
        self.length = n

    def keep(self, indices) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        self.accumulated = self.accumulated[idx]
        if self.last_row is not None:
            self.last_row = self.last_row[idx]
        for i, r in enumerate(self.rows):
            self.rows[i] = r[idx]
        self.length = idx.shape[0]


def _row_array(rows) -> np.ndarray:
    if isinstance(rows, np.ndarray):
        arr = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        return arr
    arrs = [r.weights if isinstance(r, AttentionRow) else np.asarray(r) for r in rows]
    lengths = {a.shape[0] for a in arrs}
    if len(lengths) > 1:
        raise ValueError(f"row length mismatch: got lengths {sorted(lengths)}")
    return np.stack(arrs).astype(np.float64)


def accumulate_rows(state: PolicyState, rows) -> PolicyState:
    """Fold new attention rows into ``state``.

    Every row covers the current cache (older tokens first). Tokens that were
    not yet tracked get zero-initialised slots before the rows are added.
    """
    arr = _row_array(rows)
    if arr.shape[0] == 0:
        return state
    state._extend(arr.shape[1])
    if state.kind is Policy.H2O:
        state.accumulated = state.accumulated + arr.sum(axis=0)
    elif state.kind is Policy.TOVA:
        state.last_row = arr[-1].copy()
    elif state.kind is Policy.SNAPKV:
        for r in arr:
            state.rows.append(r.copy())
    return state


def _check_kind(state: PolicyState, kind: Policy) -> None:
    if state.kind is not kind:
        raise ValueError(f"policy kind mismatch: expected {kind.value}, got {state.kind.value}")


def score_h2o(state: PolicyState) -> ScoreVector:
    _check_kind(state, Policy.H2O)
    return ScoreVector(state.accumulated.copy(), normalized=False)


def score_tova(state: PolicyState) -> ScoreVector:
    if state.last_row is None:
        raise ValueError("no attention rows observed yet")
    return ScoreVector(state.last_row.copy(), normalized=True)


def max_pool_1d(x: np.ndarray, kernel: int) -> np.ndarray:
    """Same-length centred max-pool; the window is clipped at both edges."""
    half = kernel // 2
    n = x.shape[0]
    out = np.empty_like(x)
    for i in range(n):
        out[i] = x[max(0, i - half) : min(n, i + half + 1)].max()
    return out


def score_snapkv(state: PolicyState) -> ScoreVector:
    _check_kind(state, Policy.SNAPKV)
    if not state.rows:
        raise ValueError("no attention rows observed yet")
    summed = np.sum(np.stack(list(state.rows)), axis=0)
    if state.pool_kernel > 1:
        summed = max_pool_1d(summed, state.pool_kernel)
    return ScoreVector(summed, normalized=False)


def score_sink(positions, sink_count: int, recent_window: int) -> ScoreVector:
    pos = np.asarray(positions, dtype=np.int64)
    if sink_count < 0 or recent_window < 0:
        raise ValueError("sink_count and recent_window must be >= 0")
    keep = pos < sink_count
    if recent_window:
        order = np.argsort(pos, kind="stable")
        keep[order[-recent_window:]] = True
    return ScoreVector(keep.astype(np.float64), normalized=False)


def base_scores(state: PolicyState, positions=None, budget: int | None = None) -> ScoreVector:
    """Dispatch to the scorer matching ``state.kind``."""
    if state.kind is Policy.H2O:
        return score_h2o(state)
    if state.kind is Policy.TOVA:
        return score_tova(state)
    if state.kind is Policy.SNAPKV:
        return score_snapkv(state)
    if positions is None or budget is None:
        raise ValueError("sink scoring needs positions and a budget")
    return score_sink(positions, state.sink_count, max(budget - state.sink_count, 0))


def normalize_scores(h: ScoreVector | np.ndarray) -> ScoreVector:
    scores = h.scores if isinstance(h, ScoreVector) else np.asarray(h, dtype=np.float64)
    if np.any(scores < 0):
        raise ValueError("scores must be non-negative")
    total = scores.sum()
    if not total > 0:
        raise ValueError("scores sum to zero; cannot normalize")
    return ScoreVector(scores / total, normalized=True)


def top_b_retain(scores: ScoreVector | np.ndarray, b: int) -> np.ndarray:
    """Indices of the ``b`` highest scores, ties going to the later index.

    Cache rows are kept in original-position order, so the later index is the
    more recent token. The result is sorted ascending.
    """
    s = scores.scores if isinstance(scores, ScoreVector) else np.asarray(scores, dtype=np.float64)
    if b < 1:
        raise ValueError("budget b must be >= 1")
    n = s.shape[0]
    if n <= b:
        return np.arange(n)
    idx = np.arange(n)
    order = np.lexsort((-idx, -s))
    return np.sort(order[:b])
