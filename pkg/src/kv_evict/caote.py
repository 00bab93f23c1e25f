"""Attention-output-error eviction scores (CAOTE) and the brute-force oracle.

For attention weights ``alpha`` over ``n`` cached tokens and their value rows
``V``, evicting token ``j`` moves the attention output by

    c_j = alpha_j / (1 - alpha_j) * ||V^T alpha - v_j||_2

which is used as a retention score: the token with the smallest ``c_j`` is
the cheapest to evict. ``eviction_error_oracle`` recomputes the same
quantity the long way (drop, renormalise, re-sum) and shares nothing with
the closed form apart from the numeric primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .attention import KvCache, ToyModel, block_prefill, generate_step
from .numerics import as_matrix, as_vector, l2_norm, matmul
from .scoring import ScoreVector, normalize_scores

SIMPLEX_TOL = 1e-9
SOLE_MASS_TOL = 1e-12


class CaoteMode(str, Enum):
    OFF = "off"
    FULL = "full"
    FAST = "fast"


@dataclass
class CaoteScores:
    c: np.ndarray
    mode: CaoteMode


def _validated(alpha, values) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(alpha, ScoreVector):
        alpha = alpha.scores
    a = as_vector(alpha)
    v = as_matrix(values)
    if a.shape[0] < 2:
        raise ValueError("need at least 2 cached tokens to score an eviction")
    if v.shape[0] != a.shape[0]:
        raise ValueError(f"values have {v.shape[0]} rows, alpha has {a.shape[0]} entries")
    if np.any(a < 0) or abs(a.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("alpha must be normalized (non-negative, summing to 1)")
    return a, v


def _closed_form(a: np.ndarray, v: np.ndarray, center: np.ndarray) -> np.ndarray:
    dist = np.sqrt(np.sum(np.square(v - center[None, :]), axis=1))
    sole = a >= 1.0 - SOLE_MASS_TOL
    denom = np.where(sole, 1.0, 1.0 - a)
    c = a / denom * dist
    c[sole] = np.inf
    return c


def caote_scores(alpha, values) -> CaoteScores:
    """Exact eviction error of every candidate in one vectorised pass.

    A token holding all the mass (alpha_j ~ 1) scores +inf and is never
    evicted.
    """
    a, v = _validated(alpha, values)
    x_attn = a @ v
    return CaoteScores(_closed_form(a, v, x_attn), CaoteMode.FULL)


def fast_caote_scores(alpha, values) -> CaoteScores:
    """Like :func:`caote_scores` but centred on the plain mean of the values."""
    a, v = _validated(alpha, values)
    return CaoteScores(_closed_form(a, v, v.mean(axis=0)), CaoteMode.FAST)


def caote_scores_general(base: ScoreVector | np.ndarray, values, fast: bool = False) -> CaoteScores:
    """CAOTE on an arbitrary non-negative score vector.

    Scores already on the simplex (``normalized=True``) are used as-is, so a
    TOVA row gives exactly the same result as :func:`caote_scores`.
    """
    if not isinstance(base, ScoreVector):
        base = ScoreVector(base, normalized=False)
    pseudo = base if base.normalized else normalize_scores(base)
    return (fast_caote_scores if fast else caote_scores)(pseudo.scores, values)


def renormalize_after_eviction(alpha, j: int) -> ScoreVector:
    a = as_vector(alpha.scores if isinstance(alpha, ScoreVector) else alpha)
    if not 0 <= j < a.shape[0]:
        raise IndexError(f"evictee {j} out of range for {a.shape[0]} tokens")
    if a[j] >= 1.0 - SOLE_MASS_TOL:
        raise ValueError("cannot evict sole mass holder")
    rest = np.delete(a, j)
    return ScoreVector(rest / (1.0 - a[j]), normalized=True)


def eviction_error_oracle(alpha, values, j: int) -> float:
    """||X_attn - X'_attn,j||_2 computed by explicit eviction and re-summation."""
    a = as_vector(alpha.scores if isinstance(alpha, ScoreVector) else alpha)
    v = as_matrix(values)
    x_attn = matmul(a[None, :], v)[0]
    survivors = np.delete(v, j, axis=0)
    a_new = renormalize_after_eviction(a, j).scores
    x_new = matmul(a_new[None, :], survivors)[0]
    return l2_norm(x_attn - x_new)


@dataclass
class LogitCheck:
    observed: np.ndarray
    predicted: np.ndarray
    delta_attn: np.ndarray

    @property
    def error(self) -> float:
        return float(np.linalg.norm(self.observed - self.predicted))


def logit_error_check(model: ToyModel, hidden_all, j: int, *, scale: bool = True) -> LogitCheck:
    """Compare the logit shift from evicting token ``j`` with its linear prediction.

    The observed shift is measured by running the last token twice through
    the cache path, once with token ``j`` evicted from every head. The
    prediction propagates the attention-output change through the residual
    stream: W_H (W_O d + W_FFN W_O d).
    """
    if model.n_layers != 1:
        raise ValueError("compounding not modeled: logit check needs a 1-layer model")
    x = as_matrix(hidden_all)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 tokens")
    if not 0 <= j < n:
        raise IndexError(f"token {j} out of range for {n} tokens")

    def run(evict_j: bool):
        cache = KvCache.empty(model)
        _, cache = block_prefill(model, x[:-1], cache, scale=scale)
        record = []

        def drop(_layer, heads, _rows):
            for hc in heads:
                hc.keep(np.flatnonzero(hc.positions != j))
            return True

        _, logits, _ = generate_step(
            model, x[-1], cache, scale=scale, evict=drop if evict_j else None, record=record
        )
        return logits, record[0].attn[-1]

    dense_logits, dense_attn = run(False)
    evicted_logits, evicted_attn = run(True)
    lw = model.layers[0]
    delta = dense_attn - evicted_attn
    w_o_delta = lw.w_o @ delta
    predicted = model.w_h @ (w_o_delta + lw.w_ffn @ w_o_delta)
    return LogitCheck(dense_logits - evicted_logits, predicted, delta)


def without_ffn(model: ToyModel) -> ToyModel:
    """Copy of ``model`` with every W_FFN zeroed (attention-only layers)."""
    layers = tuple(replace(lw, w_ffn=np.zeros_like(lw.w_ffn)) for lw in model.layers)
    return replace(model, layers=layers)
