"""Block-wise prefill and generation under a per-head KV budget.

Each block is processed layer by layer. Within a layer the new keys/values
are appended, the new queries' weight rows over all ``b + m`` candidates are
handed to :func:`evict_pass`, the cache is cut back to ``b`` and the block's
attention output is then computed over the survivors only.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .attention import KvCache, LayerRecord, ToyModel, block_prefill, generate_step
from .caote import CaoteMode, caote_scores_general, eviction_error_oracle
from .numerics import as_matrix
from .scoring import Policy, PolicyState, accumulate_rows, base_scores, normalize_scores, top_b_retain


class Aggregate(str, Enum):
    PER_HEAD = "per-head"
    MEAN_HEADS = "mean-heads"


@dataclass(frozen=True)
class EvictionConfig:
    policy: Policy = Policy.H2O
    caote_mode: CaoteMode = CaoteMode.OFF
    budget: int = 64
    block_size: int = 16
    aggregate: Aggregate = Aggregate.PER_HEAD
    sink_count: int = 4
    window: int = 8
    pool_kernel: int = 3
    protect_recent: int = 0
    scale: bool = True
    # record per-candidate oracle errors in every decision (slow)
    audit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "policy", Policy(self.policy))
        object.__setattr__(self, "caote_mode", CaoteMode(self.caote_mode))
        object.__setattr__(self, "aggregate", Aggregate(self.aggregate))
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.protect_recent < 0:
            raise ValueError("protect_recent must be >= 0")

    def new_state(self) -> PolicyState:
        return PolicyState(
            kind=self.policy,
            sink_count=self.sink_count,
            window=self.window,
            pool_kernel=self.pool_kernel,
        )


@dataclass
class EvictionDecision:
    """One head's outcome of one eviction pass.

    ``retained`` and ``evicted`` hold original token positions.
    ``oracle_errors`` is filled only when the config asks for an audit.
    """

    layer: int
    head: int
    candidate_count: int
    base_scores: np.ndarray
    caote_scores: np.ndarray
    retained: np.ndarray
    evicted: np.ndarray
    step: int = -1
    oracle_errors: np.ndarray | None = None

    @property
    def triggered(self) -> bool:
        return self.evicted.size > 0

    def to_json(self) -> dict:
        def floats(a):
            return [x if np.isfinite(x) else ("inf" if x > 0 else "-inf") for x in a.tolist()]

        out = {
            "step": self.step,
            "layer": self.layer,
            "head": self.head,
            "candidate_count": self.candidate_count,
            "base_scores": floats(self.base_scores),
            "caote_scores": floats(self.caote_scores),
            "retained": self.retained.tolist(),
            "evicted": self.evicted.tolist(),
        }
        if self.oracle_errors is not None:
            out["oracle_errors"] = floats(self.oracle_errors)
        return out


def _pseudo_attention(base) -> np.ndarray:
    return base.scores if base.normalized else normalize_scores(base).scores


def _oracle_errors(alpha: np.ndarray, values: np.ndarray) -> np.ndarray:
    errs = np.empty(alpha.shape[0])
    for j in range(alpha.shape[0]):
        try:
            errs[j] = eviction_error_oracle(alpha, values, j)
        except ValueError:
            errs[j] = np.inf
    return errs


def evict_pass(heads, rows, cfg: EvictionConfig, *, layer: int = 0, step: int = -1):
    """Score the candidates of every head in one layer and cut each to the budget.

    ``rows[h]`` is the (m, b + m) weight matrix of head ``h``'s new queries.
    Mutates the head caches (and their policy state); returns one
    :class:`EvictionDecision` per head. When no head is over budget the
    policy state is still updated and the decisions evict nothing.
    """
    finals, per_head = [], []
    over = any(len(hc) > cfg.budget for hc in heads)
    for h, hc in enumerate(heads):
        state = hc.state
        if state is None:
            raise ValueError("head cache has no policy state")
        accumulate_rows(state, rows[h])
        if not over:
            continue
        base = base_scores(state, hc.positions, cfg.budget)
        caote = np.zeros(0)
        oracle = None
        if cfg.caote_mode is CaoteMode.OFF:
            final = base.scores.copy()
        else:
            caote = caote_scores_general(
                base, hc.values, fast=cfg.caote_mode is CaoteMode.FAST
            ).c
            final = caote.copy()
            if cfg.audit:
                oracle = _oracle_errors(_pseudo_attention(base), hc.values)
        if cfg.protect_recent:
            final[-cfg.protect_recent :] = np.inf
        finals.append(final)
        per_head.append((base.scores, caote, oracle))

    if not over:
        return [
            EvictionDecision(
                layer, h, len(hc), np.zeros(0), np.zeros(0), hc.positions.copy(),
                np.zeros(0, dtype=np.int64), step,
            )
            for h, hc in enumerate(heads)
        ]

    if cfg.aggregate is Aggregate.MEAN_HEADS:
        if len({len(hc) for hc in heads}) != 1:
            raise ValueError("mean-heads aggregation needs equal cache lengths across heads")
        shared = top_b_retain(np.mean(np.stack(finals), axis=0), cfg.budget)
        keeps = [shared] * len(heads)
    else:
        keeps = [top_b_retain(f, cfg.budget) for f in finals]

    decisions = []
    for h, (hc, keep) in enumerate(zip(heads, keeps)):
        drop = np.setdiff1d(np.arange(len(hc)), keep)
        base, caote, oracle = per_head[h]
        decisions.append(
            EvictionDecision(
                layer=layer,
                head=h,
                candidate_count=len(hc),
                base_scores=base,
                caote_scores=caote,
                retained=hc.positions[keep].copy(),
                evicted=hc.positions[drop].copy(),
                step=step,
                oracle_errors=oracle,
            )
        )
        hc.keep(keep)
        if len(hc) > cfg.budget:
            raise RuntimeError(f"budget violated: layer {layer} head {h} holds {len(hc)}")
    return decisions


def deviation_metric(dense_out, evicted_out) -> np.ndarray:
    """Per-layer ||dense - evicted||_F^2 / ||dense||_F^2.

    Inputs are (layers, tokens, width); a 2-D input is treated as one layer.
    """
    d = np.asarray(dense_out, dtype=np.float64)
    e = np.asarray(evicted_out, dtype=np.float64)
    if d.shape != e.shape:
        raise ValueError(f"shape mismatch: dense {d.shape} vs evicted {e.shape}")
    if d.ndim == 2:
        d, e = d[None], e[None]
    axes = tuple(range(1, d.ndim))
    num = np.sum(np.square(d - e), axis=axes)
    den = np.sum(np.square(d), axis=axes)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 0)
    out[(den == 0) & (num > 0)] = np.inf
    return out


@dataclass
class DeviationTrace:
    layer: np.ndarray
    step: np.ndarray
    nmse: np.ndarray
    mse: np.ndarray

    def mean_nmse(self) -> dict[int, float]:
        return {int(l): float(self.nmse[self.layer == l].mean()) for l in np.unique(self.layer)}

    def mean_mse(self) -> dict[int, float]:
        return {int(l): float(self.mse[self.layer == l].mean()) for l in np.unique(self.layer)}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "step", "nmse"])
            for l, s, v in zip(self.layer, self.step, self.nmse):
                w.writerow([int(l), int(s), repr(float(v))])


@dataclass
class RunResult:
    outputs: np.ndarray
    logits: list[np.ndarray]
    decisions: list[EvictionDecision]
    trace: DeviationTrace | None
    inputs: np.ndarray
    # (steps, layers, d_model) final-token attention output per block/step
    attn: np.ndarray = field(repr=False, default=None)
    final_records: list[LayerRecord] = field(repr=False, default_factory=list)
    cache: KvCache | None = field(repr=False, default=None)


def embed_token(model: ToyModel, token: int) -> np.ndarray:
    """Tied-embedding input for a generated token, rescaled to norm sqrt(d_model)."""
    e = model.w_h[token]
    return e * (np.sqrt(model.d_model) / np.linalg.norm(e))


def _forward(model, prompt, n_generate, cfg, gen_inputs, evicting):
    cache = KvCache.empty(model, cfg.new_state if evicting else None)
    decisions: list[EvictionDecision] = []
    step = 0

    def hook(layer, heads, rows):
        ds = evict_pass(heads, rows, cfg, layer=layer, step=step)
        fired = [d for d in ds if d.triggered]
        decisions.extend(fired)
        return bool(fired)

    evict = hook if evicting else None
    outputs, logits, inputs, attn = [], [], [], []
    record: list[LayerRecord] = []
    for start in range(0, prompt.shape[0], cfg.block_size):
        record = []
        out, cache = block_prefill(
            model, prompt[start : start + cfg.block_size], cache,
            scale=cfg.scale, evict=evict, record=record,
        )
        outputs.append(out)
        attn.append(np.stack([r.attn[-1] for r in record]))
        step += 1
    last = model.logits(outputs[-1][-1])
    logits.append(last)
    for g in range(n_generate):
        x = gen_inputs[g] if gen_inputs is not None else embed_token(model, int(np.argmax(last)))
        inputs.append(x)
        record = []
        out, last, cache = generate_step(
            model, x, cache, scale=cfg.scale, evict=evict, record=record
        )
        outputs.append(out[None, :])
        logits.append(last)
        attn.append(np.stack([r.attn[-1] for r in record]))
        step += 1
    all_inputs = np.concatenate([prompt, np.asarray(inputs).reshape(-1, model.d_model)])
    return RunResult(
        outputs=np.concatenate(outputs),
        logits=logits,
        decisions=decisions,
        trace=None,
        inputs=all_inputs,
        attn=np.stack(attn),
        final_records=record,
        cache=cache,
    )


def run_sequence(
    model: ToyModel,
    prompt_hidden,
    n_generate: int,
    cfg: EvictionConfig,
    *,
    trace: bool = True,
) -> RunResult:
    """Prefill ``prompt_hidden`` in blocks, then generate ``n_generate`` tokens.

    Generated tokens are fed back through tied embeddings of the argmax
    logit. With ``trace`` the same inputs are replayed without eviction and
    the per-layer final-token attention outputs of both runs are compared
    at every block/step.
    """
    prompt = as_matrix(prompt_hidden)
    if prompt.shape[0] < 1:
        raise ValueError("prompt must contain at least one token")
    if n_generate < 0:
        raise ValueError("n_generate must be >= 0")
    result = _forward(model, prompt, n_generate, cfg, None, evicting=True)
    if trace:
        gen = result.inputs[prompt.shape[0] :]
        ref = _forward(model, prompt, n_generate, cfg, gen, evicting=False)
        result.trace = trace_from_attn(ref.attn, result.attn)
    return result


def trace_from_attn(dense: np.ndarray, evicted: np.ndarray) -> DeviationTrace:
    """Build a trace from (steps, layers, width) attention outputs."""
    n_steps, n_layers, width = dense.shape
    layers, steps, nmse, mse = [], [], [], []
    for s in range(n_steps):
        per_layer = deviation_metric(dense[s][:, None, :], evicted[s][:, None, :])
        sq = np.sum(np.square(dense[s] - evicted[s]), axis=1) / width
        for l in range(n_layers):
            layers.append(l)
            steps.append(s)
            nmse.append(per_layer[l])
            mse.append(sq[l])
    # sort layer-major so the CSV reads one layer at a time
    order = np.lexsort((np.asarray(steps), np.asarray(layers)))
    return DeviationTrace(
        layer=np.asarray(layers)[order],
        step=np.asarray(steps)[order],
        nmse=np.asarray(nmse)[order],
        mse=np.asarray(mse)[order],
    )


def write_decisions_jsonl(decisions, path: str | Path) -> None:
    with open(path, "w") as f:
        for d in decisions:
            f.write(json.dumps(d.to_json()) + "\n")


def unbounded(cfg: EvictionConfig, length: int) -> EvictionConfig:
    """Same config with a budget no sequence of ``length`` tokens can exceed."""
    return replace(cfg, budget=max(cfg.budget, length))
