"""Desk-scale multi-head causal attention with a bounded per-head KV cache.

Conventions: hidden states are row vectors, weights act as ``y = W x`` so a
block of rows is mapped with ``X @ W.T``. A layer is

    h   = x + W_O attn(x)
    out = h + W_FFN h

with no layer norms and no positional encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numerics import as_matrix, as_vector, softmax, softmax_rows

WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_ffn")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    vocab: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True, eq=False)
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_ffn: np.ndarray


@dataclass(frozen=True, eq=False)
class ToyModel:
    config: ModelConfig
    layers: tuple[LayerWeights, ...]
    w_h: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.config.n_layers

    @property
    def n_heads(self) -> int:
        return self.config.n_heads

    @property
    def d_model(self) -> int:
        return self.config.d_model

    @property
    def d_head(self) -> int:
        return self.config.d_head

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def logits(self, hidden) -> np.ndarray:
        return self.w_h @ as_vector(hidden)


def init_model(config: ModelConfig | dict) -> ToyModel:
    """Draw every weight i.i.d. from U(-s, s), s = 1/sqrt(d_model), seeded."""
    if isinstance(config, dict):
        config = ModelConfig(**config)
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    s = 1.0 / np.sqrt(d)
    layers = []
    for _ in range(config.n_layers):
        mats = {name: rng.uniform(-s, s, size=(d, d)) for name in WEIGHT_NAMES}
        layers.append(LayerWeights(**mats))
    w_h = rng.uniform(-s, s, size=(config.vocab, d))
    return ToyModel(config=config, layers=tuple(layers), w_h=w_h)


def model_to_dict(model: ToyModel) -> dict:
    cfg = model.config
    return {
        "config": {
            "n_layers": cfg.n_layers,
            "n_heads": cfg.n_heads,
            "d_model": cfg.d_model,
            "vocab": cfg.vocab,
            "seed": cfg.seed,
        },
        "layers": [
            {name: getattr(lw, name).tolist() for name in WEIGHT_NAMES}
            for lw in model.layers
        ],
        "w_h": model.w_h.tolist(),
    }


def model_from_dict(data: dict) -> ToyModel:
    cfg = ModelConfig(**data["config"])
    d = cfg.d_model
    if len(data["layers"]) != cfg.n_layers:
        raise ValueError(
            f"config says {cfg.n_layers} layers, file has {len(data['layers'])}"
        )
    layers = []
    for i, raw in enumerate(data["layers"]):
        mats = {}
        for name in WEIGHT_NAMES:
            w = np.asarray(raw[name], dtype=np.float64)
            if w.shape != (d, d):
                raise ValueError(f"layer {i} {name}: expected {(d, d)}, got {w.shape}")
            mats[name] = w
        layers.append(LayerWeights(**mats))
    w_h = np.asarray(data["w_h"], dtype=np.float64)
    if w_h.shape != (cfg.vocab, d):
        raise ValueError(f"w_h: expected {(cfg.vocab, d)}, got {w_h.shape}")
    for w in [w_h, *(getattr(lw, n) for lw in layers for n in WEIGHT_NAMES)]:
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
    return ToyModel(config=cfg, layers=tuple(layers), w_h=w_h)


def save_weights(model: ToyModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_weights(path: str | Path) -> ToyModel:
    return model_from_dict(json.loads(Path(path).read_text()))


@dataclass
class AttentionRow:
    weights: np.ndarray
    query_position: int = -1


@dataclass
class HeadCache:
    """Keys, values and original positions retained by one head of one layer.

    ``state`` is the eviction policy's bookkeeping; it only needs a
    ``keep(indices)`` method so that it can be pruned together with the rows.
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    state: object | None = None

    @classmethod
    def empty(cls, d_head: int, state=None) -> "HeadCache":
        return cls(
            keys=np.zeros((0, d_head)),
            values=np.zeros((0, d_head)),
            positions=np.zeros(0, dtype=np.int64),
            state=state,
        )

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, keys: np.ndarray, values: np.ndarray, positions: np.ndarray):
        self.keys = np.concatenate([self.keys, keys])
        self.values = np.concatenate([self.values, values])
        self.positions = np.concatenate([self.positions, positions])

    def keep(self, indices) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        self.keys = self.keys[idx]
        self.values = self.values[idx]
        self.positions = self.positions[idx]
        if self.state is not None:
            self.state.keep(idx)


@dataclass
class KvCache:
    heads: list[list[HeadCache]]
    seen: int = 0

    @classmethod
    def empty(cls, model: ToyModel, state_factory: Callable[[], object] | None = None):
        heads = [
            [
                HeadCache.empty(model.d_head, state_factory() if state_factory else None)
                for _ in range(model.n_heads)
            ]
            for _ in range(model.n_layers)
        ]
        return cls(heads=heads)

    def lengths(self) -> list[list[int]]:
        return [[len(hc) for hc in layer] for layer in self.heads]


@dataclass
class LayerRecord:
    """Per-layer attention outputs (pre W_O, heads concatenated) for one block,
    plus the final query's weights over the cache it actually attended to."""

    layer: int
    attn: np.ndarray
    final_weights: list[np.ndarray] = field(default_factory=list)
    final_positions: list[np.ndarray] = field(default_factory=list)


# evict(layer, heads, rows) -> True if any cache row was dropped.
EvictHook = Callable[[int, list[HeadCache], list[np.ndarray]], bool]


def attend_row(q, keys, values, scale: bool = True, query_position: int = -1):
    q = as_vector(q)
    keys = as_matrix(keys)
    values = as_matrix(values)
    if keys.shape[0] < 1 or keys.shape != values.shape or keys.shape[1] != q.shape[0]:
        raise ValueError(
            f"shape mismatch: q {q.shape}, keys {keys.shape}, values {values.shape}"
        )
    logits = keys @ q
    if scale:
        logits = logits / np.sqrt(q.shape[0])
    weights = softmax(logits)
    return AttentionRow(weights, query_position), weights @ values


def attend_block(q, keys, values, key_positions, query_positions, scale: bool = True):
    """Causally masked attention of ``m`` queries over ``n`` cached tokens.

    A query sees key ``i`` iff ``key_positions[i] <= query_position``. A query
    with no visible key gets an all-zero row and a zero output.
    """
    logits = q @ keys.T
    if scale:
        logits = logits / np.sqrt(q.shape[1])
    mask = key_positions[None, :] <= query_positions[:, None]
    weights = softmax_rows(logits, mask)
    return weights, weights @ values


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    m, d = x.shape
    return x.reshape(m, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, m, dh = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * dh)


def _project(model: ToyModel, lw: LayerWeights, x: np.ndarray):
    n = model.n_heads
    return (
        _split_heads(x @ lw.w_q.T, n),
        _split_heads(x @ lw.w_k.T, n),
        _split_heads(x @ lw.w_v.T, n),
    )


def _mix(lw: LayerWeights, x: np.ndarray, attn: np.ndarray) -> np.ndarray:
    h = x + attn @ lw.w_o.T
    return h + h @ lw.w_ffn.T


def _check_width(model: ToyModel, x: np.ndarray) -> None:
    if x.shape[1] != model.d_model:
        raise ValueError(f"hidden width {x.shape[1]} != d_model {model.d_model}")


def block_prefill(
    model: ToyModel,
    hidden_block,
    cache: KvCache,
    *,
    scale: bool = True,
    evict: EvictHook | None = None,
    record: list[LayerRecord] | None = None,
):
    """Process ``m`` new tokens through every layer, growing ``cache`` in place.

    Without ``evict`` each layer's cache grows by ``m``. With it, the hook sees
    the pre-eviction weight rows of the new queries over all ``b + m``
    candidates, and if it drops anything the block's outputs are recomputed
    over the retained tokens only.
    """
    x = as_matrix(hidden_block)
    _check_width(model, x)
    m = x.shape[0]
    if m < 1:
        raise ValueError("block must contain at least one token")
    qpos = np.arange(cache.seen, cache.seen + m, dtype=np.int64)
    for li, lw in enumerate(model.layers):
        q, k, v = _project(model, lw, x)
        heads = cache.heads[li]
        for h, hc in enumerate(heads):
            hc.append(k[h], v[h], qpos)
        results = [
            attend_block(q[h], hc.keys, hc.values, hc.positions, qpos, scale)
            for h, hc in enumerate(heads)
        ]
        if evict is not None and evict(li, heads, [w for w, _ in results]):
            results = [
                attend_block(q[h], hc.keys, hc.values, hc.positions, qpos, scale)
                for h, hc in enumerate(heads)
            ]
        attn = _merge_heads(np.stack([out for _, out in results]))
        if record is not None:
            record.append(
                LayerRecord(
                    layer=li,
                    attn=attn,
                    final_weights=[w[-1].copy() for w, _ in results],
                    final_positions=[hc.positions.copy() for hc in heads],
                )
            )
        x = _mix(lw, x, attn)
    cache.seen += m
    return x, cache


def generate_step(
    model: ToyModel,
    hidden,
    cache: KvCache,
    *,
    scale: bool = True,
    evict: EvictHook | None = None,
    record: list[LayerRecord] | None = None,
):
    """One-token step; returns (hidden_out, logits, cache)."""
    h = as_vector(hidden)
    out, cache = block_prefill(
        model, h[None, :], cache, scale=scale, evict=evict, record=record
    )
    out = out[0]
    return out, model.logits(out), cache


def dense_forward(
    model: ToyModel,
    hidden_all,
    *,
    scale: bool = True,
    record: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Full causal forward pass with no cache bound (reference path).

    ``record`` receives each layer's (n, d_model) attention output.
    """
    x = as_matrix(hidden_all)
    _check_width(model, x)
    n = x.shape[0]
    mask = np.tril(np.ones((n, n), dtype=bool))
    for lw in model.layers:
        q, k, v = _project(model, lw, x)
        logits = q @ k.transpose(0, 2, 1)
        if scale:
            logits = logits / np.sqrt(model.d_head)
        a = softmax_rows(logits, mask[None, :, :])
        attn = _merge_heads(a @ v)
        if record is not None:
            record.append(attn)
        x = _mix(lw, x, attn)
    return x


def prefill(
    model: ToyModel,
    hidden_all,
    block_sizes: Sequence[int],
    *,
    scale: bool = True,
) -> np.ndarray:
    """Block-wise prefill with no eviction, for partition-invariance checks."""
    x = as_matrix(hidden_all)
    if sum(block_sizes) != x.shape[0]:
        raise ValueError("block sizes must sum to the sequence length")
    cache = KvCache.empty(model)
    outs, start = [], 0
    for m in block_sizes:
        out, cache = block_prefill(model, x[start : start + m], cache, scale=scale)
        outs.append(out)
        start += m
    return np.concatenate(outs)
