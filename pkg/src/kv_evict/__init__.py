"""KV-cache token eviction driven by attention-output error (CAOTE)."""

from .attention import (
    AttentionRow,
    KvCache,
    ModelConfig,
    ToyModel,
    attend_row,
    block_prefill,
    dense_forward,
    generate_step,
    init_model,
    load_weights,
    save_weights,
)
from .caote import (
    CaoteMode,
    caote_scores,
    caote_scores_general,
    eviction_error_oracle,
    fast_caote_scores,
    logit_error_check,
    renormalize_after_eviction,
)
from .engine import Aggregate, EvictionConfig, EvictionDecision, deviation_metric, evict_pass, run_sequence
from .scoring import Policy, PolicyState, ScoreVector, normalize_scores, top_b_retain

__version__ = "0.1.0"
