"""Cache policies: configuration plus the pure selection operations.

Five policy kinds share one decode-step interface (see engine.DecodeSession):

  vanilla     attend the complete cache every step
  streaming   sink tokens plus a recency window, fixed budget
  h2o         cumulative-attention heavy hitters plus a recency half
  snapkv      top-K selected once from the prompt's last-token scores,
              then grow-only
  refreshkv   alternate full/partial attention, rebuilding the partial
              cache from the scores observed at each full step

plus two ablation variants of refreshkv: one that runs scheduled full
steps without refreshing the partial cache, and one that refreshes the
partial cache from full-cache scores but produces its output from the
refreshed partial cache instead of the full one.

Selection scores are per kv-head: every query head's probability row over
the cache is aggregated within its group (max by default), then max-pooled
over neighboring positions. Top-K runs independently per kv-head unless
shared_selection collapses the scores across heads first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .kv_store import FullCache, PartialCache, init_partial
from .numerics import max_pool_1d, top_k_indices

POLICY_KINDS = (
    "vanilla",
    "streaming",
    "h2o",
    "snapkv",
    "refreshkv",
    "refreshkv_no_refresh",
    "refreshkv_no_full",
)
REFRESH_FAMILY = ("refreshkv", "refreshkv_no_refresh", "refreshkv_no_full")
AGGREGATION_MODES = ("max", "mean", "first")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "refreshkv"
    k: int | None = None  # absolute budget; exclusive with k_fraction
    k_fraction: float | None = 0.125  # budget as a fraction of the prompt length
    kernel_size: int = 7
    gqa_aggregation: str = "max"
    n_sink: int = 4  # streaming only
    evict_on_append: bool | None = None  # default: True for refresh family, False for snapkv
    shared_selection: bool = False  # one top-K per layer instead of per kv-head

    def validate(self) -> None:
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown policy kind {self.kind!r}")
        if self.gqa_aggregation not in AGGREGATION_MODES:
            raise ConfigurationError(f"unknown gqa_aggregation {self.gqa_aggregation!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigurationError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if self.k is None and self.k_fraction is None:
            raise ConfigurationError("one of k or k_fraction is required")
        if self.k is not None and self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        if self.k is None and not 0.0 < self.k_fraction <= 1.0:
            raise ConfigurationError(f"k_fraction must lie in (0, 1], got {self.k_fraction}")
        if self.kind == "streaming" and self.n_sink < 0:
            raise ConfigurationError(f"n_sink must be non-negative, got {self.n_sink}")

    def resolve_budget(self, input_length: int) -> int:
        """Absolute cache budget for a given prompt length.

        Fractional budgets resolve to floor(fraction * L). Policies that
        select from the prefilled cache additionally clamp to L; recency
        policies use the budget as-is so oversized budgets degenerate to
        vanilla attention.
        """
        if self.k is not None:
            return self.k
        return max(1, int(self.k_fraction * input_length))

    def resolved_evict_on_append(self) -> bool:
        if self.evict_on_append is not None:
            return self.evict_on_append
        return self.kind != "snapkv"


def aggregate_group_scores(per_query_head_rows: np.ndarray, mode: str) -> np.ndarray:
    """Collapse a group of query-head score rows into one row.

    rows: (group_size, m). max/mean are elementwise; first passes the
    first head's row through.
    """
    rows = np.asarray(per_query_head_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ContractViolation(f"expected a non-empty (group, positions) array, got shape {rows.shape}")
    if mode == "max":
        return rows.max(axis=0)
    if mode == "mean":
        return rows.mean(axis=0)
    if mode == "first":
        return rows[0].copy()
    raise ConfigurationError(f"unknown aggregation mode {mode!r}")


def selection_scores(rows_per_head: list[np.ndarray], config: PolicyConfig) -> np.ndarray:
    """Selection scores per kv-head: group-aggregate, then max-pool.

    rows_per_head: per kv-head arrays of shape (group_size, m), the
    probability rows observed at a full-attention (or prefill) step.
    Returns (n_kv_heads, m). With shared_selection the per-head rows are
    collapsed by elementwise max so every head selects the same positions.
    """
    if not rows_per_head:
        raise ContractViolation("no attention rows to score")
    m = rows_per_head[0].shape[1]
    if any(r.shape[1] != m for r in rows_per_head):
        raise ContractViolation("ragged attention rows across kv-heads")
    out = np.stack(
        [
            max_pool_1d(aggregate_group_scores(rows, config.gqa_aggregation), config.kernel_size)
            for rows in rows_per_head
        ]
    )
    if config.shared_selection:
        out = np.broadcast_to(out.max(axis=0), out.shape).copy()
    return out


def streaming_keepset(input_length: int, generated: int, config: PolicyConfig, budget: int) -> np.ndarray:
    """Positions kept by the sink+recency policy after `generated` appended tokens.

    The first n_sink positions plus the (budget - n_sink) most recent; when
    the total fits in the budget, everything is kept.
    """
    if budget < config.n_sink:
        raise ConfigurationError(f"budget {budget} smaller than n_sink {config.n_sink}")
    total = input_length + generated
    if total <= budget:
        return np.arange(total, dtype=np.int64)
    recent = budget - config.n_sink
    sinks = np.arange(config.n_sink, dtype=np.int64)
    window = np.arange(total - recent, total, dtype=np.int64)
    return np.concatenate([sinks, window])


class H2OState:
    """Per-layer running state of the heavy-hitter policy.

    Tracks cumulative attention received by every position still in the
    cache. The budget splits into a recency half (the newest positions,
    kept unconditionally) and a heavy half (highest cumulative score among
    the rest, ties toward the lower position). Evicted positions are gone
    for good. Requires a score observation every step.
    """

    def __init__(self, budget: int, positions: np.ndarray, sums: np.ndarray):
        self.budget = int(budget)
        self.heavy_n = self.budget // 2
        self.recent_n = self.budget - self.heavy_n
        self.positions = np.asarray(positions, dtype=np.int64)
        self.sums = np.asarray(sums, dtype=np.float64)
        self._evict_to_budget()

    @classmethod
    def from_prefill(cls, last_token_row: np.ndarray, budget: int) -> "H2OState":
        """Initialize from the prompt's last-token aggregated attention row."""
        row = np.asarray(last_token_row, dtype=np.float64)
        return cls(budget, np.arange(row.size, dtype=np.int64), row.copy())

    def keepset(self) -> np.ndarray:
        return self.positions.copy()

    def step(self, attention_row: np.ndarray, view_positions: np.ndarray) -> np.ndarray:
        """Accumulate one step's row over the attended view and re-evict.

        view_positions must be the current keepset plus the just-decoded
        position at the end; the new position enters with the attention it
        received this step.
        """
        row = np.asarray(attention_row, dtype=np.float64)
        view_positions = np.asarray(view_positions, dtype=np.int64)
        if row.size != view_positions.size:
            raise ContractViolation("attention row and view positions disagree")
        if view_positions.size != self.positions.size + 1 or not np.array_equal(
            view_positions[:-1], self.positions
        ):
            raise ContractViolation("view does not match the current keepset plus one new position")
        self.sums = self.sums + row[:-1]
        self.positions = np.append(self.positions, view_positions[-1])
        self.sums = np.append(self.sums, row[-1])
        self._evict_to_budget()
        return self.keepset()

    def _evict_to_budget(self) -> None:
        n = self.positions.size
        if n <= self.budget:
            return
        recent_start = n - self.recent_n
        cand_sums = self.sums[:recent_start]
        # top heavy_n by (sum desc, position asc); positions ascending == index asc
        order = np.lexsort((np.arange(cand_sums.size), -cand_sums))
        keep_idx = np.sort(order[: self.heavy_n])
        keep = np.concatenate([keep_idx, np.arange(recent_start, n)])
        self.positions = self.positions[keep]
        self.sums = self.sums[keep]


def snapkv_prefill_select(
    rows_per_head: list[np.ndarray], full: FullCache, config: PolicyConfig, k: int
) -> PartialCache:
    """Prompt-time top-K selection from the last token's observation rows."""
    return init_partial(full, selection_scores(rows_per_head, config), k)


__all__ = [
    "POLICY_KINDS",
    "REFRESH_FAMILY",
    "AGGREGATION_MODES",
    "PolicyConfig",
    "aggregate_group_scores",
    "selection_scores",
    "streaming_keepset",
    "H2OState",
    "snapkv_prefill_select",
    "top_k_indices",
]
