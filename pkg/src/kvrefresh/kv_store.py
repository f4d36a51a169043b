"""Per-layer key/value stores for the decoding engine.

Three stores per layer: the full cache (every token ever seen, never
evicted), the partial cache (a fixed-budget subset carrying per-entry
selection scores, selected independently per kv-head), and the pending
buffer (key/values produced during partial steps, awaiting merge into the
full cache at the layer's next full-attention step).

Entries appended to the partial cache since the last full-attention step
have no selection score yet; they carry the NEW sentinel (+inf), which
protects them from eviction until the next refresh re-scores everything.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .numerics import top_k_indices

NEW_SCORE = np.inf  # sentinel for entries appended since the last scored step


@dataclass
class FullCache:
    """Append-only store of every position's key/value, all kv-heads."""

    positions: np.ndarray  # (n,) int64, strictly increasing
    keys: np.ndarray  # (n, n_kv_heads, head_dim), rotated
    values: np.ndarray  # (n, n_kv_heads, head_dim)

    @classmethod
    def from_arrays(cls, positions: np.ndarray, keys: np.ndarray, values: np.ndarray) -> "FullCache":
        return cls(np.asarray(positions, dtype=np.int64), keys, values)

    def __len__(self) -> int:
        return int(self.positions.size)

    @property
    def max_position(self) -> int:
        return int(self.positions[-1]) if len(self) else -1

    def append(self, position: int, k: np.ndarray, v: np.ndarray) -> None:
        if len(self) and position <= self.max_position:
            raise ContractViolation(
                f"full-cache append out of order: {position} <= {self.max_position}"
            )
        self.positions = np.append(self.positions, np.int64(position))
        self.keys = np.concatenate([self.keys, k[None]], axis=0)
        self.values = np.concatenate([self.values, v[None]], axis=0)

    def head_view(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.keys[:, h], self.values[:, h], self.positions

    def gather(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.positions[indices], self.keys[indices], self.values[indices]


@dataclass
class PendingBuffer:
    """Key/values generated during partial steps since the last full step."""

    positions: list[int] = field(default_factory=list)
    keys: list[np.ndarray] = field(default_factory=list)  # each (n_kv_heads, head_dim)
    values: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def append(self, position: int, k: np.ndarray, v: np.ndarray) -> None:
        if self.positions and position <= self.positions[-1]:
            raise ContractViolation(f"pending append out of order: {position} <= {self.positions[-1]}")
        self.positions.append(int(position))
        self.keys.append(k)
        self.values.append(v)

    def clear(self) -> None:
        self.positions.clear()
        self.keys.clear()
        self.values.clear()


@dataclass
class PartialCache:
    """Fixed-budget per-kv-head subset of the cache with selection scores."""

    capacity: int
    positions: list[np.ndarray]  # per head: (m,) int64, strictly increasing
    keys: list[np.ndarray]  # per head: (m, head_dim)
    values: list[np.ndarray]  # per head: (m, head_dim)
    scores: list[np.ndarray]  # per head: (m,), NEW_SCORE for unscored entries

    @property
    def n_heads(self) -> int:
        return len(self.positions)

    def size(self, h: int) -> int:
        return int(self.positions[h].size)

    def sizes(self) -> list[int]:
        return [self.size(h) for h in range(self.n_heads)]

    def head_view(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.keys[h], self.values[h], self.positions[h]

    def append(self, position: int, k: np.ndarray, v: np.ndarray) -> None:
        """Append one entry (all heads) with the NEW sentinel score."""
        for h in range(self.n_heads):
            if self.positions[h].size and position <= int(self.positions[h][-1]):
                raise ContractViolation(
                    f"partial-cache append out of order: {position} <= {int(self.positions[h][-1])}"
                )
            self.positions[h] = np.append(self.positions[h], np.int64(position))
            self.keys[h] = np.concatenate([self.keys[h], k[h][None]], axis=0)
            self.values[h] = np.concatenate([self.values[h], v[h][None]], axis=0)
            self.scores[h] = np.append(self.scores[h], NEW_SCORE)

    def evict_overflow(self) -> None:
        """Drop lowest-scored entries until each head is back at capacity.

        NEW entries count as +inf (never evicted while any scored entry
        remains); if a head is entirely NEW, the oldest entry goes. Score
        ties resolve toward the lower position.
        """
        for h in range(self.n_heads):
            while self.size(h) > self.capacity:
                s = self.scores[h]
                finite = np.isfinite(s)
                if finite.any():
                    cand = np.flatnonzero(finite)
                    idx = int(cand[np.argmin(s[cand])])  # argmin keeps first (lowest pos) on ties
                else:
                    idx = 0  # all NEW: evict the oldest
                self.positions[h] = np.delete(self.positions[h], idx)
                self.keys[h] = np.delete(self.keys[h], idx, axis=0)
                self.values[h] = np.delete(self.values[h], idx, axis=0)
                self.scores[h] = np.delete(self.scores[h], idx)

    def dump_jsonl(self, layer: int) -> list[str]:
        """Debug dump: one JSON line per entry, NEW scores serialized as null."""
        lines = []
        for h in range(self.n_heads):
            for pos, score in zip(self.positions[h].tolist(), self.scores[h].tolist()):
                val = None if not np.isfinite(score) else score
                lines.append(json.dumps({"layer": layer, "head": h, "position": pos, "score": val}))
        return lines


def init_partial(full: FullCache, scores_per_head: np.ndarray, k: int) -> PartialCache:
    """Build a partial cache from the top-k scored positions of each kv-head.

    scores_per_head: (n_kv_heads, len(full)) selection scores (already
    group-aggregated and pooled). Entries keep their score and ascending
    position order.
    """
    scores_per_head = np.asarray(scores_per_head, dtype=np.float64)
    n_heads = scores_per_head.shape[0]
    n = len(full)
    if scores_per_head.shape[1] != n:
        raise ContractViolation(
            f"score length {scores_per_head.shape[1]} != full-cache length {n}"
        )
    if k < 1 or k > n:
        raise ConfigurationError(f"partial-cache budget must satisfy 1 <= k <= {n}, got {k}")

    positions, keys, values, scores = [], [], [], []
    for h in range(n_heads):
        idx = top_k_indices(scores_per_head[h], k)
        positions.append(full.positions[idx].copy())
        keys.append(full.keys[idx, h].copy())
        values.append(full.values[idx, h].copy())
        scores.append(scores_per_head[h][idx].copy())
    return PartialCache(k, positions, keys, values, scores)


def append_and_evict(cp: PartialCache, position: int, k: np.ndarray, v: np.ndarray, evict: bool) -> PartialCache:
    """Append a fresh entry (NEW score); if evict is set, keep size <= capacity."""
    cp.append(position, k, v)
    if evict:
        cp.evict_overflow()
    return cp


def merge_pending(cf: FullCache, pending: PendingBuffer) -> FullCache:
    """Move pending entries into the full cache in position order; empty the buffer."""
    if len(pending) == 0:
        return cf
    pos = np.asarray(pending.positions, dtype=np.int64)
    if np.any(np.diff(pos) <= 0) or (len(cf) and pos[0] <= cf.max_position):
        raise ContractViolation("pending positions overlap or disorder the full cache")
    cf.positions = np.concatenate([cf.positions, pos])
    cf.keys = np.concatenate([cf.keys, np.stack(pending.keys)], axis=0)
    cf.values = np.concatenate([cf.values, np.stack(pending.values)], axis=0)
    pending.clear()
    return cf


def refresh(cp: PartialCache, cf: FullCache, scores_per_head: np.ndarray, k: int) -> PartialCache:
    """Rebuild the partial cache wholesale from the full cache's top-k.

    Previous contents, including NEW entries, are discarded unless the new
    scores re-select them.
    """
    del cp  # replaced wholesale
    return init_partial(cf, scores_per_head, k)
