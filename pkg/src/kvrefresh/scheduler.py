"""Per-layer scheduling of full-attention steps.

Two real modes plus two diagnostic constants:

  fixed       full attention every stride-th generated step, all layers
  qc          at every qc_stride-th step, compare the layer's group-averaged
              query against the one from its most recent full step; run full
              attention only when the cosine similarity falls below the
              threshold
  always_full / never_full   constants, used by equivalence checks

Step indices start at 1 for the first generated token, so fixed stride S
fires first at step S. The prefill counts as the initial full-attention
event for reference-query purposes but is excluded from effective-stride
denominators, which cover the generation phase only. A similarity exactly
equal to the threshold decodes with the partial cache.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .numerics import cosine_similarity

SCHEDULE_MODES = ("fixed", "qc", "always_full", "never_full")


@dataclass(frozen=True)
class ScheduleConfig:
    mode: str = "fixed"
    stride: int = 10
    qc_stride: int = 10
    threshold: float = 0.85

    def validate(self) -> None:
        if self.mode not in SCHEDULE_MODES:
            raise ConfigurationError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "fixed" and self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if self.mode == "qc" and self.qc_stride < 1:
            raise ConfigurationError(f"qc_stride must be positive, got {self.qc_stride}")
        # thresholds outside [-1, 1] are legal diagnostics: above 1 forces a
        # full step at every boundary, at/below -1 never fires


@dataclass
class LayerScheduleState:
    """Per-layer scheduler memory; the reference query comes from the
    layer's most recent full-attention step (initially the prefill)."""

    reference_query: np.ndarray
    full_step_count: int = 0  # generation-phase full-attention events
    generated_step_count: int = 0


def should_full(
    state: LayerScheduleState, step_index: int, current_query: np.ndarray, config: ScheduleConfig
) -> bool:
    """Decide whether this layer runs full attention at this generated step.

    Pure function of its arguments; replaying a trace reproduces the same
    decisions bit for bit.
    """
    if config.mode == "always_full":
        return True
    if config.mode == "never_full":
        return False
    if config.mode == "fixed":
        return step_index % config.stride == 0
    # qc: only evaluated on the stride boundary, strict "<" so a tie keeps
    # the partial cache.
    if step_index % config.qc_stride != 0:
        return False
    return cosine_similarity(current_query, state.reference_query) < config.threshold


def replay_decisions(similarities: list[float | None], qc_stride: int, threshold: float) -> list[bool]:
    """Re-run qc decisions over a recorded per-step similarity sequence.

    Entry i corresponds to generated step i+1; None marks steps where no
    similarity was evaluated (off the qc boundary).
    """
    out = []
    for i, sim in enumerate(similarities):
        step = i + 1
        if step % qc_stride != 0 or sim is None:
            out.append(False)
        else:
            out.append(sim < threshold)
    return out


def effective_stride(full_events: int, generated_steps: int) -> float | None:
    """Generated steps divided by generation-phase full-attention events.

    None when the layer never ran full attention during generation.
    """
    if full_events == 0:
        return None
    return generated_steps / full_events


def effective_stride_from_trace(trace, layer: int) -> float | None:
    """Effective stride of one layer over a sequence of step records.

    Accepts any sequence of records exposing per-layer `modes`; the prefill
    is not part of the trace and therefore not counted.
    """
    full_events = sum(1 for rec in trace if rec.modes[layer] == "full")
    return effective_stride(full_events, len(trace))
