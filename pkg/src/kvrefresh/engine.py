"""Decode sessions: one model + one cache policy + one schedule.

A session owns the per-layer stores (full cache, partial cache, pending
buffer, policy state) for a single decode run. Step flow:

  1. the model computes the current token's queries and fresh key/value
     per layer and asks the session for that layer's attention view;
  2. for the refresh family the session consults the scheduler with the
     layer's group-averaged query, merging pending entries into the full
     cache when a full step fires;
  3. attention runs over the view plus the current token;
  4. after the forward pass the session routes the fresh key/value into
     the right stores, applies evictions/refreshes using the observed
     probability rows, and emits an exact-cost StepRecord.

Sessions are single-threaded; distinct sessions never share state and may
run on distinct threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .kv_store import (
    FullCache,
    PartialCache,
    PendingBuffer,
    append_and_evict,
    merge_pending,
    refresh,
)
from .metrics import (
    StepRecord,
    h2o_overhead_flops,
    layer_attention_cost,
    qc_overhead_flops,
    retained_mass,
    score_pass_flops,
    selection_overhead_flops,
)
from .model import LayerView, ModelWeights, StepOutput, decode_core, prefill as model_prefill
from .numerics import cosine_similarity, softmax_rows
from .policies import (
    H2OState,
    PolicyConfig,
    REFRESH_FAMILY,
    aggregate_group_scores,
    selection_scores,
    snapkv_prefill_select,
    streaming_keepset,
)
from .scheduler import LayerScheduleState, ScheduleConfig, should_full

Recorder = Callable[[dict], None]


class DecodeSession:
    def __init__(
        self,
        weights: ModelWeights,
        policy: PolicyConfig,
        schedule: ScheduleConfig | None = None,
        recorder: Recorder | None = None,
    ):
        policy.validate()
        self.schedule = schedule or ScheduleConfig()
        self.schedule.validate()
        weights.config.validate()
        self.weights = weights
        self.cfg = weights.config
        self.policy = policy
        self.recorder = recorder

        self.input_length: int | None = None
        self.step_index = 0
        self.budget = 0
        self.k_sel = 0  # selection budget, clamped to the prompt length

        self.full: list[FullCache] = []
        self.partial: list[PartialCache] = []
        self.pending: list[PendingBuffer] = []
        self.layer_states: list[LayerScheduleState] = []
        self.h2o: list[H2OState] = []
        self._scratch: list[dict] = []

    # ------------------------------------------------------------------ setup

    def prefill(self, tokens: Sequence[int]) -> StepOutput:
        if self.input_length is not None:
            raise ContractViolation("session already prefilled")
        self.full, out = model_prefill(self.weights, tokens, observe_scores=True)
        L = len(tokens)
        self.input_length = L
        self.budget = self.policy.resolve_budget(L)
        self.k_sel = min(self.budget, L)

        kind = self.policy.kind
        if kind == "streaming":
            if self.budget < self.policy.n_sink:
                raise ConfigurationError(
                    f"streaming budget {self.budget} smaller than n_sink {self.policy.n_sink}"
                )
        elif kind == "h2o":
            for layer in range(self.cfg.n_layers):
                row = aggregate_group_scores(
                    np.vstack(out.attn_rows[layer]), self.policy.gqa_aggregation
                )
                self.h2o.append(H2OState.from_prefill(row, self.budget))
        elif kind == "snapkv" or kind in REFRESH_FAMILY:
            for layer in range(self.cfg.n_layers):
                self.partial.append(
                    snapkv_prefill_select(out.attn_rows[layer], self.full[layer], self.policy, self.k_sel)
                )
            if kind in REFRESH_FAMILY:
                self.pending = [PendingBuffer() for _ in range(self.cfg.n_layers)]
                self.layer_states = [
                    LayerScheduleState(reference_query=out.avg_queries[layer].copy())
                    for layer in range(self.cfg.n_layers)
                ]
        return out

    # ------------------------------------------------------------------- step

    def step(self, token: int) -> tuple[StepOutput, StepRecord]:
        if self.input_length is None:
            raise ContractViolation("prefill the session before stepping")
        self.step_index += 1
        position = self.input_length + self.step_index - 1
        self._scratch = [{} for _ in range(self.cfg.n_layers)]
        out = decode_core(self.weights, token, position, self._provide_view)
        record = self._post_step(out, token, position)
        return out, record

    def finish(self) -> None:
        """Merge any outstanding pending entries (end-of-run flush)."""
        for layer in range(self.cfg.n_layers):
            if self.pending and len(self.pending[layer]):
                merge_pending(self.full[layer], self.pending[layer])

    # ------------------------------------------------------------- view logic

    def _provide_view(
        self, layer: int, q: np.ndarray, avg_q: np.ndarray, k_new: np.ndarray, v_new: np.ndarray
    ) -> LayerView:
        sc = self._scratch[layer]
        sc.update(k_new=k_new, v_new=v_new, avg_q=avg_q.copy(), sim=None, handled=False)
        kind = self.policy.kind

        if kind == "vanilla":
            return self._full_view(layer, sc, observe=False)
        if kind == "streaming":
            keep = streaming_keepset(self.input_length, self.step_index - 1, self.policy, self.budget)
            return self._gather_view(layer, keep, sc, observe=False)
        if kind == "h2o":
            keep = self.h2o[layer].keepset()
            sc["view_positions"] = keep
            return self._gather_view(layer, keep, sc, observe=True)
        if kind == "snapkv":
            return self._partial_view(layer, sc, observe=False)

        # refresh family
        state = self.layer_states[layer]
        if self.schedule.mode == "qc" and self.step_index % self.schedule.qc_stride == 0:
            sc["sim"] = cosine_similarity(avg_q, state.reference_query)
        if not should_full(state, self.step_index, avg_q, self.schedule):
            return self._partial_view(layer, sc, observe=False)

        merge_pending(self.full[layer], self.pending[layer])
        if kind == "refreshkv":
            return self._full_view(layer, sc, observe=True)
        if kind == "refreshkv_no_refresh":
            return self._full_view(layer, sc, observe=False)

        # refreshkv_no_full: score the full cache, refresh the partial cache,
        # then produce this step's output from the refreshed partial cache.
        position = self.input_length + self.step_index - 1
        self.full[layer].append(position, k_new, v_new)
        rows = self._score_rows(layer, q)
        sel = selection_scores(rows, self.policy)
        pre_positions = [p.copy() for p in self.partial[layer].positions]
        self.partial[layer] = refresh(self.partial[layer], self.full[layer], sel, self.k_sel)
        sc.update(mode="full", handled=True, rows=rows, selection=sel, pre_positions=pre_positions)
        cp = self.partial[layer]
        keys = [cp.keys[h] for h in range(cp.n_heads)]
        values = [cp.values[h] for h in range(cp.n_heads)]
        positions = [cp.positions[h] for h in range(cp.n_heads)]
        sc["view_len"] = cp.size(0)
        self._record_view(layer, positions)
        return LayerView(keys, values, positions, include_self=False, observe=False, mode="full")

    def _score_rows(self, layer: int, q: np.ndarray) -> list[np.ndarray]:
        """Probability rows of the current queries over the full cache."""
        scale = 1.0 / np.sqrt(self.cfg.head_dim)
        rows = []
        for h in range(self.cfg.n_kv_heads):
            keys_h = self.full[layer].keys[:, h]
            q_group = q[h * self.cfg.group_size : (h + 1) * self.cfg.group_size]
            rows.append(softmax_rows(q_group @ keys_h.T * scale))
        return rows

    def _full_view(self, layer: int, sc: dict, observe: bool) -> LayerView:
        cf = self.full[layer]
        sc["mode"] = "full"
        sc["view_len"] = len(cf) + 1
        keys = [cf.keys[:, h] for h in range(self.cfg.n_kv_heads)]
        values = [cf.values[:, h] for h in range(self.cfg.n_kv_heads)]
        positions = [cf.positions for _ in range(self.cfg.n_kv_heads)]
        self._record_view(layer, positions, include_self=True)
        return LayerView(keys, values, positions, include_self=True, observe=observe, mode="full")

    def _gather_view(self, layer: int, keep: np.ndarray, sc: dict, observe: bool) -> LayerView:
        cf = self.full[layer]
        # positions are contiguous from 0, so keepset positions index directly
        pos, keys, values = cf.gather(keep)
        sc["mode"] = "partial"
        sc["view_len"] = int(keep.size) + 1
        per_k = [keys[:, h] for h in range(self.cfg.n_kv_heads)]
        per_v = [values[:, h] for h in range(self.cfg.n_kv_heads)]
        per_p = [pos for _ in range(self.cfg.n_kv_heads)]
        self._record_view(layer, per_p, include_self=True)
        return LayerView(per_k, per_v, per_p, include_self=True, observe=observe, mode="partial")

    def _partial_view(self, layer: int, sc: dict, observe: bool) -> LayerView:
        cp = self.partial[layer]
        if cp.size(0) == 0:
            raise ContractViolation(f"layer {layer}: empty partial cache")
        sc["mode"] = "partial"
        sc["view_len"] = cp.size(0) + 1
        keys = [cp.keys[h] for h in range(cp.n_heads)]
        values = [cp.values[h] for h in range(cp.n_heads)]
        positions = [cp.positions[h] for h in range(cp.n_heads)]
        self._record_view(layer, positions, include_self=True)
        return LayerView(keys, values, positions, include_self=True, observe=observe, mode="partial")

    def _record_view(self, layer: int, positions_per_head: list[np.ndarray], include_self: bool = False) -> None:
        if self.recorder is None:
            return
        current = self.input_length + self.step_index - 1
        per_head = [
            np.append(p, current) if include_self else p.copy() for p in positions_per_head
        ]
        self.recorder(
            {"kind": "view", "step": self.step_index, "layer": layer, "positions": per_head}
        )

    # ------------------------------------------------------------ post update

    def _post_step(self, out: StepOutput, token: int, position: int) -> StepRecord:
        kind = self.policy.kind
        evict = self.policy.resolved_evict_on_append()
        modes: list[str] = []
        attended: list[int] = []
        view_lens: list[int] = []
        sims: list[float | None] = []
        overhead = 0
        retained_values: list[float] = []

        for layer in range(self.cfg.n_layers):
            sc = self._scratch[layer]
            mode = sc["mode"]
            k_new, v_new = sc["k_new"], sc["v_new"]

            if kind in ("vanilla", "streaming"):
                self.full[layer].append(position, k_new, v_new)
            elif kind == "h2o":
                self.full[layer].append(position, k_new, v_new)
                rows_all = np.vstack(out.attn_rows[layer])
                row = aggregate_group_scores(rows_all, self.policy.gqa_aggregation)
                view_positions = np.append(sc["view_positions"], position)
                keepset = self.h2o[layer].step(row, view_positions)
                overhead += h2o_overhead_flops(row.size, self.cfg)
                if self.recorder is not None:
                    self.recorder(
                        {
                            "kind": "h2o",
                            "step": self.step_index,
                            "layer": layer,
                            "raw_rows": [r.copy() for r in out.attn_rows[layer]],
                            "row": row,
                            "view_positions": view_positions,
                            "keepset": keepset,
                        }
                    )
            elif kind == "snapkv":
                append_and_evict(self.partial[layer], position, k_new, v_new, evict)
            else:
                self._post_step_refresh_family(out, layer, position, sc, evict, retained_values)
                if sc["mode"] == "full":
                    m = len(self.full[layer])
                    if kind == "refreshkv":
                        overhead += selection_overhead_flops(m, self.cfg, self.policy.kernel_size)
                    elif kind == "refreshkv_no_full":
                        overhead += score_pass_flops(m, self.cfg)
                        overhead += selection_overhead_flops(m, self.cfg, self.policy.kernel_size)
                if sc["sim"] is not None:
                    overhead += qc_overhead_flops(self.cfg)

            modes.append(mode)
            attended.append(self.input_length if mode == "full" and kind != "refreshkv_no_full" else self.k_sel)
            view_lens.append(sc["view_len"])
            sims.append(sc["sim"])

        flops = 0
        nbytes = 0
        for a in attended:
            f, b = layer_attention_cost(a, self.cfg)
            flops += f
            nbytes += b

        return StepRecord(
            step_index=self.step_index,
            token_id=int(token),
            modes=modes,
            attended=attended,
            view_lens=view_lens,
            attention_flops=flops,
            kv_bytes_moved=nbytes,
            overhead_flops=overhead,
            similarities=sims,
            retained_mass=(float(np.mean(retained_values)) if retained_values else None),
        )

    def _post_step_refresh_family(
        self,
        out: StepOutput,
        layer: int,
        position: int,
        sc: dict,
        evict: bool,
        retained_values: list[float],
    ) -> None:
        kind = self.policy.kind
        state = self.layer_states[layer]
        state.generated_step_count += 1
        k_new, v_new = sc["k_new"], sc["v_new"]

        if sc["mode"] == "partial":
            append_and_evict(self.partial[layer], position, k_new, v_new, evict)
            self.pending[layer].append(position, k_new, v_new)
            return

        state.full_step_count += 1
        state.reference_query = sc["avg_q"]

        if kind == "refreshkv_no_refresh":
            self.full[layer].append(position, k_new, v_new)
            return

        if kind == "refreshkv":
            self.full[layer].append(position, k_new, v_new)
            rows = out.attn_rows[layer]
            if rows is None or rows[0].shape[1] != len(self.full[layer]):
                raise ContractViolation("full-step observation rows missing or misaligned")
            sel = selection_scores(rows, self.policy)
            pre_positions = [p.copy() for p in self.partial[layer].positions]
            self.partial[layer] = refresh(self.partial[layer], self.full[layer], sel, self.k_sel)
        else:  # refreshkv_no_full: refresh already applied pre-attention
            rows = sc["rows"]
            sel = sc["selection"]
            pre_positions = sc["pre_positions"]

        post_positions = [p.copy() for p in self.partial[layer].positions]
        pre_retained, post_retained = [], []
        for h in range(self.cfg.n_kv_heads):
            norm = sel[h].sum()
            row_norm = sel[h] / norm if norm > 0 else sel[h]
            pre_retained.append(retained_mass(row_norm, pre_positions[h]))
            post_retained.append(retained_mass(row_norm, post_positions[h]))
        retained_values.extend(post_retained)

        if self.recorder is not None:
            self.recorder(
                {
                    "kind": "refresh",
                    "step": self.step_index,
                    "layer": layer,
                    "rows": [r.copy() for r in rows],
                    "selection": sel.copy(),
                    "k": self.k_sel,
                    "pre_positions": pre_positions,
                    "post_positions": post_positions,
                    "pre_retained": pre_retained,
                    "post_retained": post_retained,
                }
            )


# --------------------------------------------------------------------- loops


def greedy_generate(
    weights: ModelWeights,
    policy: PolicyConfig,
    schedule: ScheduleConfig | None,
    prompt: Sequence[int],
    n_steps: int,
    recorder: Recorder | None = None,
) -> tuple[list[int], list[StepRecord], list[np.ndarray]]:
    """Prefill then greedily decode for n_steps.

    Returns (generated token ids, trace, per-step logits). The first token
    comes from the prefill logits; logits[0] is the prefill output and
    logits[i] the output of step i, so len(logits) == n_steps + 1.
    """
    session = DecodeSession(weights, policy, schedule, recorder)
    out = session.prefill(prompt)
    all_logits = [out.logits.copy()]
    next_token = int(np.argmax(out.logits))
    generated: list[int] = []
    trace: list[StepRecord] = []
    for i in range(n_steps):
        generated.append(next_token)
        try:
            out, rec = session.step(next_token)
        except ContractViolation as exc:
            raise ContractViolation(f"aborted at step {i + 1}: {exc}") from exc
        trace.append(rec)
        all_logits.append(out.logits.copy())
        next_token = int(np.argmax(out.logits))
    session.finish()
    return generated, trace, all_logits


def teacher_forced_run(
    weights: ModelWeights,
    policy: PolicyConfig,
    schedule: ScheduleConfig | None,
    tokens: Sequence[int],
    tail: int,
    recorder: Recorder | None = None,
) -> tuple[list[float], list[StepRecord]]:
    """Score the last `tail` tokens of a stream under a policy's cache.

    The head of the stream is prefilled; every tail token is then predicted
    and fed back teacher-forced. Returns per-token negative log-likelihoods
    (length tail) and the step trace (length tail - 1).
    """
    if tail < 1 or tail >= len(tokens):
        raise ConfigurationError(f"tail must satisfy 1 <= tail < {len(tokens)}, got {tail}")
    prefix = list(tokens[: len(tokens) - tail])
    evaluated = list(tokens[len(tokens) - tail :])

    session = DecodeSession(weights, policy, schedule, recorder)
    out = session.prefill(prefix)
    nlls = [nll_from_logits(out.logits, evaluated[0])]
    trace: list[StepRecord] = []
    for i in range(tail - 1):
        try:
            out, rec = session.step(evaluated[i])
        except ContractViolation as exc:
            raise ContractViolation(f"aborted at step {i + 1}: {exc}") from exc
        nll = nll_from_logits(out.logits, evaluated[i + 1])
        rec.nll = nll
        nlls.append(nll)
        trace.append(rec)
    session.finish()
    return nlls, trace


def nll_from_logits(logits: np.ndarray, target: int) -> float:
    """Stable negative log-likelihood of one target token."""
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[int(target)])
