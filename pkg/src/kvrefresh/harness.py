"""Experiment runner: bind a model, a policy, a schedule, and a task.

A run is fully described by its RunConfig and reproducible from it alone:
the same config and build produce byte-identical trace files. Artifacts
per run: trace.jsonl (one StepRecord per generated step) and summary.json
(config echo, result metric, exact cost totals, per-layer effective
strides; wall-clock is reported for orientation but never asserted on).

compare() lines several run summaries up against the vanilla baseline and,
for language-model runs, emits a per-step negative-log-likelihood ratio
CSV over generation steps (the divergence view of partial-cache policies
against full attention).
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .engine import greedy_generate, teacher_forced_run
from .errors import ConfigurationError
from .metrics import StepRecord, nll_to_perplexity, per_layer_effective_strides, trace_totals
from .model import ModelConfig, canonical_config, init_model
from .policies import PolicyConfig
from .scheduler import ScheduleConfig
from .tasks import (
    decode_tokens,
    encode_text,
    evaluate_chain,
    generate_chain_instance,
    synthetic_lm_stream,
)

TASKS = ("lm", "chainkey")


@dataclass(frozen=True)
class TaskConfig:
    stream_length: int = 512  # lm: total stream tokens
    tail: int = 128  # lm: scored tail length
    structure: str = "repeated_motif"  # lm: uniform | repeated_motif
    motif_period: int = 64
    n_keys: int = 32  # chainkey
    chain_length: int = 8  # chainkey
    words_per_key: int = 2  # chainkey


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=canonical_config)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    task: str = "lm"
    task_params: TaskConfig = field(default_factory=TaskConfig)
    n_generate: int = 64  # chainkey: decode steps; lm runs use task_params.tail
    seed: int = 0  # task-level seed (streams / instances)
    out_dir: str = "runs/out"

    def validate(self) -> None:
        self.model.validate()
        self.policy.validate()
        self.schedule.validate()
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}")
        tp = self.task_params
        if self.task == "lm":
            if not 1 <= tp.tail < tp.stream_length:
                raise ConfigurationError(
                    f"need 1 <= tail < stream_length, got tail={tp.tail} stream_length={tp.stream_length}"
                )
            if tp.stream_length - tp.tail > self.model.max_position:
                raise ConfigurationError("stream prefix exceeds max_position")
        else:
            if self.n_generate < 1:
                raise ConfigurationError(f"n_generate must be positive, got {self.n_generate}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        return cls(
            model=ModelConfig(**obj.get("model", {})),
            policy=PolicyConfig(**obj.get("policy", {})),
            schedule=ScheduleConfig(**obj.get("schedule", {})),
            task=obj.get("task", "lm"),
            task_params=TaskConfig(**obj.get("task_params", {})),
            n_generate=obj.get("n_generate", 64),
            seed=obj.get("seed", 0),
            out_dir=obj.get("out_dir", "runs/out"),
        )


def run(config: RunConfig, out_dir: str | None = None) -> dict:
    """Execute one run and write trace.jsonl plus summary.json."""
    config.validate()
    target = Path(out_dir if out_dir is not None else config.out_dir)
    weights = init_model(config.model)
    tp = config.task_params

    started = time.perf_counter()
    if config.task == "lm":
        stream = synthetic_lm_stream(
            tp.stream_length, config.model.vocab_size, config.seed, tp.structure, tp.motif_period
        )
        nlls, trace = teacher_forced_run(
            weights, config.policy, config.schedule, stream.tolist(), tp.tail
        )
        result = {"perplexity": nll_to_perplexity(nlls), "scored_tokens": len(nlls)}
    else:
        instance = generate_chain_instance(tp.n_keys, tp.words_per_key, tp.chain_length, config.seed)
        prompt_tokens = encode_text(instance.prompt)
        if len(prompt_tokens) > config.model.max_position:
            raise ConfigurationError(
                f"prompt needs {len(prompt_tokens)} positions, model allows {config.model.max_position}"
            )
        generated, trace, _ = greedy_generate(
            weights, config.policy, config.schedule, prompt_tokens, config.n_generate
        )
        output_text = decode_tokens(generated)
        chain_score = evaluate_chain(instance, output_text)
        result = {
            "chain_score": chain_score.score,
            "valid_prefix_length": chain_score.valid_prefix_length,
            "output_text": output_text,
        }
    elapsed = time.perf_counter() - started

    strides = per_layer_effective_strides(trace, config.model.n_layers)
    present = [s for s in strides if s is not None]
    summary = {
        "config": config.to_dict(),
        "task": config.task,
        "result": result,
        "totals": trace_totals(trace),
        "effective_strides": strides,
        "effective_stride_mean": (float(np.mean(present)) if present else None),
        "n_steps": len(trace),
        "wall_clock_seconds": elapsed,
    }

    target.mkdir(parents=True, exist_ok=True)
    with open(target / "trace.jsonl", "w", encoding="utf-8") as f:
        for rec in trace:
            f.write(rec.to_json() + "\n")
    with open(target / "summary.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True, indent=2)
        f.write("\n")
    return summary


def load_summary(run_dir: str | Path) -> dict:
    with open(Path(run_dir) / "summary.json", encoding="utf-8") as f:
        return json.load(f)


def load_trace(run_dir: str | Path) -> list[StepRecord]:
    with open(Path(run_dir) / "trace.jsonl", encoding="utf-8") as f:
        return [StepRecord.from_json(line) for line in f if line.strip()]


def compare(run_dirs: Sequence[str | Path], nll_csv: str | Path | None = None) -> dict:
    """Side-by-side comparison of runs over the same task and seed.

    Ratios are against the vanilla run when one is present, otherwise
    against the first run. For language-model runs a per-step NLL table
    (with ratio-to-baseline columns) can be written as CSV.
    """
    if len(run_dirs) < 1:
        raise ConfigurationError("compare needs at least one run directory")
    summaries = [load_summary(d) for d in run_dirs]

    tasks = {s["task"] for s in summaries}
    seeds = {s["config"]["seed"] for s in summaries}
    if len(tasks) > 1 or len(seeds) > 1:
        raise ConfigurationError(
            f"runs are not comparable: tasks={sorted(tasks)} seeds={sorted(seeds)}; "
            "compare runs over the same task and task seed"
        )

    baseline_idx = 0
    for i, s in enumerate(summaries):
        if s["config"]["policy"]["kind"] == "vanilla":
            baseline_idx = i
            break
    base = summaries[baseline_idx]

    def metric_of(summary: dict) -> float:
        r = summary["result"]
        return r["perplexity"] if summary["task"] == "lm" else r["chain_score"]

    def ratio(x: float, y: float) -> float | None:
        return None if y == 0 else x / y

    rows = []
    for d, s in zip(run_dirs, summaries):
        rows.append(
            {
                "run_dir": str(d),
                "policy": s["config"]["policy"]["kind"],
                "schedule": s["config"]["schedule"]["mode"],
                "metric": metric_of(s),
                "attention_flops": s["totals"]["attention_flops"],
                "kv_bytes_moved": s["totals"]["kv_bytes_moved"],
                "overhead_flops": s["totals"]["overhead_flops"],
                "effective_stride_mean": s["effective_stride_mean"],
                "metric_ratio_to_baseline": ratio(metric_of(s), metric_of(base)),
                "flops_ratio_to_baseline": ratio(
                    s["totals"]["attention_flops"], base["totals"]["attention_flops"]
                ),
                "bytes_ratio_to_baseline": ratio(
                    s["totals"]["kv_bytes_moved"], base["totals"]["kv_bytes_moved"]
                ),
            }
        )
    report = {"baseline": str(run_dirs[baseline_idx]), "task": summaries[0]["task"], "rows": rows}

    if nll_csv is not None:
        if summaries[0]["task"] != "lm":
            raise ConfigurationError("per-step NLL curves exist only for lm runs")
        traces = [load_trace(d) for d in run_dirs]
        n = min(len(t) for t in traces)
        names = [r["policy"] for r in rows]
        base_trace = traces[baseline_idx]
        with open(nll_csv, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            header = ["step"]
            header += [f"nll_{name}" for name in names]
            header += [f"nll_ratio_{name}" for name in names]
            writer.writerow(header)
            for i in range(n):
                row: list = [traces[0][i].step_index]
                row += [t[i].nll for t in traces]
                base_nll = base_trace[i].nll
                row += [
                    (t[i].nll / base_nll if base_nll not in (None, 0) and t[i].nll is not None else "")
                    for t in traces
                ]
                writer.writerow(row)
    return report


def format_comparison(report: dict) -> str:
    headers = ["policy", "schedule", "metric", "flops", "bytes", "metric/base", "bytes/base"]
    lines = ["  ".join(f"{h:>14}" for h in headers)]
    for r in report["rows"]:
        cells = [
            r["policy"],
            r["schedule"],
            f"{r['metric']:.6g}",
            str(r["attention_flops"]),
            str(r["kv_bytes_moved"]),
            "-" if r["metric_ratio_to_baseline"] is None else f"{r['metric_ratio_to_baseline']:.4f}",
            "-" if r["bytes_ratio_to_baseline"] is None else f"{r['bytes_ratio_to_baseline']:.4f}",
        ]
        lines.append("  ".join(f"{c:>14}" for c in cells))
    return "\n".join(lines)


def self_check(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Run the policy-equivalence ladder and core store invariants.

    Uses a small prompt so the whole check stays fast; returns one
    (name, passed, detail) row per check.
    """
    from .engine import DecodeSession  # local import to keep module load light

    cfg = canonical_config(seed=seed)
    weights = init_model(cfg)
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, cfg.vocab_size, size=48).tolist()
    L, N = len(prompt), 24
    results: list[tuple[str, bool, str]] = []

    def logits_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
        return all(
            np.allclose(x, y, rtol=1e-9, atol=0.0) for x, y in zip(a, b)
        )

    ids_v, _, logits_v = greedy_generate(weights, PolicyConfig(kind="vanilla"), None, prompt, N)

    ids_a, _, logits_a = greedy_generate(
        weights, PolicyConfig(kind="refreshkv", k=L), ScheduleConfig(mode="always_full"), prompt, N
    )
    results.append(
        (
            "refreshkv(k=L, always_full) == vanilla",
            ids_a == ids_v and logits_equal(logits_a, logits_v),
            f"tokens {'match' if ids_a == ids_v else 'differ'}",
        )
    )

    ids_s, _, logits_s = greedy_generate(weights, PolicyConfig(kind="snapkv", k=12), None, prompt, N)
    ids_b, _, logits_b = greedy_generate(
        weights,
        PolicyConfig(kind="refreshkv", k=12, evict_on_append=False),
        ScheduleConfig(mode="never_full"),
        prompt,
        N,
    )
    results.append(
        (
            "refreshkv(never_full, no evict) == snapkv",
            ids_b == ids_s and logits_equal(logits_b, logits_s),
            f"tokens {'match' if ids_b == ids_s else 'differ'}",
        )
    )

    for kind in ("streaming", "h2o"):
        ids_c, _, logits_c = greedy_generate(
            weights, PolicyConfig(kind=kind, k=L + N), None, prompt, N
        )
        results.append(
            (
                f"{kind}(k >= L+N) == vanilla",
                ids_c == ids_v and logits_equal(logits_c, logits_v),
                f"tokens {'match' if ids_c == ids_v else 'differ'}",
            )
        )

    session = DecodeSession(
        weights, PolicyConfig(kind="refreshkv", k=12), ScheduleConfig(mode="fixed", stride=5)
    )
    out = session.prefill(prompt)
    token = int(np.argmax(out.logits))
    for _ in range(N):
        out, _ = session.step(token)
        token = int(np.argmax(out.logits))
    session.finish()
    cf_ok = all(len(session.full[layer]) == L + N for layer in range(cfg.n_layers))
    cp_ok = all(
        size == session.k_sel for layer in range(cfg.n_layers) for size in session.partial[layer].sizes()
    )
    results.append(("full cache holds L+N entries after the run", cf_ok, f"L+N={L + N}"))
    results.append(("partial cache is exactly k after the run", cp_ok, f"k={session.k_sel}"))
    return results
