"""Command-line interface.

Subcommands: run, compare, gen-chainkey, eval-chainkey, self-check.
`run` reads a JSON config document; any config field can be overridden
with a dotted flag mirroring the config key, e.g.

    kvrefresh run --config base.json --policy.kind refreshkv \
        --schedule.mode qc --schedule.qc-stride 5 --schedule.threshold 0.85

Exit codes: 0 success, 1 configuration error, 2 invariant violation,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, ContractViolation
from .harness import RunConfig, compare, format_comparison, run, self_check
from .tasks import ChainKeyInstance, evaluate_chain, generate_chain_instance

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INVARIANT = 2
EXIT_IO = 3


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply --a.b-c VALUE pairs onto a nested config dict."""
    i = 0
    while i < len(overrides):
        flag = overrides[i]
        if not flag.startswith("--") or flag == "--":
            raise ConfigurationError(f"unrecognized argument {flag!r}")
        if "=" in flag:
            flag, raw = flag.split("=", 1)
        else:
            i += 1
            if i >= len(overrides):
                raise ConfigurationError(f"missing value for {flag!r}")
            raw = overrides[i]
        path = [part.replace("-", "_") for part in flag[2:].split(".")]
        node = config
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot override non-section {part!r} in {flag!r}")
        node[path[-1]] = _parse_override_value(raw)
        i += 1
    return config


def _cmd_run(args: argparse.Namespace, overrides: list[str]) -> int:
    config_dict: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            config_dict = json.load(f)
    _apply_overrides(config_dict, overrides)
    config = RunConfig.from_dict(config_dict)
    summary = run(config, out_dir=args.out)
    result = summary["result"]
    metric = result.get("perplexity", result.get("chain_score"))
    print(f"task={summary['task']} policy={config.policy.kind} metric={metric:.6g} "
          f"steps={summary['n_steps']} bytes={summary['totals']['kv_bytes_moved']}")
    print(f"artifacts in {args.out or config.out_dir}")
    if args.self_check:
        return _run_self_check(config.model.seed)
    return EXIT_OK


def _run_self_check(seed: int) -> int:
    ok = True
    for name, passed, detail in self_check(seed):
        print(f"[{'PASS' if passed else 'FAIL'}] {name} ({detail})")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_INVARIANT


def _cmd_compare(args: argparse.Namespace) -> int:
    report = compare(args.run_dirs, nll_csv=args.nll_csv)
    print(format_comparison(report))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        print(f"comparison written to {args.out}")
    if args.nll_csv:
        print(f"per-step NLL table written to {args.nll_csv}")
    return EXIT_OK


def _cmd_gen_chainkey(args: argparse.Namespace) -> int:
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i in range(args.count):
            instance = generate_chain_instance(
                args.n_keys, args.words_per_key, args.chain_length, args.seed + i
            )
            obj = json.loads(instance.to_json())
            obj["instance_id"] = i
            sink.write(json.dumps(obj, sort_keys=True) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def _cmd_eval_chainkey(args: argparse.Namespace) -> int:
    instances: dict[int, ChainKeyInstance] = {}
    with open(args.instances, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            instances[int(obj.get("instance_id", obj["seed"]))] = ChainKeyInstance.from_json(line)
    sink = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        with open(args.outputs, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                obj = json.loads(line)
                iid = int(obj["instance_id"])
                if iid not in instances:
                    raise ConfigurationError(f"output references unknown instance_id {iid}")
                score = evaluate_chain(instances[iid], obj["output_text"])
                sink.write(json.dumps({"instance_id": iid, "score": score.score}) + "\n")
    finally:
        if sink is not sys.stdout:
            sink.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvrefresh", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment run")
    p_run.add_argument("--config", help="JSON run-config document")
    p_run.add_argument("--out", help="output directory (overrides config out_dir)")
    p_run.add_argument("--self-check", action="store_true", help="validate the equivalence ladder after the run")

    p_cmp = sub.add_parser("compare", help="compare finished runs")
    p_cmp.add_argument("run_dirs", nargs="+", help="run output directories")
    p_cmp.add_argument("--out", help="write comparison JSON here")
    p_cmp.add_argument("--nll-csv", help="write per-step NLL ratio CSV here (lm runs)")

    p_gen = sub.add_parser("gen-chainkey", help="emit chain-of-key instances as JSON lines")
    p_gen.add_argument("--count", type=int, default=1)
    p_gen.add_argument("--n-keys", type=int, default=32)
    p_gen.add_argument("--words-per-key", type=int, default=2)
    p_gen.add_argument("--chain-length", type=int, default=10)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", help="output path (default stdout)")

    p_eval = sub.add_parser("eval-chainkey", help="score model outputs against instances")
    p_eval.add_argument("--instances", required=True, help="JSON-lines instance file")
    p_eval.add_argument("--outputs", required=True, help="JSON-lines {instance_id, output_text}")
    p_eval.add_argument("--out", help="output path (default stdout)")

    p_check = sub.add_parser("self-check", help="run the equivalence ladder")
    p_check.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args, overrides)
        if overrides:
            raise ConfigurationError(f"unrecognized arguments: {overrides}")
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "gen-chainkey":
            return _cmd_gen_chainkey(args)
        if args.command == "eval-chainkey":
            return _cmd_eval_chainkey(args)
        if args.command == "self-check":
            return _run_self_check(args.seed)
        raise ConfigurationError(f"unknown command {args.command!r}")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    raise SystemExit(main())
