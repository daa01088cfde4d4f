"""Command-line entry points for deployments, ablations, timing, inspection.

Exit codes: 0 on success, 2 on configuration errors, 3 when a run aborts
more episodes than its configured budget.
"""

from __future__ import annotations

import argparse
import json
import pathlib
import sys

from .errors import InvalidInputError
from .harness import (
    bench_timing,
    config_from_dict,
    format_memory_report,
    inspect_memory,
    load_config,
    run_ablation,
    run_deployment,
    write_ablation_csv,
    write_curve_csv,
    write_episode_records,
    write_summary_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTS = 3


def _cmd_deploy(args) -> int:
    config = load_config(args.config)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = run_deployment(config)
    write_episode_records(out / "episodes.jsonl", records)
    write_summary_csv(out / "summary.csv", records)
    write_curve_csv(out / "curve.csv", records)
    aborts = sum(1 for r in records if r.aborted)
    successes = sum(1 for r in records if r.true_success)
    print(f"episodes: {len(records)}  successes: {successes}  aborts: {aborts}")
    print(f"results in {out}")
    if aborts > config.abort_budget:
        print(f"aborted episodes ({aborts}) exceed budget ({config.abort_budget})",
              file=sys.stderr)
        return EXIT_ABORTS
    return EXIT_OK


def _cmd_ablate(args) -> int:
    try:
        with open(args.matrix) as fh:
            matrix = json.load(fh)
    except OSError as exc:
        raise InvalidInputError(f"cannot read matrix {args.matrix}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"matrix {args.matrix} is not valid JSON: {exc}") from exc
    if not isinstance(matrix, dict) or "base" not in matrix or "axes" not in matrix:
        raise InvalidInputError("matrix file needs 'base' and 'axes' objects")
    base = config_from_dict(matrix["base"])
    axes = matrix["axes"]
    if not isinstance(axes, dict) or not axes:
        raise InvalidInputError("'axes' must be a non-empty object of lists")
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(base, axes)
    write_ablation_csv(out / "summary.csv", rows)
    for row in rows:
        cell = "  ".join(f"{k}={v}" for k, v in row["cell"].items())
        print(f"{cell}  mean={row['mean']:.3f}  std={row['std']:.3f}")
    print(f"results in {out}")
    if any(row["aborted_episodes"] > base.abort_budget for row in rows):
        print("a cell exceeded the abort budget", file=sys.stderr)
        return EXIT_ABORTS
    return EXIT_OK


def _cmd_bench(args) -> int:
    config = load_config(args.config)
    report = bench_timing(config, n_decisions=args.decisions,
                          target_entries=args.entries)
    print(f"decisions: {report['n_decisions']}  "
          f"memory entries: {report['memory_entries']}")
    print(f"base:   {report['base_ms']:.3f} ms")
    print(f"guided: {report['guided_ms']:.3f} ms  ({report['guided_ratio']:.2f}x)")
    print(f"full:   {report['full_ms']:.3f} ms  ({report['full_ratio']:.2f}x)")
    if args.out:
        out = pathlib.Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "timing.json", "w") as fh:
            json.dump(report, fh, indent=2)
        print(f"report in {out / 'timing.json'}")
    return EXIT_OK


def _cmd_inspect(args) -> int:
    report = inspect_memory(args.snapshot)
    print(format_memory_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="memsteer",
        description="retrieve-then-steer deployment experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    deploy = sub.add_parser("deploy", help="run one deployment configuration")
    deploy.add_argument("--config", required=True, help="JSON deployment config")
    deploy.add_argument("--out", required=True, help="output directory")
    deploy.set_defaults(func=_cmd_deploy)

    ablate = sub.add_parser("ablate", help="run a sweep over config axes")
    ablate.add_argument("--matrix", required=True,
                        help="JSON file with 'base' config and 'axes' lists")
    ablate.add_argument("--out", required=True, help="output directory")
    ablate.set_defaults(func=_cmd_ablate)

    bench = sub.add_parser("bench", help="per-decision timing at full memory")
    bench.add_argument("--config", required=True, help="JSON deployment config")
    bench.add_argument("--out", default=None, help="optional output directory")
    bench.add_argument("--decisions", type=int, default=1000)
    bench.add_argument("--entries", type=int, default=3500)
    bench.set_defaults(func=_cmd_bench)

    inspect = sub.add_parser("inspect-memory", help="summarize a memory snapshot")
    inspect.add_argument("snapshot", help="snapshot file path")
    inspect.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
