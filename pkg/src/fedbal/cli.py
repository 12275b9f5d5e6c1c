"""Command-line front end: run one experiment, sweep seeds, compare run outputs.

Exit codes: 0 for a feasible run, 2 when the time budget was breached, 1 on
any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .errors import FedbalError
from .harness import RunConfig, emit_outputs, run_experiment


def _parse_seed_range(text: str) -> range:
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            return range(int(lo), int(hi) + 1)
        value = int(text)
        return range(value, value + 1)
    except ValueError as e:
        raise FedbalError(f"bad seed range {text!r}; expected e.g. 0..4") from e


def _run_one(cfg: RunConfig, out_dir: Path) -> dict:
    summary, log = run_experiment(cfg)
    emit_outputs(summary, log, out_dir, config=cfg.to_dict())
    return {
        "seed": cfg.seed,
        "policy": cfg.policy,
        "final_accuracy": summary.final_accuracy,
        "rounds_to_target": summary.rounds_to_target,
        "total_energy_j": summary.total_energy_j,
        "energy_variance": summary.energy_variance,
        "max_relative_energy": summary.max_relative_energy,
        "total_latency_s": summary.total_latency_s,
        "feasible": summary.feasible,
    }


def cmd_run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    row = _run_one(cfg, Path(args.out))
    print(f"policy={row['policy']} seed={row['seed']} "
          f"accuracy={row['final_accuracy']:.4f} "
          f"energy_J={row['total_energy_j']:.6g} "
          f"variance={row['energy_variance']:.6g} "
          f"feasible={row['feasible']}")
    return 0 if row["feasible"] else 2


def cmd_sweep(args) -> int:
    cfg = RunConfig.from_file(args.config)
    out = Path(args.out)
    rows = []
    for seed in _parse_seed_range(args.seeds):
        rows.append(_run_one(replace(cfg, seed=seed), out / f"seed_{seed}"))
        print(f"seed {seed}: accuracy={rows[-1]['final_accuracy']:.4f} "
              f"feasible={rows[-1]['feasible']}")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return 0 if all(r["feasible"] for r in rows) else 2


COMPARE_HEADER = ("run", "policy", "final_accuracy", "rounds_to_target",
                  "total_energy_j", "energy_pct_of_random", "energy_variance",
                  "variance_pct_of_random", "max_relative_energy",
                  "total_latency_s", "feasible")


def cmd_compare(args) -> int:
    summaries = []
    for run_dir in args.runs:
        path = Path(run_dir) / "summary.json"
        data = json.loads(path.read_text())
        summaries.append((Path(run_dir).name, data))
    baseline = next((d for _, d in summaries
                     if (d.get("config") or {}).get("policy") == "random"), None)

    def pct(value, base_key):
        if baseline is None or not baseline.get(base_key):
            return ""
        return f"{100.0 * value / baseline[base_key]:.2f}"

    rows = []
    for name, d in summaries:
        rows.append((
            name,
            (d.get("config") or {}).get("policy", "?"),
            f"{d['final_accuracy']:.6g}",
            d["rounds_to_target"] if d["rounds_to_target"] is not None else "-",
            f"{d['total_energy_j']:.9g}",
            pct(d["total_energy_j"], "total_energy_j"),
            f"{d['energy_variance']:.9g}",
            pct(d["energy_variance"], "energy_variance"),
            f"{d['max_relative_energy']:.9g}",
            f"{d['total_latency_s']:.9g}",
            d["feasible"],
        ))
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(COMPARE_HEADER)
        writer.writerows(rows)
    finally:
        if args.out:
            sink.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbal",
        description="Energy-balanced client selection experiments for federated learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="path to a JSON run config")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run the same config over a seed range")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--seeds", required=True, help="inclusive range, e.g. 0..4")
    p_sweep.add_argument("--out", required=True)
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="tabulate summaries of finished runs")
    p_cmp.add_argument("--runs", nargs="+", required=True, help="run output directories")
    p_cmp.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FedbalError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
