"""Command line front end: ``coupled-gibbs {simulate,run,bound,sweep,estimate}``.

Exit status is 0 on success, 2 when some replicate hit ``max_iter`` without
meeting, and 1 on any error.
"""

import argparse
import json
import os
import sys

from .harness import (
    ExperimentConfig,
    bound_report,
    run_experiment,
    run_sweep,
    simulate_data,
    validate_output,
    write_data,
    write_report,
)
from .harness import MODELS, SCHEMA_VERSION

EXIT_OK, EXIT_ERROR, EXIT_TRUNCATED = 0, 1, 2


def _parser():
    p = argparse.ArgumentParser(prog="coupled-gibbs", description="Unbiased MCMC with coupled blocked Gibbs samplers.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "simulate a data set and write it as CSV with a JSON sidecar"),
        ("run", "run coupled replicates and write a JSON report plus JSONL rows"),
        ("bound", "evaluate meeting-time bounds for a fixed-precision Gaussian instance"),
        ("sweep", "run a grid of configurations and write a long-format CSV"),
        ("estimate", "run replicates and report the time-averaged estimates only"),
    ):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON config file (for sweep: {'base': {...}, 'grid': {...}})")
        s.add_argument("--seed", type=int, help="base seed")
        s.add_argument("--threads", type=int, help="worker processes")
        s.add_argument("--out-dir", default=".", help="output directory")
        s.add_argument("--model", choices=MODELS)
        s.add_argument("--replicates", type=int)
    return p


def _load(args, sweep=False):
    raw = {}
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
    grid = {}
    if sweep:
        grid = raw.get("grid", {})
        raw = raw.get("base", {k: v for k, v in raw.items() if k != "grid"})
    overrides = {"base_seed": args.seed, "threads": args.threads, "model": args.model, "replicates": args.replicates}
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(raw), grid


def _write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_simulate(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    data = simulate_data(cfg)
    path = os.path.join(out_dir, "data.csv")
    write_data(cfg, data, path)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "base_seed": cfg.base_seed,
        "stream": "design",
        "config": cfg.to_dict(),
        "n_rows": int(data.N),
        "data_file": "data.csv",
    }
    _write_json(validate_output(sidecar, "simulate_sidecar"), os.path.join(out_dir, "data.json"))
    print(f"wrote {path} ({data.N} rows)")
    return EXIT_OK


def cmd_run(cfg, out_dir, stem="run"):
    report = run_experiment(cfg)
    doc = write_report(report, out_dir, stem)
    agg = doc["aggregate"]
    print(f"{cfg.model}: {agg['n_replicates']} replicates, mean T = {agg['mean_T']}, truncated = {agg['n_truncated']}")
    return report


def cmd_bound(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    doc = bound_report(cfg)
    _write_json(doc, os.path.join(out_dir, "bound.json"))
    for name, b in doc["bounds"].items():
        print(f"{name}: {b['mean'] if b['applicable'] else 'not applicable (' + b['reason'] + ')'}")
    return EXIT_OK


def cmd_sweep(cfg, grid, out_dir):
    rows = run_sweep(cfg, grid, out_dir)
    print(f"wrote {os.path.join(out_dir, 'sweep.csv')} ({len(rows)} cells)")
    if any(r.get("error") for r in rows):
        return EXIT_ERROR
    return EXIT_TRUNCATED if any(r.get("n_truncated") for r in rows) else EXIT_OK


def cmd_estimate(cfg, out_dir):
    if not cfg.estimator_enabled or not cfg.test_functions:
        raise ValueError("estimate needs k, m >= k and at least one test function in the config")
    report = cmd_run(cfg, out_dir, "estimate_run")
    _write_json({"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(), "estimates": report.estimates()},
                os.path.join(out_dir, "estimate.json"))
    return report


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        cfg, grid = _load(args, sweep=args.command == "sweep")
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out_dir)
        if args.command == "bound":
            return cmd_bound(cfg, args.out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, grid, args.out_dir)
        report = cmd_run(cfg, args.out_dir) if args.command == "run" else cmd_estimate(cfg, args.out_dir)
        return EXIT_TRUNCATED if report.any_truncated else EXIT_OK
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
