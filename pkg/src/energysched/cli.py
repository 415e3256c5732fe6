"""Command line entry point.

    energysched run --trace jobs.csv --policy energy_aware --out runs/a
    energysched sweep --trace jobs.csv --policy fixed_fifo --frequency 690,1050,1410 --out runs/f
    energysched gen-trace --jobs 100 --seed 1 --out jobs.csv

Exit status is 0 on success, 1 for bad input and 2 when an internal
invariant breaks.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from .cluster import ClusterSpec
from .oracle import load_profiles, profile_map
from .perfmodel import ModelInputError
from .simulator import (POLICIES, InvariantViolation, Metrics, SimOptions, SimulationError,
                        metrics_summary, run_simulation)
from .trace import generate_trace, parse_trace, write_trace

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2


def write_outputs(m: Metrics, out_dir, extra: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = metrics_summary(m)
    summary.update(extra or {})
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "power_w", "gpus_allocated"])
        for (t, p), (_, g) in zip(m.power_series, m.allocation_series):
            w.writerow([repr(t), repr(p), g])
    with open(out / "decisions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_s", "job_id", "old_n", "new_n", "old_f", "new_f", "projected_power_w"])
        for t, jid, n0, n1, f0, f1, p in m.decisions:
            w.writerow([repr(t), jid, n0, n1, repr(f0), repr(f1), repr(p)])
    with open(out / "jobs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["job_id", "jct_s"])
        for jid in sorted(m.jct):
            w.writerow([jid, repr(m.jct[jid])])
    if m.placements:
        (out / "placements.json").write_text(json.dumps(m.placements, sort_keys=True) + "\n")
    return summary


def _load_inputs(trace_path, cluster_path, profiles_path):
    cluster = ClusterSpec.load(cluster_path) if cluster_path else ClusterSpec()
    extra = load_profiles(profiles_path) if profiles_path else []
    profiles = profile_map(extra)
    trace = parse_trace(trace_path, cluster, profiles)
    return trace, cluster, profiles


def run_experiment(trace, cluster: ClusterSpec, policy: str, out_dir, seed: int = 0,
                   frequency: float | None = None, profiles=None,
                   record_placements: bool = True) -> dict:
    """Run one simulation and write its outputs; returns the summary record."""
    opts = SimOptions(seed=seed, uniform_frequency=frequency, record_placements=record_placements)
    m = run_simulation(trace, cluster, policy, opts, profiles)
    extra = {"eta": cluster.eta, "seed": seed, "uniform_frequency": frequency}
    return write_outputs(m, out_dir, extra)


def _sweep_one(args):
    trace, cluster, policy, out_dir, seed, frequency, profiles = args
    s = run_experiment(trace, cluster, policy, out_dir, seed, frequency, profiles,
                       record_placements=False)
    return s["avg_jct_s"], s["total_energy_j"]


def sweep(trace, cluster: ClusterSpec, policy: str, axis: str, values: Sequence[float], out_dir,
          seed: int = 0, parallel: int = 1, profiles=None) -> list[tuple[float, float, float]]:
    """One run per value; rows ``(value, avg_jct_s, total_energy_j)`` in value order."""
    if not values:
        raise ModelInputError("sweep needs at least one value")
    if axis not in ("eta", "frequency"):
        raise ModelInputError(f"unknown sweep axis {axis!r}")
    if axis == "frequency" and policy in ("energy_aware", "pareto_per_job"):
        raise ModelInputError(f"policy {policy} sets its own frequencies; sweep eta instead")
    values = sorted(float(v) for v in values)
    out = Path(out_dir)
    jobs = []
    for v in values:
        c = dataclasses.replace(cluster, eta=v) if axis == "eta" else cluster
        f = v if axis == "frequency" else None
        jobs.append((trace, c, policy, out / f"{axis}={v:g}", seed, f, profiles))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            results = list(ex.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    rows = [(v, jct, e) for v, (jct, e) in zip(values, results)]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([axis, "avg_jct_s", "total_energy_j"])
        for v, jct, e in rows:
            w.writerow([repr(v), repr(jct), repr(e)])
    return rows


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ModelInputError(f"bad number list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="energysched", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--trace", required=True, help="job trace CSV")
        sp.add_argument("--cluster", help="cluster JSON (ClusterSpec fields)")
        sp.add_argument("--profiles", help="extra hardware profiles JSON")
        sp.add_argument("--policy", default="energy_aware", choices=POLICIES)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    r = sub.add_parser("run", help="run one simulation")
    common(r)
    r.add_argument("--eta", type=float, help="override the cluster power fraction")
    r.add_argument("--frequency", type=float, help="uniform clock for fixed-clock baselines")

    s = sub.add_parser("sweep", help="run one simulation per eta or frequency value")
    common(s)
    s.add_argument("--eta", help="comma separated eta values")
    s.add_argument("--frequency", help="comma separated clocks (fixed-clock baselines)")
    s.add_argument("--parallel", type=int, default=1)

    g = sub.add_parser("gen-trace", help="write a synthetic Poisson trace")
    g.add_argument("--jobs", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--interarrival", type=float, default=60.0, help="mean seconds between arrivals")
    g.add_argument("--median-duration", type=float, default=1800.0)
    g.add_argument("--cluster", help="cluster JSON")
    g.add_argument("--out", required=True, help="trace CSV path")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.cmd == "gen-trace":
            cluster = ClusterSpec.load(args.cluster) if args.cluster else ClusterSpec()
            jobs = generate_trace(args.jobs, args.seed, args.interarrival, args.median_duration,
                                  cluster)
            write_trace(args.out, jobs)
            print(f"wrote {len(jobs)} jobs to {args.out}")
            return EXIT_OK
        trace, cluster, profiles = _load_inputs(args.trace, args.cluster, args.profiles)
        if args.cmd == "run":
            if args.eta is not None:
                cluster = dataclasses.replace(cluster, eta=args.eta)
            s = run_experiment(trace, cluster, args.policy, args.out, args.seed, args.frequency,
                               profiles)
            print(f"avg JCT {s['avg_jct_s']:.3f} s, total energy {s['total_energy_j']:.1f} J")
            return EXIT_OK
        if (args.eta is None) == (args.frequency is None):
            raise ModelInputError("sweep needs exactly one of --eta or --frequency")
        axis = "eta" if args.eta is not None else "frequency"
        values = _floats(args.eta if axis == "eta" else args.frequency)
        rows = sweep(trace, cluster, args.policy, axis, values, args.out, args.seed,
                     args.parallel, profiles)
        for v, jct, e in rows:
            print(f"{axis}={v:g}: avg JCT {jct:.3f} s, total energy {e:.1f} J")
        return EXIT_OK
    except InvariantViolation as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ModelInputError, SimulationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except AssertionError as exc:
        print(f"error: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
