"""JCT against energy on a synthetic 100-job trace, as plot-ready CSVs.

    python demos/tradeoff_sweep.py --out runs/tradeoff
"""

import argparse
from pathlib import Path

from energysched.cli import run_experiment, sweep
from energysched.cluster import ClusterSpec
from energysched.trace import generate_trace, write_trace


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default="runs/tradeoff")
    p.add_argument("--jobs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--parallel", type=int, default=1)
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cluster = ClusterSpec()
    trace = generate_trace(args.jobs, seed=args.seed, mean_interarrival_s=150.0, cluster=cluster)
    write_trace(out / "trace.csv", trace)

    etas = [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]
    rows = {"energy_aware": sweep(trace, cluster, "energy_aware", "eta", etas,
                                  out / "energy_aware", parallel=args.parallel),
            "fixed_fifo": sweep(trace, cluster, "fixed_fifo", "frequency",
                                cluster.supported_frequencies, out / "fixed_fifo",
                                parallel=args.parallel)}
    for policy in ("elastic_max_tpt", "pareto_per_job"):
        s = run_experiment(trace, cluster, policy, out / policy, record_placements=False)
        rows[policy] = [(None, s["avg_jct_s"], s["total_energy_j"])]

    print(f"{'policy':<16}{'setting':>9}{'avg JCT (s)':>13}{'energy (MJ)':>13}")
    for policy, rs in rows.items():
        for v, jct, e in rs:
            print(f"{policy:<16}{'' if v is None else f'{v:g}':>9}{jct:>13.0f}{e / 1e6:>13.2f}")


if __name__ == "__main__":
    main()
