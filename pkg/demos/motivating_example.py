"""Two jobs on one two-GPU node under every policy.

    python demos/motivating_example.py
"""

from energysched.cluster import ClusterSpec
from energysched.scheduler import JobSpec
from energysched.simulator import POLICIES, run_simulation


def main():
    jobs = [JobSpec("A", 0.0, 64, 1000, 2, "vgg16-fixture"),
            JobSpec("B", 0.0, 32, 1000, 2, "gpt2")]
    cluster = ClusterSpec(num_nodes=1, gpus_per_node=2, eta=0.7, prerun_s=0.0)
    print(f"{'policy':<16}{'avg JCT (s)':>12}{'energy (J)':>12}  decisions")
    for policy in POLICIES:
        m = run_simulation(jobs, cluster, policy)
        # several re-plans can happen at one instant; show where each job settled
        final = {(t, jid): (n1, f1) for t, jid, _, n1, _, f1, _ in m.decisions}
        steps = "; ".join(f"t={t:.0f} {jid} {n} GPUs @ {f:g} MHz"
                          for (t, jid), (n, f) in final.items() if n)
        print(f"{policy:<16}{m.avg_jct:>12.1f}{m.total_energy:>12.0f}  {steps}")


if __name__ == "__main__":
    main()
