import math

from energysched.cluster import feasible_worker_counts
from energysched.oracle import SUPPORTED_FREQUENCIES, profile_map
from energysched.scheduler import (JobSpec, JobState, Totals, cluster_totals, marginal_return,
                                   most_efficient_frequency, next_frequency)

FREQS = SUPPORTED_FREQUENCIES


def oracle_job(jid, name, global_bs, iters=1000, submit=0.0, max_gpus=8, gpus_per_node=8,
               requested=1, done=0.0):
    """A job whose fitted models are the oracle's hidden ones."""
    prof = profile_map()[name]
    spec = JobSpec(jid, submit, global_bs, iters, requested, name)
    ns = feasible_worker_counts(global_bs, prof.valid_bs_range, max_gpus)
    job = JobState(spec, ns, gpus_per_node=gpus_per_node, iters_done=done)
    job.set_models(prof.hidden_tparams, prof.hidden_eparams)
    return job


def reference_greedy(jobs, limit, g_free, freqs, base_power=0.0, totals=None):
    """Both greedy phases by linear scan over every job at every step.

    Returns the (phase, job, n, n', f, f', power) steps in decision order.
    """
    if totals is None:
        totals = cluster_totals(jobs, freqs, 0)
    order = sorted(jobs, key=lambda j: (j.spec.submit_time, j.id))
    state = {j.id: [0, most_efficient_frequency(j, j.min_n, freqs)] for j in order}

    def score_g(job):
        n, f = state[job.id]
        nxt = job.next_n(n)
        if nxt is None:
            return None
        rem = job.remaining_iters
        t1, e1 = job.predict(nxt, f)
        if n == 0:
            return marginal_return(rem * t1 + totals.queue_wait, rem * t1, 0.0, rem * e1, totals)
        t0, e0 = job.predict(n, f)
        return marginal_return(rem * t0, rem * t1, rem * e0, rem * e1, totals)

    def score_f(job):
        n, f = state[job.id]
        nf = next_frequency(f, freqs)
        if nf is None or n == 0:
            return None
        rem = job.remaining_iters
        t0, e0 = job.predict(n, f)
        t1, e1 = job.predict(n, nf)
        return marginal_return(rem * t0, rem * t1, rem * e0, rem * e1, totals)

    def best(active, score):
        top, top_s = None, -math.inf
        for job in order:
            if job.id not in active:
                continue
            s = score(job)
            if s is None:
                continue
            if s > top_s:
                top, top_s = job, s
        return top, top_s

    steps = []
    power = base_power
    g = g_free
    active = {j.id for j in order}
    while g > 0:
        job, s = best(active, score_g)
        if job is None or s <= 0:
            break
        n, f = state[job.id]
        nxt = job.next_n(n)
        if nxt - n > g:
            active.discard(job.id)
            continue
        new = power - job.power(n, f) + job.power(nxt, f)
        if new > limit:
            break
        state[job.id][0] = nxt
        g -= nxt - n
        power = new
        steps.append(("gpu", job.id, n, nxt, f, f, power))

    active = {j.id for j in order}
    while True:
        job, s = best(active, score_f)
        if job is None or s <= 0:
            break
        n, f = state[job.id]
        nf = next_frequency(f, freqs)
        new = power - job.power(n, f) + job.power(n, nf)
        if new > limit:
            active.discard(job.id)
            continue
        state[job.id][1] = nf
        power = new
        steps.append(("freq", job.id, n, n, f, nf, power))
    return steps, {k: tuple(v) for k, v in state.items()}, power


def fixed_totals(jct=1000.0, energy=10000.0):
    return Totals(jct, energy, 0.0, 0)


def motivating_scenario(eta=0.7):
    """Two jobs on one two-GPU node, each asking for both GPUs, no pre-run window."""
    from energysched.cluster import ClusterSpec

    jobs = [JobSpec("A", 0.0, 64, 1000, 2, "vgg16-fixture"),
            JobSpec("B", 0.0, 32, 1000, 2, "gpt2")]
    return jobs, ClusterSpec(num_nodes=1, gpus_per_node=2, eta=eta, prerun_s=0.0)


def snapshot_violations(snap, gpus_per_node):
    """Packing problems in one recorded placement, checked from the owner arrays alone."""
    where = {}
    for nd in snap["nodes"]:
        for i, owner in enumerate(nd["owner"]):
            if owner is not None:
                where.setdefault(owner, {}).setdefault(nd["node_id"], []).append(i)
    bad = []
    for job, per_node in where.items():
        total = sum(len(v) for v in per_node.values())
        if total & (total - 1):
            bad.append(f"{job} holds {total} GPUs")
        for nid, idx in per_node.items():
            k = len(idx)
            if k & (k - 1) or idx[0] % k or idx != list(range(idx[0], idx[0] + k)):
                bad.append(f"{job} block {idx} on node {nid} is not an aligned power of two")
            if len(per_node) > 1 and k != gpus_per_node:
                bad.append(f"{job} spans nodes but only partly fills node {nid}")
    for nd in snap["nodes"]:
        spanning = {o for o in nd["owner"] if o is not None and len(where[o]) > 1}
        if len(spanning) > 1:
            bad.append(f"node {nd['node_id']} hosts {len(spanning)} spanning jobs")
    return bad


def brute_frontier(job, G):
    pts = [(n, f, 1.0 / job.predict(n, f)[0], job.predict(n, f)[1])
           for n in job.feasible_ns if n <= G for f in FREQS]
    keep = []
    for p in pts:
        dominated = any(q[2] >= p[2] and q[3] <= p[3] and (q[2] > p[2] or q[3] < p[3]) for q in pts)
        if not dominated:
            keep.append((p[0], p[1]))
    return sorted(keep)


ACCEPTANCE = []


def report(number, ok, detail):
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
