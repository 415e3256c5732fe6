import pytest

from conftest import FREQS, motivating_scenario, oracle_job, snapshot_violations
from energysched.baselines import (BaselinePolicy, elastic_max_tpt, fixed_fifo, pareto_choice,
                                   pareto_per_job, requested_worker_count)
from energysched.cluster import ClusterSpec
from energysched.perfmodel import ModelInputError
from energysched.scheduler import JobSpec, most_efficient_frequency, pareto_frontier
from energysched.simulator import SimOptions, run_simulation
from energysched.trace import generate_trace


def test_full_cluster_requests_run_one_after_another():
    cluster = ClusterSpec(num_nodes=1, gpus_per_node=2)
    jobs = [JobSpec("a", 0.0, 64, 500, 2, "vgg16"), JobSpec("b", 0.0, 64, 500, 2, "vgg16")]
    m = run_simulation(jobs, cluster, "fixed_fifo")
    starts = {d[1]: d[0] for d in m.decisions if d[2] == 0}
    assert starts["b"] == pytest.approx(m.jct["a"])
    assert m.jct["b"] == pytest.approx(2 * m.jct["a"])


def test_five_gpus_round_down_to_four():
    job = oracle_job("a", "resnet18", 512, requested=5)
    assert requested_worker_count(job) == 4
    plan = fixed_fifo([job], ClusterSpec(num_nodes=1, gpus_per_node=8))
    assert plan.assignments["a"] == (4, 1410.0)


def test_request_clamped_to_feasible_counts():
    # gpt2 at global batch 512 needs at least 4 GPUs and at most 64
    job = oracle_job("a", "gpt2", 512, requested=2, max_gpus=32)
    assert requested_worker_count(job) == 4


def test_fifo_blocks_behind_the_head():
    cluster = ClusterSpec(num_nodes=1, gpus_per_node=8)
    big = oracle_job("big", "vgg16", 256, requested=8, submit=1.0)
    small = oracle_job("small", "vgg16", 64, requested=1, submit=2.0)
    busy = oracle_job("busy", "vgg16", 64, requested=4)
    busy.n, busy.f = 4, 1410.0
    plan = fixed_fifo([busy, big, small], cluster)
    assert plan.assignments == {"busy": (4, 1410.0), "big": (0, big.f), "small": (0, small.f)}


def test_motivating_scenario_at_default_clock():
    jobs, cluster = motivating_scenario()
    m = run_simulation(jobs, cluster, "fixed_fifo")
    assert m.avg_jct == pytest.approx(180.4, rel=0.10)
    assert m.total_energy == pytest.approx(85546.0, rel=0.10)


def test_elastic_gives_a_lone_job_every_useful_gpu():
    cluster = ClusterSpec(num_nodes=1, gpus_per_node=8)
    job = oracle_job("a", "resnet18", 512)
    plan = elastic_max_tpt([job], cluster)
    n, f = plan.assignments["a"]
    assert f == cluster.f_max
    assert all(s[4] == s[5] == cluster.f_max for s in plan.steps)
    # the next doubling either does not exist or adds no throughput
    nxt = job.next_n(n)
    assert nxt is None or 1 / job.predict(nxt, f)[0] <= 1 / job.predict(n, f)[0]


def test_pareto_choice_is_the_efficient_frontier_point():
    for name, bs in [("vgg16", 128), ("gpt2", 64), ("deepspeech2", 64), ("resnet18", 256)]:
        job = oracle_job("a", name, bs)
        for n in job.feasible_ns:
            f = pareto_choice(job, FREQS, n)
            front = pareto_frontier(job, FREQS, n, ns=[n])
            assert f in [p[0].f for p in front]
            assert f == most_efficient_frequency(job, n, FREQS)


def test_pareto_per_job_keeps_the_requested_count():
    cluster = ClusterSpec(num_nodes=1, gpus_per_node=8)
    job = oracle_job("a", "vgg16", 256, requested=4)
    plan = pareto_per_job([job], cluster)
    assert plan.assignments["a"] == (4, most_efficient_frequency(job, 4, FREQS))


def test_policy_checks():
    c = ClusterSpec()
    with pytest.raises(ModelInputError):
        BaselinePolicy("tiresias").check(c)
    with pytest.raises(ModelInputError):
        BaselinePolicy("pareto_per_job", 1050.0).check(c)
    with pytest.raises(ModelInputError):
        BaselinePolicy("fixed_fifo", 1000.0).check(c)
    BaselinePolicy("elastic_max_tpt", 1050.0).check(c)


@pytest.fixture(scope="module")
def trace_runs():
    cluster = ClusterSpec()
    trace = generate_trace(100, seed=0, mean_interarrival_s=150.0, cluster=cluster)
    opts = SimOptions(record_placements=True)
    return {p: run_simulation(trace, cluster, p, opts)
            for p in ("fixed_fifo", "elastic_max_tpt", "pareto_per_job")}


def test_fixed_fifo_never_reconfigures_a_running_job(trace_runs):
    m = trace_runs["fixed_fifo"]
    seen = {}
    for t, jid, n0, n1, f0, f1, _ in m.decisions:
        seen.setdefault(jid, []).append((n0, n1, f1))
    for jid, steps in seen.items():
        (a, b) = steps
        assert a[0] == 0 and b[1] == 0 and a[1] == b[0] and a[2] == b[2]


def test_elastic_beats_fifo_on_the_trace(trace_runs):
    assert trace_runs["elastic_max_tpt"].avg_jct <= trace_runs["fixed_fifo"].avg_jct


def test_pareto_saves_energy_on_the_trace(trace_runs):
    assert trace_runs["pareto_per_job"].total_energy <= trace_runs["fixed_fifo"].total_energy


def test_baseline_placements_are_buddy_blocks(trace_runs):
    for m in trace_runs.values():
        assert m.placements
        for snap in m.placements:
            assert snapshot_violations(snap, 8) == []


def test_snapshot_checker_catches_bad_packing():
    ok = {"nodes": [{"node_id": 0, "owner": ["a"] * 8}, {"node_id": 1, "owner": ["a"] * 8}]}
    assert snapshot_violations(ok, 8) == []
    skew = {"nodes": [{"node_id": 0, "owner": [None, "a", "a", None, None, None, None, None]}]}
    assert snapshot_violations(skew, 8)
    half = {"nodes": [{"node_id": 0, "owner": ["a"] * 4 + ["b"] * 4},
                      {"node_id": 1, "owner": ["a"] * 4 + ["b"] * 4}]}
    assert len(snapshot_violations(half, 8)) >= 3
