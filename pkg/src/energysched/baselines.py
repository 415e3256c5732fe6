"""Simplified comparison policies.

Each one keeps a single axis of the schedulers it stands in for:
``fixed_fifo`` is neither elastic nor energy aware, ``elastic_max_tpt``
is elastic but runs every GPU at one clock, and ``pareto_per_job`` picks
an energy-efficient clock per job but never changes GPU counts.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

from .cluster import ClusterSpec
from .perfmodel import ModelInputError
from .placement import round_worker_count
from .scheduler import AllocationPlan, JobState, pareto_frontier

BASELINES = ("fixed_fifo", "elastic_max_tpt", "pareto_per_job")


@dataclass(frozen=True)
class BaselinePolicy:
    name: str
    uniform_frequency: float | None = None

    def check(self, cluster: ClusterSpec) -> None:
        if self.name not in BASELINES:
            raise ModelInputError(f"unknown baseline {self.name!r}")
        if self.uniform_frequency is not None:
            if self.name == "pareto_per_job":
                raise ModelInputError("pareto_per_job picks its own frequencies")
            if self.uniform_frequency not in cluster.supported_frequencies:
                raise ModelInputError(f"frequency {self.uniform_frequency} is not supported")


def requested_worker_count(job: JobState) -> int:
    """The trace's GPU request, rounded down to a power of two the job can run at."""
    n = round_worker_count(max(job.spec.requested_gpus, 1))
    ok = [m for m in job.feasible_ns if m <= n]
    return ok[-1] if ok else job.min_n


def _fifo(jobs: Sequence[JobState]) -> list[JobState]:
    return sorted(jobs, key=lambda j: (j.spec.submit_time, j.id))


def _admit_fifo(jobs, total_gpus, pick_f) -> AllocationPlan:
    """Running jobs keep their config; waiting jobs start in order until one does not fit."""
    plan = AllocationPlan()
    free = total_gpus - sum(j.n for j in jobs)
    blocked = False
    for job in _fifo(jobs):
        if job.n > 0:
            plan.assignments[job.id] = (job.n, job.f)
            continue
        n = requested_worker_count(job)
        if blocked or n > free:
            blocked = True  # head-of-line blocking
            plan.assignments[job.id] = (0, job.f)
            continue
        plan.assignments[job.id] = (n, pick_f(job, n))
        free -= n
    plan.projected_total_power = sum(
        j.power(*plan.assignments[j.id]) for j in jobs if j.has_models)
    return plan


def fixed_fifo(jobs: Sequence[JobState], cluster: ClusterSpec,
               frequency: float | None = None) -> AllocationPlan:
    f = cluster.f_max if frequency is None else frequency
    return _admit_fifo(jobs, cluster.total_gpus, lambda job, n: f)


def pareto_choice(job: JobState, frequencies: Sequence[float], n: int) -> float:
    """Clock of the most efficient frontier point at ``n`` GPUs."""
    front = pareto_frontier(job, frequencies, n, ns=[n])
    # throughput per joule; ties go to the lower clock
    best = max(front, key=lambda p: (p[1] / p[2], -p[0].f))
    return best[0].f


def pareto_per_job(jobs: Sequence[JobState], cluster: ClusterSpec) -> AllocationPlan:
    """FIFO at the requested GPU count; jobs without models start at the top clock."""
    freqs = cluster.supported_frequencies

    def pick(job, n):
        return pareto_choice(job, freqs, n) if job.has_models else cluster.f_max

    return _admit_fifo(jobs, cluster.total_gpus, pick)


def elastic_max_tpt(jobs: Sequence[JobState], cluster: ClusterSpec,
                    frequency: float | None = None, G_free: int | None = None) -> AllocationPlan:
    """Greedy doubling by throughput gain over cluster remaining work, no power limit."""
    f = cluster.f_max if frequency is None else frequency
    by_id = {j.id: j for j in jobs}
    n_of = {j.id: 0 for j in jobs}

    work = sum(j.remaining_iters for j in jobs) or 1.0

    def prio(job, n):
        nxt = job.next_n(n)
        if nxt is None:
            return None
        gain = 1.0 / job.predict(nxt, f)[0] - (1.0 / job.predict(n, f)[0] if n else 0.0)
        return gain / work

    heap = []
    for job in _fifo(jobs):
        p = prio(job, 0)
        if p is not None:
            heapq.heappush(heap, (-p, job.spec.submit_time, job.id))
    plan = AllocationPlan()
    g = cluster.total_gpus if G_free is None else G_free
    while heap and g > 0:
        negp, _, jid = heapq.heappop(heap)
        if -negp <= 0:
            break
        job = by_id[jid]
        n = n_of[jid]
        nxt = job.next_n(n)
        if nxt - n > g:
            continue
        n_of[jid] = nxt
        g -= nxt - n
        plan.steps.append(("gpu", jid, n, nxt, f, f, 0.0))
        p = prio(job, nxt)
        if p is not None:
            heapq.heappush(heap, (-p, job.spec.submit_time, jid))
    plan.assignments = {jid: (n, f) for jid, n in n_of.items()}
    plan.projected_total_power = sum(by_id[jid].power(n, f) for jid, n in n_of.items())
    return plan

