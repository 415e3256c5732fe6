"""Energy-aware GPU and frequency allocation.

Two greedy phases run over all unfinished jobs at every scheduling event.
GPUs are handed out one doubling step at a time to the job with the best
ratio of relative JCT reduction to relative energy increase. Then clocks
are raised one ladder step at a time by the same kind of ratio. Both
phases keep the predicted cluster power under ``eta * G * P_max``.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .perfmodel import (Config, EnergyParams, ThroughputParams, predict_energy_per_iter,
                        predict_step_time)

INF = math.inf
PHASES = ("pending", "profiling", "running", "finished")


class SchedulerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class JobSpec:
    id: str
    submit_time: float
    global_bs: int
    total_iters: int
    requested_gpus: int
    profile_name: str

    def __post_init__(self):
        if self.total_iters < 1 or self.global_bs < 1 or self.submit_time < 0:
            raise ValueError(f"job {self.id}: invalid spec")


@dataclass
class JobState:
    spec: JobSpec
    feasible_ns: list[int]
    n: int = 0
    f: float = 0.0
    iters_done: float = 0.0
    energy_used: float = 0.0
    tparams: ThroughputParams | None = None
    eparams: EnergyParams | None = None
    profiled_ns: set[int] = field(default_factory=set)
    phase: str = "pending"
    gpus_per_node: int = 8
    _pred: dict = field(default_factory=dict, repr=False)

    @property
    def id(self) -> str:
        return self.spec.id

    @property
    def remaining_iters(self) -> float:
        return max(self.spec.total_iters - self.iters_done, 0.0)

    @property
    def has_models(self) -> bool:
        return self.tparams is not None and self.eparams is not None

    @property
    def min_n(self) -> int:
        return self.feasible_ns[0]

    def set_models(self, tparams: ThroughputParams, eparams: EnergyParams) -> None:
        self.tparams, self.eparams = tparams, eparams
        self._pred.clear()

    def config(self, n: int, f: float) -> Config:
        return Config.for_job(self.spec.global_bs, n, f, self.gpus_per_node)

    def predict(self, n: int, f: float) -> tuple[float, float]:
        """Predicted (step time, energy per iteration) from the fitted models."""
        key = (n, f)
        hit = self._pred.get(key)
        if hit is None:
            if not self.has_models:
                raise SchedulerStateError(f"job {self.id} has no fitted models")
            c = self.config(n, f)
            hit = (predict_step_time(self.tparams, c),
                   predict_energy_per_iter(self.tparams, self.eparams, c))
            self._pred[key] = hit
        return hit

    def power(self, n: int, f: float) -> float:
        if n == 0:
            return 0.0
        t, e = self.predict(n, f)
        return e / t

    def next_n(self, n: int) -> int | None:
        if n == 0:
            return self.min_n
        return 2 * n if 2 * n in self.feasible_ns else None


@dataclass(frozen=True)
class PowerBudget:
    eta: float
    G: int
    P_max: float

    def __post_init__(self):
        if not 0 <= self.eta < 1:
            raise ValueError("eta must be in [0, 1)")

    @property
    def power_limit(self) -> float:
        return self.eta * self.G * self.P_max


@dataclass
class ClusterView:
    """What a scheduling decision sees: the ladder, the topology and the jobs."""
    frequencies: tuple[float, ...]
    gpus_per_node: int
    total_gpus: int
    budget: PowerBudget
    jobs: list[JobState] = field(default_factory=list)
    locked: list[JobState] = field(default_factory=list)
    time: float = 0.0
    # GPUs and power held by work the scheduler cannot model (offline preruns)
    reserved_gpus: int = 0
    reserved_power: float = 0.0


@dataclass
class Totals:
    jct: float
    energy: float
    gpu_seconds: float = 0.0
    capacity: int = 0

    @property
    def queue_wait(self) -> float:
        """Expected wait of a job left out of this round: time to drain the cluster's work."""
        return self.gpu_seconds / self.capacity if self.capacity else 0.0


@dataclass
class AllocationPlan:
    assignments: dict[str, tuple[int, float]] = field(default_factory=dict)
    projected_total_power: float = 0.0
    steps: list[tuple] = field(default_factory=list)
    needs_profiling: list[str] = field(default_factory=list)

    def gpus(self) -> int:
        return sum(n for n, _ in self.assignments.values())


def _order(job: JobState):
    return (job.spec.submit_time, job.id)


# -- scores -------------------------------------------------------------------

def energy_efficiency(job: JobState, config: Config) -> float:
    """Iterations per (second * joule) over the whole job at ``config``."""
    if not job.has_models:
        raise SchedulerStateError(f"job {job.id} has no fitted models")
    t, e = job.predict(config.n, config.f)
    iters = job.spec.total_iters
    return iters / ((iters * t) * (iters * e))


def most_efficient_frequency(job: JobState, n: int, frequencies: Sequence[float]) -> float:
    best_f, best = None, -INF
    for f in frequencies:
        ee = energy_efficiency(job, job.config(n, f))
        if ee > best:
            best_f, best = f, ee
    return best_f


def cluster_totals(jobs: Iterable[JobState], frequencies: Sequence[float],
                   capacity: int = 0) -> Totals:
    """Remaining JCT and energy summed over unfinished jobs at their current configs.

    Jobs holding no GPUs are costed at their smallest GPU count and most
    efficient clock. ``capacity`` is the cluster GPU count used for the
    queue-wait estimate.
    """
    jct = energy = work = 0.0
    for job in jobs:
        rem = job.remaining_iters
        n, f = job.n, job.f
        if n == 0:
            n = job.min_n
            f = most_efficient_frequency(job, n, frequencies)
        t, e = job.predict(n, f)
        jct += rem * t
        energy += rem * e
        work += rem * t * n
    return Totals(jct, energy, work, capacity)


def marginal_return(jct_now: float, jct_next: float, e_now: float, e_next: float,
                    totals: Totals) -> float:
    de = (e_next - e_now) / totals.energy
    if de <= 0:
        return INF
    return ((jct_now - jct_next) / totals.jct) / de


def priority_g(job: JobState, totals: Totals, n: int | None = None, f: float | None = None) -> float | None:
    """Marginal return of the next GPU step, or ``None`` if the job cannot grow."""
    n = job.n if n is None else n
    f = job.f if f is None else f
    nxt = job.next_n(n)
    if nxt is None:
        return None
    rem = job.remaining_iters
    t1, e1 = job.predict(nxt, f)
    if n == 0:
        # without GPUs the job would finish one queue wait later than at nxt
        jct1 = rem * t1
        return marginal_return(jct1 + totals.queue_wait, jct1, 0.0, rem * e1, totals)
    t0, e0 = job.predict(n, f)
    return marginal_return(rem * t0, rem * t1, rem * e0, rem * e1, totals)


def next_frequency(f: float, frequencies: Sequence[float]) -> float | None:
    for g in frequencies:
        if g > f:
            return g
    return None


def priority_f(job: JobState, totals: Totals, frequencies: Sequence[float],
               n: int | None = None, f: float | None = None) -> float | None:
    """Marginal return of one clock step up, or ``None`` at the top clock."""
    n = job.n if n is None else n
    f = job.f if f is None else f
    nf = next_frequency(f, frequencies)
    if nf is None or n == 0:
        return None
    rem = job.remaining_iters
    t0, e0 = job.predict(n, f)
    t1, e1 = job.predict(n, nf)
    return marginal_return(rem * t0, rem * t1, rem * e0, rem * e1, totals)


# -- greedy phases ------------------------------------------------------------

def allocate_gpus(jobs: Sequence[JobState], budget: PowerBudget, G_free: int,
                  frequencies: Sequence[float], totals: Totals | None = None,
                  base_power: float = 0.0, power_limit: float | None = None) -> AllocationPlan:
    """GPU phase: every job starts at zero GPUs and its most efficient clock."""
    limit = budget.power_limit if power_limit is None else power_limit
    if totals is None:
        totals = cluster_totals(jobs, frequencies, budget.G)
    plan = AllocationPlan(projected_total_power=base_power)
    by_id = {j.id: j for j in jobs}
    state: dict[str, list] = {}
    heap = []
    for job in sorted(jobs, key=_order):
        f = most_efficient_frequency(job, job.min_n, frequencies)
        state[job.id] = [0, f]
        p = priority_g(job, totals, 0, f)
        if p is not None:
            heapq.heappush(heap, (-p, *_order(job)))

    g = G_free
    power = base_power
    while heap and g > 0:
        negp, _, jid = heapq.heappop(heap)
        if -negp <= 0:
            break
        job = by_id[jid]
        n, f = state[jid]
        nxt = job.next_n(n)
        if nxt - n > g:
            continue
        new_power = power - job.power(n, f) + job.power(nxt, f)
        if new_power > limit:
            break
        state[jid][0] = nxt
        g -= nxt - n
        power = new_power
        plan.steps.append(("gpu", jid, n, nxt, f, f, power))
        p = priority_g(job, totals, nxt, f)
        if p is not None:
            heapq.heappush(heap, (-p, *_order(job)))

    plan.assignments = {jid: (n, f) for jid, (n, f) in state.items()}
    plan.projected_total_power = power
    return plan


def configure_frequencies(plan: AllocationPlan, jobs: Sequence[JobState], budget: PowerBudget,
                          frequencies: Sequence[float], totals: Totals | None = None,
                          power_limit: float | None = None) -> AllocationPlan:
    """Clock phase: raise the best job one ladder step while the budget allows."""
    limit = budget.power_limit if power_limit is None else power_limit
    if totals is None:
        totals = cluster_totals(jobs, frequencies, budget.G)
    by_id = {j.id: j for j in jobs}
    state = {jid: list(v) for jid, v in plan.assignments.items()}
    heap = []
    for job in sorted(jobs, key=_order):
        if job.id not in state:
            continue
        n, f = state[job.id]
        p = priority_f(job, totals, frequencies, n, f)
        if p is not None:
            heapq.heappush(heap, (-p, *_order(job)))

    power = plan.projected_total_power
    steps = list(plan.steps)
    while heap:
        negp, _, jid = heapq.heappop(heap)
        if -negp <= 0:
            break
        job = by_id[jid]
        n, f = state[jid]
        nf = next_frequency(f, frequencies)
        new_power = power - job.power(n, f) + job.power(n, nf)
        if new_power > limit:
            continue
        state[jid][1] = nf
        power = new_power
        steps.append(("freq", jid, n, n, f, nf, power))
        p = priority_f(job, totals, frequencies, n, nf)
        if p is not None:
            heapq.heappush(heap, (-p, *_order(job)))

    return AllocationPlan(
        assignments={jid: (n, f) for jid, (n, f) in state.items()},
        projected_total_power=power,
        steps=steps,
        needs_profiling=list(plan.needs_profiling),
    )


def schedule(view: ClusterView) -> AllocationPlan:
    """Recompute the plan for every schedulable job.

    Jobs in ``view.locked`` (mid-profiling) keep their GPUs and clock; their
    predicted power is charged against the budget before the greedy runs.
    """
    freqs = view.frequencies
    everyone = list(view.jobs) + list(view.locked)
    totals = cluster_totals(everyone, freqs, view.total_gpus)
    if totals.jct <= 0 or totals.energy <= 0:
        totals = Totals(1.0, 1.0, 0.0, view.total_gpus)
    base_power = view.reserved_power + sum(j.power(j.n, j.f) for j in view.locked)
    g_free = view.total_gpus - view.reserved_gpus - sum(j.n for j in view.locked)
    plan = allocate_gpus(view.jobs, view.budget, g_free, freqs, totals, base_power)
    plan = configure_frequencies(plan, view.jobs, view.budget, freqs, totals)
    by_id = {j.id: j for j in view.jobs}
    plan.needs_profiling = [jid for jid, (n, _) in plan.assignments.items()
                            if n > 0 and n not in by_id[jid].profiled_ns]
    for j in view.locked:
        plan.assignments[j.id] = (j.n, j.f)
    return plan


# -- Pareto frontier ----------------------------------------------------------

def pareto_frontier(job: JobState, frequencies: Sequence[float], max_gpus: int,
                    ns: Iterable[int] | None = None) -> list[tuple[Config, float, float]]:
    """Configs not dominated in (higher throughput, lower energy per iteration)."""
    counts = job.feasible_ns if ns is None else [n for n in ns if n in job.feasible_ns]
    pts = []
    for n in counts:
        if n > max_gpus:
            continue
        for f in frequencies:
            t, e = job.predict(n, f)
            pts.append((job.config(n, f), 1.0 / t, e))
    # sort by throughput desc, energy asc; sweep keeps strictly improving energy
    pts.sort(key=lambda p: (-p[1], p[2]))
    out = []
    best_e = INF
    i = 0
    while i < len(pts):
        j = i
        while j < len(pts) and pts[j][1] == pts[i][1]:
            j += 1
        group = pts[i:j]
        e_min = group[0][2]
        if e_min < best_e:
            out.extend(p for p in group if p[2] == e_min)
            best_e = e_min
        i = j
    return out
