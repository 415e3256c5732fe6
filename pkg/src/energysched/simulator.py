"""Trace-driven discrete-event simulation of a GPU cluster.

Execution always follows the hardware oracle; scheduling decisions only
ever see models fitted to noisy samples of it. Power is piecewise constant
between events, so energy is an exact sum of power times interval length.
"""

from __future__ import annotations

import heapq
import math
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import baselines
from .cluster import ClusterSpec, feasible_worker_counts
from .oracle import HardwareProfile, ground_truth_perf, profile_map, sample_profile
from .perfmodel import (Config, ModelInputError, PerfSample, fit_energy_model,
                        fit_throughput_model)
from .placement import (NodeState, PlacementError, buddy_allocate, buddy_free,
                        check_invariants, make_nodes, plan_migrations, apply_move)
from .scheduler import ClusterView, JobSpec, JobState, PowerBudget, schedule

POLICIES = ("energy_aware",) + baselines.BASELINES
KIND_PRIORITY = {"completion": 0, "migration_done": 1, "scaling": 2, "arrival": 3}


class SimulationError(RuntimeError):
    pass


class InvariantViolation(SimulationError):
    pass


@dataclass(frozen=True)
class SchedulingEvent:
    time: float
    kind: str
    job_id: str

    def __post_init__(self):
        if self.time < 0 or self.kind not in KIND_PRIORITY:
            raise ValueError(f"bad event {self.kind!r} at {self.time}")

    def key(self):
        return (self.time, KIND_PRIORITY[self.kind], self.job_id)


@dataclass
class SimOptions:
    seed: int = 0
    noise_rel: float = 0.03
    samples_per_config: int = 2
    fit_starts: int = 3
    uniform_frequency: float | None = None
    power_cap: bool = True
    record_placements: bool = False
    max_steps: int = 1_000_000


@dataclass
class Metrics:
    policy: str
    jct: dict[str, float] = field(default_factory=dict)
    total_energy: float = 0.0
    power_series: list[tuple[float, float]] = field(default_factory=list)
    allocation_series: list[tuple[float, int]] = field(default_factory=list)
    # (time, summed oracle job power, summed predicted job power)
    job_power_series: list[tuple[float, float, float]] = field(default_factory=list)
    decisions: list[tuple] = field(default_factory=list)
    placements: list[dict] = field(default_factory=list)
    events: list[SchedulingEvent] = field(default_factory=list)
    plan_powers: list[float] = field(default_factory=list)
    power_limit: float = math.inf
    total_gpus: int = 0
    migrations: int = 0
    cap_actions: int = 0

    @property
    def avg_jct(self) -> float:
        return float(np.mean(list(self.jct.values()))) if self.jct else 0.0

    @property
    def makespan(self) -> float:
        return self.power_series[-1][0] if self.power_series else 0.0


def integrate_series(series: Sequence[tuple[float, float]]) -> float:
    """Left-step integral, summed in series order."""
    total = 0.0
    for (t0, p), (t1, _) in zip(series, series[1:]):
        total += p * (t1 - t0)
    return total


def metrics_summary(m: Metrics) -> dict:
    util = 0.0
    if m.total_gpus and m.makespan > 0:
        util = integrate_series(m.allocation_series) / (m.total_gpus * m.makespan)
    return {
        "policy": m.policy,
        "jobs": len(m.jct),
        "avg_jct_s": m.avg_jct,
        "total_energy_j": m.total_energy,
        "peak_power_w": max((p for _, p in m.power_series), default=0.0),
        "peak_job_power_w": max((p for _, p, _ in m.job_power_series), default=0.0),
        "power_limit_w": m.power_limit if math.isfinite(m.power_limit) else None,
        "mean_gpu_utilization": util,
        "makespan_s": m.makespan,
        "migrations": m.migrations,
        "power_cap_actions": m.cap_actions,
    }


# -- fitting with memoisation -------------------------------------------------

_FIT_CACHE: dict = {}
_FIT_CACHE_MAX = 4096


def _fit(samples: Sequence[PerfSample], frequencies, starts: int):
    # canonical order, so the same measurements always give the same fit
    samples = sorted(samples, key=lambda s: (s.config.n, s.config.f, s.step_time, s.energy_per_iter))
    key = (tuple((s.config, s.step_time, s.energy_per_iter) for s in samples), frequencies, starts)
    hit = _FIT_CACHE.get(key)
    if hit is None:
        tp = fit_throughput_model(samples, starts=starts)
        ep = fit_energy_model(samples, tp, f0_candidates=frequencies, starts=starts)
        if len(_FIT_CACHE) >= _FIT_CACHE_MAX:
            _FIT_CACHE.clear()
        hit = _FIT_CACHE[key] = (tp, ep)
    return hit


def _sample_seed(seed: int, profile: str, global_bs: int, n: int, f: float):
    return np.random.SeedSequence([seed, zlib.crc32(profile.encode()), global_bs, n, int(round(f))])


# -- per-job simulation record ------------------------------------------------

@dataclass
class _Job:
    js: JobState
    profile: HardwareProfile
    mode: str = "arriving"  # queued, prerun, profiling, migrating, ready, finished
    until: float = 0.0
    prerun: tuple[int, float] | None = None
    samples: list[PerfSample] = field(default_factory=list)
    finish: float | None = None

    @property
    def id(self):
        return self.js.id

    def holding(self) -> int:
        if self.mode == "prerun":
            return self.prerun[0]
        if self.mode in ("profiling", "migrating", "ready"):
            return self.js.n
        return 0

    def executing(self) -> tuple[int, float] | None:
        """Config the job is drawing power at, if any."""
        if self.mode == "prerun":
            return self.prerun
        if self.mode in ("profiling", "ready") and self.js.n > 0:
            return self.js.n, self.js.f
        return None

    def progressing(self) -> bool:
        return self.mode in ("profiling", "ready") and self.js.n > 0


class _Simulation:
    def __init__(self, trace, cluster: ClusterSpec, policy: str, options: SimOptions,
                 profiles: dict[str, HardwareProfile]):
        self.cluster = cluster
        self.policy = policy
        self.opt = options
        self.freqs = cluster.supported_frequencies
        self.budget = PowerBudget(cluster.eta, cluster.total_gpus, cluster.P_max)
        self.limit = self.budget.power_limit if policy == "energy_aware" else math.inf
        self.nodes: list[NodeState] = make_nodes(cluster.num_nodes, cluster.gpus_per_node)
        self.where: dict[str, list] = {}
        self.jobs: dict[str, _Job] = {}
        self.heap: list = []
        self.m = Metrics(policy, power_limit=self.limit, total_gpus=cluster.total_gpus)
        self.predicted_power = 0.0
        self._seq = 0
        self._held: set[str] = set()
        for spec in sorted(trace, key=lambda s: (s.submit_time, s.id)):
            prof = profiles[spec.profile_name]
            ns = feasible_worker_counts(spec.global_bs, prof.valid_bs_range, cluster.total_gpus)
            js = JobState(spec, ns, gpus_per_node=cluster.gpus_per_node)
            job = _Job(js, prof)
            self.jobs[spec.id] = job
            if self.limit < math.inf and self._prerun_config(job) is None:
                raise SimulationError(
                    f"job {spec.id} draws more than the {self.limit:.0f} W limit even on "
                    f"{js.min_n} GPUs at {self.freqs[0]:g} MHz")
            self._push(SchedulingEvent(spec.submit_time, "arrival", spec.id))

    # -- helpers --------------------------------------------------------------

    def _push(self, ev: SchedulingEvent):
        self._seq += 1
        heapq.heappush(self.heap, (ev.key(), self._seq, ev))

    def _true(self, job: _Job, n: int, f: float) -> tuple[float, float]:
        return ground_truth_perf(job.profile, job.js.config(n, f))

    def _true_power(self, job: _Job) -> float:
        cfg = job.executing()
        if cfg is None:
            return 0.0
        t, e = self._true(job, *cfg)
        return e / t

    def _oracle_models(self, job: _Job):
        job.js.set_models(job.profile.hidden_tparams, job.profile.hidden_eparams)

    def _collect(self, job: _Job, n: int):
        spec = job.js.spec
        for f in self.freqs:
            cfg = job.js.config(n, f)
            seed = _sample_seed(self.opt.seed, job.profile.name, spec.global_bs, n, f)
            job.samples += sample_profile(job.profile, cfg, self.opt.samples_per_config,
                                          self.opt.noise_rel, seed)
        job.js.set_models(*_fit(job.samples, self.freqs, self.opt.fit_starts))
        job.js.profiled_ns.add(n)

    def _prerun_config(self, job: _Job) -> tuple[int, float, float] | None:
        """Prerun on min_n GPUs at the most efficient clock that fits the limit."""
        n = job.js.min_n
        fits = []
        for f in self.freqs:
            t, e = self._true(job, n, f)
            if e / t <= self.limit:
                fits.append((1.0 / (t * e), f, e / t))
        if not fits:
            return None
        _, f, p = max(fits)
        return n, f, p

    def _decide(self, t, job: _Job, n, f, power):
        old = (job.js.n, job.js.f)
        if old != (n, f) and (old[0] or n):
            self.m.decisions.append((t, job.id, old[0], n, old[1], f, power))
        job.js.n, job.js.f = n, f

    # -- time integration -----------------------------------------------------

    def _interval_power(self):
        job_power = sum(self._true_power(j) for j in self.jobs.values())
        busy = sum(j.holding() for j in self.jobs.values() if j.executing() is not None)
        on = sum(nd.gpus_total for nd in self.nodes if nd.powered_on)
        return job_power, job_power + self.cluster.p_idle * (on - busy), busy

    def _advance(self, t0: float, t1: float, finishing: set[str]):
        dt = t1 - t0
        if dt <= 0:
            return
        job_power, power, _ = self._interval_power()
        self.m.total_energy += power * dt
        self.m.power_series.append((t0, power))
        held = sum(j.holding() for j in self.jobs.values())
        self.m.allocation_series.append((t0, held))
        self.m.job_power_series.append((t0, job_power, self.predicted_power))
        for job in self.jobs.values():
            cfg = job.executing()
            if cfg is None:
                continue
            tt, e = self._true(job, *cfg)
            job.js.energy_used += e / tt * dt
            if job.progressing():
                if job.id in finishing:
                    job.js.iters_done = float(job.js.spec.total_iters)
                else:
                    job.js.iters_done = min(job.js.iters_done + dt / tt,
                                            float(job.js.spec.total_iters))

    def _next_completion(self, t: float):
        best, ids = math.inf, []
        for job in self.jobs.values():
            if not job.progressing():
                continue
            tt, _ = self._true(job, job.js.n, job.js.f)
            tc = t + job.js.remaining_iters * tt
            if tc < best:
                best, ids = tc, [job.id]
            elif tc == best:
                ids.append(job.id)
        return best, ids

    # -- main loop ------------------------------------------------------------

    def run(self) -> Metrics:
        t = 0.0
        steps = 0
        while True:
            steps += 1
            if steps > self.opt.max_steps:
                raise SimulationError(f"no progress after {steps - 1} event steps (t={t:.1f})")
            t_evt = self.heap[0][0][0] if self.heap else math.inf
            t_done, done = self._next_completion(t)
            t_next = min(t_evt, t_done)
            if t_next == math.inf:
                break
            finishing = set(done) if t_done <= t_evt else set()
            self._advance(t, t_next, finishing)
            t = t_next
            trigger = False
            for jid in sorted(finishing):
                self._finish(t, self.jobs[jid])
                trigger = True
            while self.heap and self.heap[0][0][0] <= t:
                _, _, ev = heapq.heappop(self.heap)
                trigger |= self._handle(t, ev)
            if trigger:
                self._reschedule(t)
        left = [j.id for j in self.jobs.values() if j.mode != "finished"]
        if left:
            raise SimulationError(
                f"jobs {left[:5]} can never run on this cluster under its power limit")
        if self.m.power_series:
            self.m.power_series.append((t, 0.0))
            self.m.allocation_series.append((t, 0))
            self.m.job_power_series.append((t, 0.0, 0.0))
        return self.m

    def _finish(self, t: float, job: _Job):
        job.mode = "finished"
        job.js.phase = "finished"
        job.finish = t
        self.m.jct[job.id] = t - job.js.spec.submit_time
        self.m.events.append(SchedulingEvent(t, "completion", job.id))
        self._release(job)
        self._decide(t, job, 0, job.js.f, self.predicted_power)

    def _release(self, job: _Job):
        blocks = self.where.pop(job.id, None)
        if blocks:
            buddy_free(self.nodes, blocks)

    def _handle(self, t: float, ev: SchedulingEvent) -> bool:
        job = self.jobs[ev.job_id]
        self.m.events.append(ev)
        if ev.kind == "arrival":
            if self.policy == "energy_aware":
                job.mode = "queued"
            else:
                if self.policy != "pareto_per_job":
                    self._oracle_models(job)
                job.mode = "ready"
            return True
        if ev.kind == "migration_done":
            if job.mode == "migrating" and job.until == t:
                job.mode = "ready"
            return False
        # scaling: a prerun or profiling window has ended
        if job.until != t or job.mode not in ("prerun", "profiling"):
            return False  # window was abandoned earlier
        if job.mode == "prerun":
            self._release(job)
            self._collect(job, job.prerun[0])
            job.prerun = None
            job.mode = "ready"
        elif job.mode == "profiling":
            self._collect(job, job.js.n)
            job.mode = "ready"
            if self.policy == "pareto_per_job":
                f = baselines.pareto_choice(job.js, self.freqs, job.js.n)
                self._decide(t, job, job.js.n, f, self.predicted_power)
        return True

    # -- scheduling -----------------------------------------------------------

    def _reschedule(self, t: float):
        self._held = set()
        for _ in range(len(self.jobs) + 1):
            if self.policy == "energy_aware":
                assign, plan_power = self._plan_energy_aware(t)
            else:
                assign, plan_power = self._plan_baseline(t)
            self.predicted_power = plan_power
            for jid, (n, f) in assign.items():
                self._decide(t, self.jobs[jid], n, f, plan_power)
            self._place(t)
            if not (self.limit < math.inf and self.opt.power_cap and self._govern(t)):
                break
        for job in self.jobs.values():
            if job.mode in ("prerun", "profiling"):
                job.js.phase = "profiling"
            elif job.mode in ("ready", "migrating"):
                job.js.phase = "running" if job.js.n > 0 else "pending"
        if self.opt.record_placements:
            self._snapshot(t)

    def _plan_energy_aware(self, t: float):
        locked = [j for j in self.jobs.values() if j.mode in ("profiling", "migrating")]
        reserved_gpus = sum(j.prerun[0] for j in self.jobs.values() if j.mode == "prerun")
        reserved_power = sum(self._true_power(j) for j in self.jobs.values() if j.mode == "prerun")
        held = reserved_gpus + sum(j.js.n for j in locked)
        base = reserved_power + sum(j.js.power(j.js.n, j.js.f) for j in locked)
        # offline preruns are admitted first come first served
        for job in self.jobs.values():
            if job.mode != "queued":
                continue
            n0, f0, est = self._prerun_config(job)
            if held + n0 > self.cluster.total_gpus or base + est > self.limit:
                break
            job.prerun = (n0, f0)
            job.mode = "prerun"
            job.until = t + self.cluster.prerun_s
            held += n0
            base += est
            reserved_gpus += n0
            reserved_power += est
            self._push(SchedulingEvent(job.until, "scaling", job.id))

        ready = [j for j in self.jobs.values()
                 if j.mode == "ready" and j.js.feasible_ns and j.id not in self._held]
        view = ClusterView(self.freqs, self.cluster.gpus_per_node, self.cluster.total_gpus,
                           self.budget, [j.js for j in ready], [j.js for j in locked], t,
                           reserved_gpus, reserved_power)
        if not ready:
            return {}, base
        plan = schedule(view)
        self.m.plan_powers.append(plan.projected_total_power)
        if plan.projected_total_power > self.limit:
            raise InvariantViolation(
                f"plan at t={t} projects {plan.projected_total_power:.1f} W over the limit")
        for jid in plan.needs_profiling:
            job = self.jobs[jid]
            job.mode = "profiling"
            job.until = t + self.cluster.prerun_s
            self._push(SchedulingEvent(job.until, "scaling", jid))
        assign = {j.id: plan.assignments[j.id] for j in ready}
        return assign, plan.projected_total_power

    def _plan_baseline(self, t: float):
        live = [j for j in self.jobs.values() if j.mode in ("ready", "profiling", "migrating")]
        states = [j.js for j in live]
        f_u = self.opt.uniform_frequency
        if self.policy == "fixed_fifo":
            plan = baselines.fixed_fifo(states, self.cluster, f_u)
        elif self.policy == "elastic_max_tpt":
            # jobs in a migration pause keep their GPUs
            moving = [j for j in live if j.mode == "migrating"]
            plan = baselines.elastic_max_tpt(
                [j.js for j in live if j.mode != "migrating"], self.cluster, f_u,
                G_free=self.cluster.total_gpus - sum(j.js.n for j in moving))
        else:
            plan = baselines.pareto_per_job(states, self.cluster)
            for job in live:
                n, _ = plan.assignments[job.id]
                if job.mode == "ready" and job.js.n == 0 and n > 0:
                    job.mode = "profiling"
                    job.until = t + self.cluster.prerun_s
                    self._push(SchedulingEvent(job.until, "scaling", job.id))
        assign = {j.id: plan.assignments[j.id] for j in live if j.mode != "migrating"}
        return assign, plan.projected_total_power

    # -- placement ------------------------------------------------------------

    def _place(self, t: float):
        want = {j.id: j.holding() for j in self.jobs.values() if j.holding() > 0}
        for jid in list(self.where):
            if want.get(jid, 0) != sum(len(b[1]) for b in self.where[jid]):
                buddy_free(self.nodes, self.where.pop(jid))
        todo = sorted((jid for jid in want if jid not in self.where), key=lambda k: (-want[k], k))
        try:
            for jid in todo:
                self.where[jid] = buddy_allocate(self.nodes, want[jid], jid)
        except PlacementError:
            self._repack(t, want)
        moves = plan_migrations(self.nodes, self.where, self._pinned())
        for jid, old, new in moves:
            apply_move(self.nodes, jid, old, new)
            self.where[jid] = new
            self._pause(t, self.jobs[jid])
        for nd in self.nodes:
            if nd.is_empty:
                nd.powered_on = False
        try:
            check_invariants(self.nodes, self.where)
        except AssertionError as exc:
            raise InvariantViolation(f"t={t}: {exc}") from exc

    def _pinned(self):
        return frozenset(j.id for j in self.jobs.values() if j.mode != "ready")

    def _repack(self, t: float, want: dict[str, int]):
        """Rebuild every placement largest job first; this always fits."""
        old = dict(self.where)
        for jid in list(self.where):
            buddy_free(self.nodes, self.where.pop(jid))
        for jid in sorted(want, key=lambda k: (-want[k], k)):
            self.where[jid] = buddy_allocate(self.nodes, want[jid], jid)
            if jid in old and old[jid] != self.where[jid] and self.jobs[jid].mode == "ready":
                self._pause(t, self.jobs[jid])

    def _pause(self, t: float, job: _Job):
        self.m.migrations += 1
        if self.cluster.migration_delay_s <= 0:
            return
        job.mode = "migrating"
        job.until = t + self.cluster.migration_delay_s
        self._push(SchedulingEvent(job.until, "migration_done", job.id))

    # -- power cap ------------------------------------------------------------

    def _committed_power(self, job: _Job) -> float:
        """Oracle power the job draws now or on resuming from a migration pause."""
        if job.mode == "migrating" and job.js.n > 0:
            t, e = self._true(job, job.js.n, job.js.f)
            return e / t
        return self._true_power(job)

    def _predicted_power(self, job: _Job) -> float:
        if job.mode == "prerun":
            return self._true_power(job)
        if job.mode in ("ready", "profiling", "migrating") and job.js.n > 0:
            return job.js.power(job.js.n, job.js.f)
        return 0.0

    def _govern(self, t: float) -> bool:
        """Keep measured and predicted job power under the limit.

        Measured overshoot is first met by clocking jobs down; after that the
        newest job is paused. Returns True if anything was paused so the
        caller can re-plan without it.
        """
        paused = False
        while True:
            measured = sum(self._committed_power(j) for j in self.jobs.values())
            predicted = sum(self._predicted_power(j) for j in self.jobs.values())
            if measured <= self.limit and predicted <= self.limit:
                return paused
            active = [j for j in self.jobs.values()
                      if j.mode in ("ready", "profiling", "migrating") and j.js.n > 0]
            if not active:
                return paused
            self.m.cap_actions += 1
            slow = [j for j in active if j.js.f > self.freqs[0]]
            if measured > self.limit and slow:
                job = max(slow, key=lambda j: (self._committed_power(j), j.js.spec.submit_time, j.id))
                lower = max(f for f in self.freqs if f < job.js.f)
                self._decide(t, job, job.js.n, lower, self.predicted_power)
                continue
            job = max(active, key=lambda j: (j.js.spec.submit_time, j.id))
            tt, e = self._true(job, job.js.n, self.freqs[0])
            if e / tt > self.limit:
                # measured: this many GPUs can never fit under the cap
                job.js.feasible_ns = [m for m in job.js.feasible_ns if m < job.js.n]
            else:
                self._held.add(job.id)
            # any pending window or pause is abandoned; its event is ignored
            job.mode = "ready"
            self._decide(t, job, 0, job.js.f, self.predicted_power)
            self._release(job)
            for nd in self.nodes:
                if nd.is_empty:
                    nd.powered_on = False
            paused = True

    def _snapshot(self, t: float):
        self.m.placements.append({
            "time": t,
            "nodes": [{"node_id": nd.node_id, "powered_on": nd.powered_on,
                       "owner": list(nd.owner)} for nd in self.nodes],
        })


def validate_trace(trace: Sequence[JobSpec], cluster: ClusterSpec,
                   profiles: dict[str, HardwareProfile]) -> None:
    seen = set()
    for spec in trace:
        if spec.id in seen:
            raise ModelInputError(f"duplicate job id {spec.id!r}")
        seen.add(spec.id)
        prof = profiles.get(spec.profile_name)
        if prof is None:
            raise ModelInputError(f"job {spec.id}: unknown model {spec.profile_name!r}")
        if tuple(prof.frequencies) != tuple(cluster.supported_frequencies) and not set(
                cluster.supported_frequencies) <= set(prof.frequencies):
            raise ModelInputError(f"profile {prof.name} lacks some cluster frequencies")
        if not feasible_worker_counts(spec.global_bs, prof.valid_bs_range, cluster.total_gpus):
            raise ModelInputError(
                f"job {spec.id}: global batch size {spec.global_bs} is not divisible into a "
                f"local batch in {prof.valid_bs_range} on any power-of-two GPU count")


def run_simulation(trace: Sequence[JobSpec], cluster: ClusterSpec, policy: str = "energy_aware",
                   options: SimOptions | None = None,
                   profiles: dict[str, HardwareProfile] | None = None) -> Metrics:
    if policy not in POLICIES:
        raise ModelInputError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    options = options or SimOptions()
    profiles = profile_map() if profiles is None else profiles
    if options.uniform_frequency is not None:
        if policy == "energy_aware":
            raise ModelInputError("the energy-aware policy chooses its own frequencies")
        baselines.BaselinePolicy(policy, options.uniform_frequency).check(cluster)
    validate_trace(trace, cluster, profiles)
    return _Simulation(trace, cluster, policy, options, profiles).run()
