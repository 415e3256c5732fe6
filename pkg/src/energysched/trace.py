"""Job traces: CSV parsing, writing and a seeded synthetic generator."""

from __future__ import annotations

import csv
import math
from typing import Sequence

import numpy as np

from .cluster import ClusterSpec, feasible_worker_counts
from .oracle import HardwareProfile, ground_truth_perf, profile_map
from .perfmodel import Config, ModelInputError
from .placement import round_worker_count
from .scheduler import JobSpec

COLUMNS = ("job_id", "submit_time_s", "requested_gpus", "model", "global_batch_size", "iterations")
TRACE_MODELS = ("resnet18", "vgg16", "inception_v3", "gpt2", "deepspeech2")


def _duration_to_iters(prof: HardwareProfile, spec_bs: int, requested: int, duration: float,
                       cluster: ClusterSpec) -> int:
    """Iterations that fill ``duration`` at the requested GPUs and the top clock."""
    ns = feasible_worker_counts(spec_bs, prof.valid_bs_range, cluster.total_gpus)
    n = round_worker_count(max(requested, 1))
    n = max([m for m in ns if m <= n], default=ns[0])
    t, _ = ground_truth_perf(prof, Config.for_job(spec_bs, n, cluster.f_max, cluster.gpus_per_node))
    return max(1, int(round(duration / t)))


def parse_trace(path, cluster: ClusterSpec | None = None,
                profiles: dict[str, HardwareProfile] | None = None) -> list[JobSpec]:
    cluster = cluster or ClusterSpec()
    profiles = profile_map() if profiles is None else profiles
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ModelInputError(f"{path}: empty trace")
        header = [h.strip() for h in header]
        by_iters = list(COLUMNS)
        by_time = by_iters[:-1] + ["duration_s"]
        if header not in (by_iters, by_time):
            raise ModelInputError(f"{path}: line 1: expected header {','.join(COLUMNS)}")
        use_duration = header == by_time
        jobs, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            where = f"{path}: line {lineno}"
            if len(row) != len(header):
                raise ModelInputError(f"{where}: expected {len(header)} fields, got {len(row)}")
            jid, submit, req, model, bs, amount = (c.strip() for c in row)
            try:
                submit_t, req_n, gbs = float(submit), int(req), int(bs)
                amount_v = float(amount) if use_duration else int(amount)
            except ValueError as exc:
                raise ModelInputError(f"{where}: {exc}") from exc
            if not jid or jid in seen:
                raise ModelInputError(f"{where}: missing or duplicate job id {jid!r}")
            if not (math.isfinite(submit_t) and submit_t >= 0):
                raise ModelInputError(f"{where}: submit time must be >= 0")
            if req_n < 1 or gbs < 1 or amount_v <= 0:
                raise ModelInputError(f"{where}: GPUs, batch size and length must be positive")
            prof = profiles.get(model)
            if prof is None:
                raise ModelInputError(f"{where}: unknown model {model!r}")
            if not feasible_worker_counts(gbs, prof.valid_bs_range, cluster.total_gpus):
                raise ModelInputError(
                    f"{where}: global batch size {gbs} is not divisible into a local batch in "
                    f"{prof.valid_bs_range[0]}-{prof.valid_bs_range[1]} on any power-of-two "
                    f"GPU count up to {cluster.total_gpus}")
            iters = (_duration_to_iters(prof, gbs, req_n, amount_v, cluster)
                     if use_duration else amount_v)
            seen.add(jid)
            jobs.append(JobSpec(jid, submit_t, gbs, iters, req_n, model))
    return jobs


def write_trace(path, jobs: Sequence[JobSpec]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for j in jobs:
            w.writerow([j.id, repr(float(j.submit_time)), j.requested_gpus, j.profile_name,
                        j.global_bs, j.total_iters])


def generate_trace(num_jobs: int, seed: int = 0, mean_interarrival_s: float = 60.0,
                   median_duration_s: float = 1800.0, cluster: ClusterSpec | None = None,
                   models: Sequence[str] = TRACE_MODELS,
                   gpu_weights: Sequence[float] = (0.5, 0.25, 0.15, 0.1)) -> list[JobSpec]:
    """Poisson arrivals; model and local batch drawn uniformly from the model pool.

    Requested GPU counts 1, 2, 4, 8 are drawn with ``gpu_weights``, durations
    are log-normal around ``median_duration_s`` and become iteration counts
    through the oracle step time at the requested GPUs and the top clock.
    """
    if num_jobs < 0:
        raise ModelInputError("num_jobs must be >= 0")
    cluster = cluster or ClusterSpec()
    profiles = profile_map()
    rng = np.random.default_rng(seed)
    counts = [1, 2, 4, 8]
    w = np.asarray(gpu_weights, dtype=float)
    w = w / w.sum()
    t = 0.0
    jobs = []
    for i in range(num_jobs):
        t += float(rng.exponential(mean_interarrival_s)) if i else 0.0
        model = models[int(rng.integers(len(models)))]
        prof = profiles[model]
        lo, hi = prof.valid_bs_range
        local = [b for b in (2 ** k for k in range(12)) if lo <= b <= hi]
        bs = local[int(rng.integers(len(local)))]
        req = min(counts[int(rng.choice(len(counts), p=w))], cluster.total_gpus)
        gbs = bs * req
        duration = float(median_duration_s * np.exp(rng.normal(0.0, 0.8)))
        iters = _duration_to_iters(prof, gbs, req, duration, cluster)
        jobs.append(JobSpec(f"j{i:04d}", round(t, 3), gbs, iters, req, model))
    return jobs
