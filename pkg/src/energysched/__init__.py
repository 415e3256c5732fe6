"""Energy-aware scheduling of elastic deep-learning training jobs on GPU clusters."""

from .cluster import ClusterSpec, feasible_worker_counts
from .oracle import HardwareProfile, builtin_profiles, ground_truth_perf, profile_map, sample_profile
from .perfmodel import (Config, EnergyParams, ModelInputError, PerfSample, ThroughputParams,
                        fit_energy_model, fit_throughput_model, predict_energy_per_iter,
                        predict_job_power, predict_step_time)
from .scheduler import (AllocationPlan, ClusterView, JobSpec, JobState, PowerBudget,
                        allocate_gpus, configure_frequencies, energy_efficiency,
                        most_efficient_frequency, pareto_frontier, priority_f, priority_g,
                        schedule)
from .simulator import Metrics, SchedulingEvent, SimOptions, metrics_summary, run_simulation
from .trace import generate_trace, parse_trace

__all__ = [
    "AllocationPlan", "ClusterSpec", "ClusterView", "Config", "EnergyParams", "HardwareProfile",
    "JobSpec", "JobState", "Metrics", "ModelInputError", "PerfSample", "PowerBudget",
    "SchedulingEvent", "SimOptions", "ThroughputParams", "allocate_gpus", "builtin_profiles",
    "configure_frequencies", "energy_efficiency", "feasible_worker_counts", "fit_energy_model",
    "fit_throughput_model", "generate_trace", "ground_truth_perf", "metrics_summary",
    "most_efficient_frequency", "pareto_frontier", "parse_trace", "predict_energy_per_iter",
    "predict_job_power", "predict_step_time", "priority_f", "priority_g", "profile_map",
    "run_simulation", "sample_profile", "schedule",
]
