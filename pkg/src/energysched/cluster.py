"""Cluster description shared by the scheduler, simulator and CLI."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .oracle import SUPPORTED_FREQUENCIES
from .perfmodel import ModelInputError


def is_power_of_two(x: int) -> bool:
    return x >= 1 and x & (x - 1) == 0


@dataclass(frozen=True)
class ClusterSpec:
    num_nodes: int = 4
    gpus_per_node: int = 8
    supported_frequencies: tuple[float, ...] = SUPPORTED_FREQUENCIES
    eta: float = 0.7
    P_max: float = 270.0
    p_idle: float = 50.0
    migration_delay_s: float = 30.0
    prerun_s: float = 240.0

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ModelInputError("num_nodes must be >= 1")
        if not is_power_of_two(self.gpus_per_node):
            raise ModelInputError("gpus_per_node must be a power of two")
        freqs = tuple(float(f) for f in self.supported_frequencies)
        if not freqs or list(freqs) != sorted(set(freqs)):
            raise ModelInputError("supported_frequencies must be a non-empty ascending list")
        object.__setattr__(self, "supported_frequencies", freqs)
        if not 0 <= self.eta < 1:
            raise ModelInputError("eta must be in [0, 1)")
        if self.P_max <= 0 or self.p_idle < 0:
            raise ModelInputError("P_max must be positive and p_idle non-negative")
        if self.migration_delay_s < 0 or self.prerun_s < 0:
            raise ModelInputError("delays must be non-negative")

    @property
    def total_gpus(self) -> int:
        return self.num_nodes * self.gpus_per_node

    @property
    def f_max(self) -> float:
        return self.supported_frequencies[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["supported_frequencies"] = list(self.supported_frequencies)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ModelInputError(f"unknown cluster fields: {sorted(unknown)}")
        kw = dict(d)
        if "supported_frequencies" in kw:
            kw["supported_frequencies"] = tuple(kw["supported_frequencies"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ModelInputError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ClusterSpec":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ModelInputError(f"{path}: {exc}") from exc


def feasible_worker_counts(global_bs: int, bs_range: tuple[int, int], max_gpus: int) -> list[int]:
    """Powers of two ``n <= max_gpus`` that split ``global_bs`` into a valid local batch."""
    lo, hi = bs_range
    out = []
    n = 1
    while n <= max_gpus:
        if global_bs % n == 0 and lo <= global_bs // n <= hi:
            out.append(n)
        n *= 2
    return out
