"""Throughput and energy models for data-parallel training jobs.

Step time is split into IO, gradient computation and gradient
synchronisation; the three parts are combined with two fitted overlap
exponents. Per-iteration GPU energy is the sum of gradient, sync and
static power, each multiplied by the time it is drawn.

Units everywhere: MHz, seconds, joules, watts.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import least_squares

GAMMA_MAX = 64.0
N_STARTS = 8
MAX_NFEV = 500
TOL = 1e-8  # relative cost improvement
XTOL = 1e-6


class ModelInputError(ValueError):
    """Raised for configurations or sample sets the models cannot evaluate."""


@dataclass(frozen=True)
class Config:
    n: int
    bs: int
    f: float
    r: int

    def __post_init__(self):
        if self.n < 1:
            raise ModelInputError(f"GPU count must be >= 1, got {self.n}")
        if self.bs < 1:
            raise ModelInputError(f"local batch size must be >= 1, got {self.bs}")
        if not (1 <= self.r <= self.n):
            raise ModelInputError(f"GPUs per node r={self.r} must be in [1, n={self.n}]")
        if not self.f > 0:
            raise ModelInputError(f"frequency must be positive, got {self.f}")

    @property
    def global_bs(self) -> int:
        return self.n * self.bs

    @classmethod
    def for_job(cls, global_bs: int, n: int, f: float, gpus_per_node: int) -> "Config":
        """Config for ``n`` GPUs of a job, filling whole nodes before spilling."""
        if n < 1 or global_bs % n:
            raise ModelInputError(f"global batch size {global_bs} is not divisible by n={n}")
        return cls(n=n, bs=global_bs // n, f=float(f), r=min(n, gpus_per_node))


def check_frequency(config: Config, frequencies: Sequence[float]) -> None:
    if config.f not in frequencies:
        raise ModelInputError(f"frequency {config.f} MHz is not in the supported set")


class _Params:
    """Flat float-vector view shared by the two parameter dataclasses."""

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in dataclasses.fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values):
        names = [f.name for f in dataclasses.fields(cls)]
        return cls(**{k: float(v) for k, v in zip(names, values)})

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        unknown = set(d) - set(cls.names())
        if unknown:
            raise ModelInputError(f"unknown coefficients: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ThroughputParams(_Params):
    alpha_io: float = 0.0
    beta_io: float = 0.0
    alpha_grad: float = 0.0
    beta_grad: float = 0.0
    kappa_grad: float = 0.0
    alpha_local: float = 0.0
    beta_local: float = 0.0
    theta_local: float = 0.0
    kappa_local: float = 0.0
    alpha_node: float = 0.0
    beta_node: float = 0.0
    theta_node: float = 0.0
    kappa_node: float = 0.0
    gamma1: float = 1.0
    gamma2: float = 1.0

    def validate(self) -> None:
        for k, v in self.to_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ModelInputError(f"{k} must be finite and >= 0, got {v}")
        if self.gamma1 < 1 or self.gamma2 < 1:
            raise ModelInputError("overlap exponents must be >= 1")


@dataclass(frozen=True)
class EnergyParams(_Params):
    f0: float = 0.0
    grad_low_a: float = 0.0
    grad_low_b: float = 0.0
    grad_low_alpha: float = 0.0
    grad_low_beta: float = 0.0
    grad_low_theta: float = 1.0
    grad_high_a: float = 0.0
    grad_high_b: float = 0.0
    grad_high_c: float = 0.0
    grad_high_d: float = 0.0
    grad_high_alpha: float = 0.0
    grad_high_beta: float = 0.0
    grad_high_theta: float = 1.0
    sync_low_a: float = 0.0
    sync_low_b: float = 0.0
    sync_high_a: float = 0.0
    sync_high_b: float = 0.0
    sync_high_c: float = 0.0
    sync_high_d: float = 0.0
    p_static_low: float = 0.0
    c_h: float = 0.0

    def validate(self) -> None:
        for k, v in self.to_dict().items():
            if not np.isfinite(v) or v < 0:
                raise ModelInputError(f"{k} must be finite and >= 0, got {v}")
        if self.grad_low_theta < 1 or self.grad_high_theta < 1:
            raise ModelInputError("log offsets theta must be >= 1")


@dataclass(frozen=True)
class PerfSample:
    config: Config
    step_time: float
    energy_per_iter: float

    def __post_init__(self):
        if not (self.step_time > 0 and self.energy_per_iter > 0):
            raise ModelInputError("samples need positive step time and energy")


# -- evaluation ---------------------------------------------------------------

def _pnorm(a, b, p):
    """(a**p + b**p) ** (1/p) without overflow for large p."""
    m = np.maximum(a, b)
    safe = np.where(m > 0, m, 1.0)
    return np.where(m > 0, safe * ((a / safe) ** p + (b / safe) ** p) ** (1.0 / p), 0.0)


def _time_parts(tp: np.ndarray, n, bs, f, r):
    (a_io, b_io, a_g, b_g, k_g,
     a_l, b_l, th_l, k_l, a_n, b_n, th_n, k_n, g1, g2) = tp
    t_io = a_io + b_io * bs * r
    t_grad = a_g + (b_g + k_g / f) * bs
    local = a_l / f + (k_l / f + b_l) * (n - 2) + th_l
    node = a_n / f + (k_n / f + b_n) * (n - 2) + th_n
    t_sync = np.where(n == 1, 0.0, np.where(n == r, local, node))
    t_iter = _pnorm(_pnorm(t_io, t_grad, g1), t_sync, g2)
    return t_io, t_grad, t_sync, t_iter


def _powers(ep: np.ndarray, bs, f):
    (f0, gl_a, gl_b, gl_al, gl_be, gl_th, gh_a, gh_b, gh_c, gh_d, gh_al, gh_be, gh_th,
     sl_a, sl_b, sh_a, sh_b, sh_c, sh_d, ps_l, c_h) = ep
    low = f < f0
    k_low = gl_a * f + gl_b
    k_high = ((gh_a * f + gh_b) * f + gh_c) * f + gh_d
    p_grad = np.where(
        low,
        k_low * (gl_al * np.log(bs + gl_th) + gl_be),
        k_high * (gh_al * np.log(bs + gh_th) + gh_be),
    )
    p_sync = np.where(low, sl_a * f + sl_b, ((sh_a * f + sh_b) * f + sh_c) * f + sh_d)
    p_static = np.where(low, ps_l, c_h * f)
    return p_grad, p_sync, p_static


def _energy(tp: np.ndarray, ep: np.ndarray, n, bs, f, r):
    _, t_grad, t_sync, t_iter = _time_parts(tp, n, bs, f, r)
    p_grad, p_sync, p_static = _powers(ep, bs, f)
    return (p_grad * t_grad + p_sync * t_sync + p_static * t_iter) * n, t_iter


def step_time_components(params: ThroughputParams, config: Config) -> tuple[float, float, float, float]:
    """Return ``(t_io, t_grad, t_sync, t_iter)`` for one configuration."""
    parts = _time_parts(params.to_array(), config.n, config.bs, config.f, config.r)
    return tuple(float(x) for x in parts)


def predict_step_time(params: ThroughputParams, config: Config) -> float:
    return step_time_components(params, config)[3]


def predict_energy_per_iter(tparams: ThroughputParams, eparams: EnergyParams, config: Config) -> float:
    e, _ = _energy(tparams.to_array(), eparams.to_array(), config.n, config.bs, config.f, config.r)
    return float(e)


def predict_job_power(tparams: ThroughputParams, eparams: EnergyParams, config: Config) -> float:
    """Average power of the whole job (all of its GPUs) in watts."""
    e, t = _energy(tparams.to_array(), eparams.to_array(), config.n, config.bs, config.f, config.r)
    return float(e) / float(t)


def predict_many(tparams: ThroughputParams, eparams: EnergyParams | None, configs: Sequence[Config]):
    """Vectorised step times (and energies if ``eparams`` given) for many configs."""
    n, bs, f, r = _config_arrays(configs)
    if eparams is None:
        return _time_parts(tparams.to_array(), n, bs, f, r)[3]
    e, t = _energy(tparams.to_array(), eparams.to_array(), n, bs, f, r)
    return t, e


def _config_arrays(configs: Sequence[Config]):
    arr = np.array([(c.n, c.bs, c.f, c.r) for c in configs], dtype=float).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


# -- fitting ------------------------------------------------------------------

@dataclass
class FitInfo:
    converged: bool
    cost: float
    nfev: int
    free: list[str] = field(default_factory=list)


def _starts(z_default: np.ndarray, lo: np.ndarray, hi: np.ndarray, seed: int, log_idx=(),
            count: int = N_STARTS):
    rng = np.random.default_rng(seed)
    out = [np.clip(z_default, lo, hi)]
    for _ in range(count - 1):
        z = z_default * np.exp(rng.normal(0.0, 0.8, z_default.size))
        for i in log_idx:
            z[i] = lo[i] + rng.exponential(2.0)
        out.append(np.clip(z, lo, np.minimum(hi, 1e6)))
    return out


def _multistart(resid, p_fixed, free, scale, lo, hi, seed, log_idx=(), starts=N_STARTS):
    """Bounded least squares over the free entries of ``p_fixed`` in scaled units."""
    free_idx = np.flatnonzero(free)
    if free_idx.size == 0:
        r = resid(p_fixed)
        return p_fixed, FitInfo(True, 0.5 * float(r @ r), 1)
    s = scale[free_idx]
    zlo, zhi = lo[free_idx] / s, hi[free_idx] / s
    z0 = np.ones(free_idx.size)
    # exponent-like parameters start at their lower bound
    z0[[list(free_idx).index(i) for i in log_idx if i in free_idx]] = 0.0
    z0 = np.maximum(z0, zlo)
    local_log = [list(free_idx).index(i) for i in log_idx if i in free_idx]

    def fun(z):
        p = p_fixed.copy()
        p[free_idx] = z * s
        return resid(p)

    def jac(z):
        # forward differences, all columns in one broadcast evaluation
        h = np.sqrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(z))
        h = np.where(z + h > zhi, -h, h)
        k = free_idx.size
        p = np.repeat(p_fixed[:, None], k + 1, axis=1)
        p[free_idx, :] = (z * s)[:, None]
        p[free_idx, np.arange(1, k + 1)] += h * s
        r = resid(p[:, :, None])
        return ((r[1:] - r[0]) / h[:, None]).T

    best = None
    for z_start in _starts(z0, zlo, zhi, seed, local_log, starts):
        inside = np.where(np.isfinite(zhi), zhi * (1 - 1e-9), np.inf)
        z_start = np.minimum(z_start, inside)
        res = least_squares(fun, z_start, jac=jac, bounds=(zlo, zhi), method="trf",
                            max_nfev=MAX_NFEV, ftol=TOL, xtol=XTOL, gtol=TOL)
        if best is None or res.cost < best.cost:
            best = res
    p = p_fixed.copy()
    p[free_idx] = best.x * s
    return p, FitInfo(best.status > 0, float(best.cost), int(best.nfev))


def _sample_arrays(samples: Sequence[PerfSample]):
    if not samples:
        raise ModelInputError("cannot fit a model to an empty sample list")
    n, bs, f, r = _config_arrays([s.config for s in samples])
    t = np.array([s.step_time for s in samples])
    e = np.array([s.energy_per_iter for s in samples])
    return n, bs, f, r, t, e


def fit_throughput_model(samples: Sequence[PerfSample], seed: int = 0, return_info: bool = False,
                         starts: int = N_STARTS):
    """Fit step-time coefficients by minimising squared relative error.

    Coefficient groups the samples cannot identify stay at their defaults:
    frequency slopes need two distinct frequencies, each sync branch needs
    samples on that branch, and the per-GPU sync slope needs two GPU counts.
    """
    n, bs, f, r, t, _ = _sample_arrays(samples)
    names = ThroughputParams.names()
    idx = {k: i for i, k in enumerate(names)}
    free = np.ones(len(names), dtype=bool)

    local = (n >= 2) & (n == r)
    node = n > r
    multi_f = np.unique(f).size >= 2
    if not multi_f:
        for k in ("kappa_grad", "alpha_local", "kappa_local", "alpha_node", "kappa_node"):
            free[idx[k]] = False
    for branch, mask in (("local", local), ("node", node)):
        if not mask.any():
            for k in ("alpha", "beta", "theta", "kappa"):
                free[idx[f"{k}_{branch}"]] = False
        elif np.unique(n[mask]).size < 2:
            free[idx[f"beta_{branch}"]] = False
            free[idx[f"kappa_{branch}"]] = False
    if not (local | node).any():
        free[idx["gamma2"]] = False
    if np.unique(bs * r).size < 2:
        free[idx["beta_io"]] = False

    tm, bm, fm = np.median(t), np.median(bs), np.median(f)
    scale = np.array([
        tm / 4, tm / (4 * bm * np.median(r)), tm / 4, tm / (2 * bm), tm * fm / (2 * bm),
        tm * fm / 4, tm / 8, tm / 4, tm * fm / 8,
        tm * fm / 4, tm / 8, tm / 4, tm * fm / 8,
        1.0, 1.0,
    ])
    lo = np.zeros(len(names))
    lo[idx["gamma1"]] = lo[idx["gamma2"]] = 1.0
    hi = np.full(len(names), np.inf)
    hi[idx["gamma1"]] = hi[idx["gamma2"]] = GAMMA_MAX
    p0 = ThroughputParams().to_array()

    def resid(p):
        return _time_parts(p, n, bs, f, r)[3] / t - 1.0

    p, info = _multistart(resid, p0, free, scale, lo, hi, seed,
                          log_idx=(idx["gamma1"], idx["gamma2"]), starts=starts)
    info.free = [k for k, m in zip(names, free) if m]
    params = ThroughputParams.from_array(p)
    return (params, info) if return_info else params


def fit_energy_model(samples: Sequence[PerfSample], tparams: ThroughputParams,
                     f0_candidates: Iterable[float] | None = None, seed: int = 0,
                     return_info: bool = False, starts: int = N_STARTS):
    """Fit power coefficients; the breakpoint is picked by grid search.

    Each candidate breakpoint gets one bounded fit from the default start and
    the one with the lowest training error wins (ties go to the lower
    breakpoint); the winner is then refined from further starts.
    """
    n, bs, f, r, _, e = _sample_arrays(samples)
    tp = tparams.to_array()
    _, t_grad, t_sync, t_iter = _time_parts(tp, n, bs, f, r)
    names = EnergyParams.names()
    idx = {k: i for i, k in enumerate(names)}

    cands = sorted(set(f.tolist()) if f0_candidates is None else set(float(c) for c in f0_candidates))
    if not cands:
        raise ModelInputError("no breakpoint candidates")

    pm = float(np.median(e / (n * t_iter)))
    fm = float(np.median(f))
    lbs = float(np.log(np.median(bs) + 1.0))
    scale = np.array([
        1.0,
        0.5 / fm, 0.5, pm / (2 * lbs), pm / 2, 1.0,
        0.25 / fm**3, 0.25 / fm**2, 0.25 / fm, 0.25, pm / (2 * lbs), pm / 2, 1.0,
        pm / (4 * fm), pm / 4, pm / (8 * fm**3), pm / (8 * fm**2), pm / (8 * fm), pm / 8,
        pm / 2, pm / (2 * fm),
    ])
    lo = np.zeros(len(names))
    lo[idx["grad_low_theta"]] = lo[idx["grad_high_theta"]] = 1.0
    hi = np.full(len(names), np.inf)
    has_sync = bool((t_sync > 0).any())
    log_idx = (idx["grad_low_theta"], idx["grad_high_theta"])
    one_bs = np.unique(bs).size < 2

    best = None
    for f0 in cands:
        low = f < f0
        free = np.ones(len(names), dtype=bool)
        free[idx["f0"]] = False
        for branch, mask in (("low", low), ("high", ~low)):
            keys = [k for k in names if k.startswith((f"grad_{branch}", f"sync_{branch}"))]
            keys.append("p_static_low" if branch == "low" else "c_h")
            if not mask.any():
                for k in keys:
                    free[idx[k]] = False
                continue
            if not has_sync or not (mask & (t_sync > 0)).any():
                for k in keys:
                    if k.startswith("sync"):
                        free[idx[k]] = False
            if one_bs:
                free[idx[f"grad_{branch}_alpha"]] = False
                free[idx[f"grad_{branch}_theta"]] = False
            if np.unique(f[mask]).size < 2:
                slopes = ["grad_low_a", "sync_low_a"] if branch == "low" else [
                    "grad_high_a", "grad_high_b", "grad_high_c",
                    "sync_high_a", "sync_high_b", "sync_high_c"]
                for k in slopes:
                    free[idx[k]] = False
        p0 = EnergyParams(f0=f0).to_array()

        def resid(p):
            pg, ps, pst = _powers(p, bs, f)
            return (pg * t_grad + ps * t_sync + pst * t_iter) * n / e - 1.0

        # one unperturbed fit per candidate; multi-start only the winner
        p, info = _multistart(resid, p0, free, scale, lo, hi, seed, log_idx=log_idx, starts=1)
        if best is None or info.cost < best[1].cost * (1 - 1e-12):
            best = (p, info, resid, p0, free)
    p, info, resid, p0, free = best
    if starts > 1:
        p2, info2 = _multistart(resid, p0, free, scale, lo, hi, seed, log_idx=log_idx, starts=starts)
        if info2.cost < info.cost:
            p, info = p2, info2
    info.free = [k for k, m in zip(names, free) if m]
    params = EnergyParams.from_array(p)
    return (params, info) if return_info else params


def mape(predicted, measured) -> float:
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    return float(np.mean(np.abs(predicted - measured) / measured))
