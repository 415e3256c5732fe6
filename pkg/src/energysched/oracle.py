"""Synthetic stand-in for measuring jobs on real GPUs.

Every profile hides a throughput and an energy parameter set of the same
family the fitted models use. ``vgg16-fixture`` and ``gpt2`` are
calibrated so that the two-job, two-GPU motivating scenario reproduces
its published step times and energies exactly; the other values are
hand-authored to give throughput that saturates in GPU count and
per-iteration energy that is U-shaped in frequency.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .perfmodel import (Config, EnergyParams, ModelInputError, PerfSample,
                        ThroughputParams, predict_energy_per_iter,
                        predict_step_time, step_time_components)

# A100-style DVFS ladder; 1410 MHz is the default (maximum) clock.
SUPPORTED_FREQUENCIES = (690.0, 810.0, 930.0, 1050.0, 1170.0, 1290.0, 1410.0)
BREAKPOINT = 1050.0
P_IDLE = 50.0


@dataclass(frozen=True)
class HardwareProfile:
    name: str
    hidden_tparams: ThroughputParams
    hidden_eparams: EnergyParams
    valid_bs_range: tuple[int, int]
    p_idle: float = P_IDLE
    p_max: float = 0.0
    frequencies: tuple[float, ...] = SUPPORTED_FREQUENCIES

    def accepts(self, config: Config) -> bool:
        lo, hi = self.valid_bs_range
        return lo <= config.bs <= hi and config.f in self.frequencies

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "valid_bs_range": list(self.valid_bs_range),
            "p_idle": self.p_idle,
            "p_max": self.p_max,
            "frequencies": list(self.frequencies),
            "throughput": self.hidden_tparams.to_dict(),
            "energy": self.hidden_eparams.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HardwareProfile":
        try:
            tp = ThroughputParams.from_dict(d["throughput"])
            ep = EnergyParams.from_dict(d["energy"])
            lo, hi = (int(x) for x in d["valid_bs_range"])
            freqs = tuple(float(x) for x in d.get("frequencies", SUPPORTED_FREQUENCIES))
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelInputError(f"malformed profile: {exc}") from exc
        tp.validate()
        ep.validate()
        prof = cls(str(d["name"]), tp, ep, (lo, hi), float(d.get("p_idle", P_IDLE)),
                   float(d.get("p_max", 0.0)), freqs)
        if not prof.p_max:
            prof = dataclasses.replace(prof, p_max=_max_power(prof))
        if not prof.p_idle < prof.p_max:
            raise ModelInputError(f"profile {prof.name}: p_idle must be below p_max")
        return prof


def load_profiles(path) -> list[HardwareProfile]:
    with open(path) as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    return [HardwareProfile.from_dict(d) for d in data]


def ground_truth_perf(profile: HardwareProfile, config: Config) -> tuple[float, float]:
    if not profile.accepts(config):
        raise ModelInputError(
            f"{profile.name}: config n={config.n} bs={config.bs} f={config.f} outside profile domain")
    return _truth(profile, config)


@lru_cache(maxsize=200_000)
def _truth(profile: HardwareProfile, config: Config) -> tuple[float, float]:
    t = predict_step_time(profile.hidden_tparams, config)
    e = predict_energy_per_iter(profile.hidden_tparams, profile.hidden_eparams, config)
    return t, e


def true_power(profile: HardwareProfile, config: Config) -> float:
    t, e = ground_truth_perf(profile, config)
    return e / t


def sample_profile(profile: HardwareProfile, config: Config, count: int,
                   noise_rel: float, seed) -> list[PerfSample]:
    """``count`` noisy measurements: truth times an independent uniform factor."""
    if count < 1:
        raise ModelInputError("count must be >= 1")
    if not 0 <= noise_rel < 1:
        raise ModelInputError("noise_rel must be in [0, 1)")
    t, e = ground_truth_perf(profile, config)
    rng = np.random.default_rng(seed)
    eps = rng.uniform(-noise_rel, noise_rel, size=(count, 2))
    return [PerfSample(config, t * (1 + a), e * (1 + b)) for a, b in eps]


# -- built-in profiles --------------------------------------------------------

def _energy_params(grad_w: float, sync_w: float, static_w: float, bs_alpha: float,
                   bs_ref: float, grad_rise: float = 2.4, sync_rise: float = 1.6) -> EnergyParams:
    """Energy coefficients from per-GPU wattages at the breakpoint.

    ``grad_w``/``sync_w``/``static_w`` are the component powers at the
    breakpoint; ``*_rise`` is the ratio between the top clock and the
    breakpoint. Gradient power scales sublinearly with local batch size,
    normalised to 1 at ``bs_ref``.
    """
    f0, fmax = BREAKPOINT, SUPPORTED_FREQUENCIES[-1]
    beta = 1.0 - bs_alpha * np.log(bs_ref + 1.0)
    # low clocks: linear through 0.45 of the breakpoint value at f = 0
    gl_b = 0.45 * grad_w
    gl_a = (grad_w - gl_b) / f0
    cube = fmax**3 - f0**3
    gh_a = grad_w * (grad_rise - 1) / cube
    gh_d = grad_w - gh_a * f0**3
    sl_b = 0.5 * sync_w
    sl_a = (sync_w - sl_b) / f0
    sh_a = sync_w * (sync_rise - 1) / cube
    sh_d = sync_w - sh_a * f0**3
    return EnergyParams(
        f0=f0,
        grad_low_a=gl_a, grad_low_b=gl_b, grad_low_alpha=bs_alpha, grad_low_beta=beta, grad_low_theta=1.0,
        grad_high_a=gh_a, grad_high_b=0.0, grad_high_c=0.0, grad_high_d=gh_d,
        grad_high_alpha=bs_alpha, grad_high_beta=beta, grad_high_theta=1.0,
        sync_low_a=sl_a, sync_low_b=sl_b,
        sync_high_a=sh_a, sync_high_b=0.0, sync_high_c=0.0, sync_high_d=sh_d,
        p_static_low=static_w, c_h=static_w / f0,
    )


def _scaled(ep: EnergyParams, grad: float = 1.0, sync: float = 1.0) -> EnergyParams:
    d = ep.to_dict()
    for k in ("grad_low_a", "grad_low_b", "grad_high_a", "grad_high_b", "grad_high_c", "grad_high_d"):
        d[k] *= grad
    for k in ("sync_low_a", "sync_low_b", "sync_high_a", "sync_high_b", "sync_high_c", "sync_high_d"):
        d[k] *= sync
    return EnergyParams(**d)


def _bisect(fn, lo: float, hi: float, target: float) -> float:
    from scipy.optimize import brentq
    return brentq(lambda x: fn(x) - target, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=500)


def _component_energy(tp, ep, config):
    """Energy split into (grad, sync, static) joules for calibration."""
    from .perfmodel import _powers
    _, tg, ts, ti = step_time_components(tp, config)
    pg, ps, pst = (float(x) for x in _powers(ep.to_array(), config.bs, config.f))
    return pg * tg * config.n, ps * ts * config.n, pst * ti * config.n


def _vgg16() -> tuple[ThroughputParams, EnergyParams]:
    # targets at 1410 MHz, global batch 64: one GPU 0.114 s / 27 J, two GPUs 0.112 s / 39 J
    fmax = SUPPORTED_FREQUENCIES[-1]
    c1 = Config(1, 64, fmax, 1)
    c2 = Config(2, 32, fmax, 2)
    base = dict(alpha_io=0.002, beta_io=5e-5, alpha_grad=0.004, beta_grad=2e-4,
                alpha_local=8.0, beta_local=0.004, kappa_local=5.0,
                alpha_node=30.0, beta_node=0.006, theta_node=0.06, kappa_node=12.0,
                gamma1=3.0, gamma2=2.0)
    k_g = _bisect(lambda k: predict_step_time(ThroughputParams(kappa_grad=k, **base), c1), 0.1, 20.0, 0.114)
    base["kappa_grad"] = k_g
    th = _bisect(lambda x: predict_step_time(ThroughputParams(theta_local=x, **base), c2), 0.0, 1.0, 0.112)
    tp = ThroughputParams(theta_local=th, **base)

    ep = _energy_params(grad_w=120.0, sync_w=30.0, static_w=55.0, bs_alpha=0.15, bs_ref=64)
    g1, _, s1 = _component_energy(tp, ep, c1)
    grad = (27.0 - s1) / g1
    ep = _scaled(ep, grad=grad)
    g2, y2, s2 = _component_energy(tp, ep, c2)
    sync = (39.0 - g2 - s2) / y2
    return tp, _scaled(ep, sync=sync)


def _gpt2() -> tuple[ThroughputParams, EnergyParams]:
    # two-GPU step of the motivating scenario: 0.1328 s and 52.846 J at 1410 MHz
    fmax = SUPPORTED_FREQUENCIES[-1]
    c2 = Config(2, 16, fmax, 2)
    base = dict(alpha_io=0.001, beta_io=2e-5, alpha_grad=0.003, beta_grad=5e-4, kappa_grad=5.42,
                alpha_local=10.0, beta_local=0.01, kappa_local=8.0,
                alpha_node=40.0, beta_node=0.012, theta_node=0.12, kappa_node=20.0,
                gamma1=4.0, gamma2=1.5)
    th = _bisect(lambda x: predict_step_time(ThroughputParams(theta_local=x, **base), c2), 0.0, 1.0, 0.1328)
    tp = ThroughputParams(theta_local=th, **base)
    ep = _energy_params(grad_w=80.0, sync_w=30.0, static_w=45.0, bs_alpha=0.12, bs_ref=32)
    g2, y2, s2 = _component_energy(tp, ep, c2)
    sync = (52.846 - g2 - s2) / y2
    return tp, _scaled(ep, sync=sync)


def _max_power(profile: HardwareProfile) -> float:
    """Per-GPU power on one GPU at the top clock, averaged over the batch range."""
    lo, hi = profile.valid_bs_range
    fmax = max(profile.frequencies)
    bss = [b for b in (lo, int(np.sqrt(lo * hi)), hi)]
    vals = []
    for b in bss:
        c = Config(1, b, fmax, 1)
        vals.append(predict_energy_per_iter(profile.hidden_tparams, profile.hidden_eparams, c)
                    / predict_step_time(profile.hidden_tparams, c))
    return float(np.mean(vals))


def _make(name, tp, ep, bs_range) -> HardwareProfile:
    tp.validate()
    ep.validate()
    prof = HardwareProfile(name, tp, ep, bs_range)
    return dataclasses.replace(prof, p_max=_max_power(prof))


@lru_cache(maxsize=1)
def _builtin() -> tuple[HardwareProfile, ...]:
    vgg_tp, vgg_ep = _vgg16()
    gpt_tp, gpt_ep = _gpt2()
    resnet = (
        ThroughputParams(alpha_io=0.002, beta_io=6e-5, alpha_grad=0.003, beta_grad=5e-5, kappa_grad=0.5,
                         alpha_local=3.0, beta_local=0.001, theta_local=0.002, kappa_local=1.0,
                         alpha_node=8.0, beta_node=0.002, theta_node=0.01, kappa_node=2.0,
                         gamma1=4.0, gamma2=2.0),
        _energy_params(grad_w=85.0, sync_w=25.0, static_w=55.0, bs_alpha=0.12, bs_ref=128),
    )
    inception = (
        ThroughputParams(alpha_io=0.002, beta_io=4e-5, alpha_grad=0.005, beta_grad=1.5e-4, kappa_grad=1.4,
                         alpha_local=5.0, beta_local=0.002, theta_local=0.006, kappa_local=2.0,
                         alpha_node=15.0, beta_node=0.004, theta_node=0.025, kappa_node=5.0,
                         gamma1=3.0, gamma2=2.0),
        _energy_params(grad_w=88.0, sync_w=28.0, static_w=55.0, bs_alpha=0.14, bs_ref=64),
    )
    deepspeech = (
        ThroughputParams(alpha_io=0.003, beta_io=8e-5, alpha_grad=0.006, beta_grad=3e-4, kappa_grad=2.2,
                         alpha_local=6.0, beta_local=0.003, theta_local=0.01, kappa_local=3.0,
                         alpha_node=20.0, beta_node=0.005, theta_node=0.035, kappa_node=8.0,
                         gamma1=3.0, gamma2=1.8),
        _energy_params(grad_w=85.0, sync_w=26.0, static_w=55.0, bs_alpha=0.1, bs_ref=32),
    )
    return (
        _make("resnet18", *resnet, (32, 512)),
        _make("vgg16", vgg_tp, vgg_ep, (32, 512)),
        _make("inception_v3", *inception, (16, 512)),
        _make("gpt2", gpt_tp, gpt_ep, (8, 128)),
        _make("deepspeech2", *deepspeech, (8, 256)),
        _make("vgg16-fixture", vgg_tp, vgg_ep, (32, 512)),
    )


def builtin_profiles() -> list[HardwareProfile]:
    return list(_builtin())


def profile_map(extra: Sequence[HardwareProfile] = ()) -> dict[str, HardwareProfile]:
    out = {p.name: p for p in _builtin()}
    out.update({p.name: p for p in extra})
    return out
