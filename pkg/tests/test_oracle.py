import json

import numpy as np
import pytest

from energysched.oracle import (SUPPORTED_FREQUENCIES, HardwareProfile, builtin_profiles,
                                ground_truth_perf, load_profiles, profile_map, sample_profile)
from energysched.perfmodel import Config, ModelInputError

RANGES = {"resnet18": (32, 512), "vgg16": (32, 512), "inception_v3": (16, 512),
          "gpt2": (8, 128), "deepspeech2": (8, 256)}


def test_six_profiles_with_table_ranges():
    profs = builtin_profiles()
    assert len(profs) == 6
    names = {p.name for p in profs}
    assert names == set(RANGES) | {"vgg16-fixture"}
    for p in profs:
        if p.name in RANGES:
            assert p.valid_bs_range == RANGES[p.name]
        assert p.p_idle < p.p_max


def test_gpt2_rejects_large_local_batch():
    with pytest.raises(ModelInputError):
        ground_truth_perf(profile_map()["gpt2"], Config(1, 256, 1410.0, 1))


def test_unsupported_frequency_rejected():
    with pytest.raises(ModelInputError):
        ground_truth_perf(profile_map()["vgg16"], Config(1, 64, 1000.0, 1))


def test_queries_are_deterministic():
    prof = profile_map()["inception_v3"]
    c = Config(4, 64, 930.0, 4)
    assert ground_truth_perf(prof, c) == ground_truth_perf(prof, c)


def domain(prof):
    lo, hi = prof.valid_bs_range
    bss = sorted({b for b in (lo, 2 * lo, (lo + hi) // 2, hi) if lo <= b <= hi})
    for n in (1, 2, 4, 8, 16):
        for bs in bss:
            yield n, bs


@pytest.mark.parametrize("prof", builtin_profiles(), ids=lambda p: p.name)
def test_hidden_models_are_well_behaved(prof):
    for n, bs in domain(prof):
        r = min(n, 8)
        ts, es = [], []
        for f in SUPPORTED_FREQUENCIES:
            t, e = ground_truth_perf(prof, Config(n, bs, f, r))
            assert t > 0 and e > 0
            ts.append(t)
            es.append(e)
        # faster clocks never slow a step down
        assert all(b <= a * (1 + 1e-12) for a, b in zip(ts, ts[1:]))
        # most efficient clock (max tpt / E) is cheaper per iteration than the top clock
        best = int(np.argmax([1.0 / (t * e) for t, e in zip(ts, es)]))
        assert es[-1] >= es[best]
        if bs < prof.valid_bs_range[1]:
            t_big, _ = ground_truth_perf(prof, Config(n, bs + 1, SUPPORTED_FREQUENCIES[-1], r))
            assert t_big >= ts[-1]


@pytest.mark.parametrize("name", sorted(RANGES))
def test_energy_u_shaped_in_frequency(name):
    prof = profile_map()[name]
    lo, hi = prof.valid_bs_range
    c = [Config(1, lo * 2, f, 1) for f in SUPPORTED_FREQUENCIES]
    es = [ground_truth_perf(prof, x)[1] for x in c]
    k = int(np.argmin(es))
    assert 0 < k < len(es) - 1


def test_noise_free_samples_equal_truth():
    prof = profile_map()["resnet18"]
    c = Config(2, 64, 1170.0, 2)
    t, e = ground_truth_perf(prof, c)
    for s in sample_profile(prof, c, 5, 0.0, seed=3):
        assert (s.step_time, s.energy_per_iter) == (t, e)


def test_samples_reproducible_and_bounded():
    prof = profile_map()["gpt2"]
    c = Config(1, 32, 810.0, 1)
    a = sample_profile(prof, c, 50, 0.03, seed=11)
    assert a == sample_profile(prof, c, 50, 0.03, seed=11)
    assert a != sample_profile(prof, c, 50, 0.03, seed=12)
    t, e = ground_truth_perf(prof, c)
    for s in a:
        assert abs(s.step_time / t - 1) <= 0.03 + 1e-12
        assert abs(s.energy_per_iter / e - 1) <= 0.03 + 1e-12


def test_sample_mean_converges():
    prof = profile_map()["deepspeech2"]
    c = Config(4, 32, 1290.0, 4)
    t, e = ground_truth_perf(prof, c)
    s = sample_profile(prof, c, 1000, 0.03, seed=0)
    assert abs(np.mean([x.step_time for x in s]) / t - 1) < 0.005
    assert abs(np.mean([x.energy_per_iter for x in s]) / e - 1) < 0.005


def test_sampling_arguments_checked():
    prof = profile_map()["vgg16"]
    c = Config(1, 64, 1410.0, 1)
    with pytest.raises(ModelInputError):
        sample_profile(prof, c, 0, 0.03, seed=0)
    with pytest.raises(ModelInputError):
        sample_profile(prof, c, 1, 1.0, seed=0)


def test_profile_file_round_trip(tmp_path):
    prof = profile_map()["vgg16"]
    d = prof.to_dict()
    d["name"] = "custom"
    path = tmp_path / "p.json"
    path.write_text(json.dumps([d]))
    (loaded,) = load_profiles(path)
    assert isinstance(loaded, HardwareProfile)
    assert loaded.hidden_tparams == prof.hidden_tparams
    assert loaded.hidden_eparams == prof.hidden_eparams
    assert loaded.p_max == prof.p_max
    c = Config(2, 64, 1050.0, 2)
    assert ground_truth_perf(loaded, c) == ground_truth_perf(prof, c)


def test_malformed_profile_rejected(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"name": "x"}))
    with pytest.raises(ModelInputError):
        load_profiles(path)
