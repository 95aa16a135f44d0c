import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import nearest_rank, recovery_problem
from stfda.bootstrap import (BootstrapConfig, BootstrapResult, bootstrap_se, draw_sample, percentile_ci, run,
                             stratum_sizes)
from stfda.em import EmConfig


def test_split_of_thirty():
    assert stratum_sizes(30, (0.414, 0.586)) == (12, 18)
    # enumerate the rounding rule against exact arithmetic
    for m in range(1, 200):
        n1, n2 = stratum_sizes(m, (0.414, 0.586))
        assert n1 == (m * 414 + 500) // 1000 and n1 + n2 == m


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 500), st.integers(1, 40))
def test_draw_is_stratified_and_deterministic(seed, index, m):
    labels = np.array([1] * 7 + [2] * 9)
    cfg = BootstrapConfig(B=2, m=m, seed=seed)
    a = draw_sample(labels, cfg, index)
    assert np.array_equal(a, draw_sample(labels, cfg, index))
    n1, n2 = stratum_sizes(m, cfg.proportions)
    assert (labels[a] == 1).sum() == n1 and (labels[a] == 2).sum() == n2


def test_draw_repeats_and_unstratified():
    cfg = BootstrapConfig(B=2, m=30, seed=1)
    s = draw_sample(np.ones(5, int), cfg, 0)
    assert len(s) == 30 and len(set(s)) <= 5
    with pytest.raises(ValueError, match="cluster 2"):
        draw_sample(np.array([1, 1, 1, 1, 3]), cfg, 0)


def test_se_matches_two_pass():
    rng = np.random.default_rng(0)
    v = rng.normal(3, 2, (57, 4))
    mean = [sum(col) / len(col) for col in v.T]
    two_pass = [math.sqrt(sum((x - mu) ** 2 for x in col) / (len(col) - 1)) for col, mu in zip(v.T, mean)]
    np.testing.assert_allclose(bootstrap_se(v), two_pass, rtol=1e-12)
    with pytest.raises(ValueError):
        bootstrap_se(v[:1])


def test_percentile_ci_examples():
    lo, hi = percentile_ci(np.arange(1, 1001), 0.05)
    assert (lo, hi) == (25, 975)
    assert percentile_ci([4.0, 4.0, 4.0], 0.1) == (4.0, 4.0)
    for a in (0.0, 1.0):
        with pytest.raises(ValueError):
            percentile_ci([1.0, 2.0], a)
    with pytest.raises(ValueError):
        percentile_ci([1.0], 0.05)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=300), st.floats(0.001, 0.999))
def test_percentile_ci_matches_sort_oracle(values, alpha):
    lo, hi = percentile_ci(values, alpha)
    assert lo == nearest_rank(values, alpha / 2)
    assert hi == nearest_rank(values, 1 - alpha / 2)
    assert lo <= hi


def test_identical_replicates_have_zero_se():
    rep = np.tile([1.0, 2.0, 3.0], (10, 1))
    r = BootstrapResult(["a", "b", "c"], rep, np.zeros(1), {}, 0.05)
    np.testing.assert_array_equal(r.se, 0.0)
    lo, hi = r.ci()
    np.testing.assert_array_equal(lo, hi)
    np.testing.assert_array_equal(r.estimate, [1.0, 2.0, 3.0])


def test_single_replicate_estimate_but_no_se():
    r = BootstrapResult(["a"], np.array([[2.0]]), np.zeros(1), {}, 0.05)
    assert r.estimate.tolist() == [2.0]
    with pytest.raises(ValueError):
        r.se


def test_config_validation():
    with pytest.raises(ValueError):
        BootstrapConfig(alpha=1.0)
    with pytest.raises(ValueError):
        BootstrapConfig(B=0)


def test_run_is_deterministic_and_writes(tmp_path):
    sim, design, spec, _ = recovery_problem(2, n=10, T=8, q=12)
    labels = np.array([1, 2] * 5)
    cfg = BootstrapConfig(B=4, m=6, seed=3)
    em = EmConfig(max_iterations=15)
    a = run(sim, design, spec, cfg, labels, em)
    b = run(sim, design, spec, cfg, labels, em)
    assert a.dropped == 0 and a.B == 4
    np.testing.assert_array_equal(a.replicates, b.replicates)
    for s, idx in zip(a.samples, range(4)):
        np.testing.assert_array_equal(s, draw_sample(labels, cfg, idx))
    assert a.names[-4:] == ["theta", "sigma2_eps[0]", "sigma2_eps[1]", "sigma2_eps[2]"]
    lo, hi = a.ci()
    assert np.all(lo <= hi)
    a.write(tmp_path)
    assert (tmp_path / "bootstrap.json").exists()
    band = (tmp_path / "bands" / "beta_intercept.csv").read_text().splitlines()
    assert band[0] == "h,mean,lower,upper" and len(band) == sim.q + 1


def test_parallel_matches_serial():
    sim, design, spec, _ = recovery_problem(2, n=8, T=6, q=12)
    em = EmConfig(max_iterations=5)
    serial = run(sim, design, spec, BootstrapConfig(B=3, m=5, seed=1), None, em)
    par = run(sim, design, spec, BootstrapConfig(B=3, m=5, seed=1, workers=2), None, em)
    np.testing.assert_array_equal(serial.replicates, par.replicates)
