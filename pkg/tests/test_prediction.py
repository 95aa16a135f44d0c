import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import joint_posterior, recovery_problem, recovery_spec, stations_in_box, template, tiny_problem
from stfda.basis import BasisSpec, evaluate_basis
from stfda.data import FixedEffectsDesign, StationMeta
from stfda.em import EmConfig, FittedModel, fit
from stfda.model import ModelSpec
from stfda.prediction import (CvConfig, RmseCurves, cross_validate, kriging_weights, predict_station,
                              smoothed_field, stratified_split)
from stfda.state_space import assemble


def _as_fitted(spec, params, design):
    return FittedModel(spec, params, design.names)


def test_matches_joint_gaussian_conditional():
    # the target is an extra, fully unobserved station in the joint model
    sim, design, spec, params = tiny_problem(n=4, T=3, q=4, missing=0.2, seed=3)
    full_mask = sim.observed_mask.copy()
    full_mask[3] = False
    joint = assemble(sim.with_values(sim.values, full_mask), design, spec, params)
    mean, _ = joint_posterior(joint)
    z = mean.reshape(joint.T, joint.p, joint.n)[:, :, 3]
    expected = params.beta[0, 0] + z @ joint.phi.T

    ins = [0, 1, 2]
    sub, sub_design = sim.subset(ins), design.subset(ins)
    fitted = _as_fitted(spec, params, design)
    field_ = smoothed_field(fitted, sub, sub_design)
    pred = predict_station(fitted, field_, sim.stations[3], design.X[3], sim.grid.h)
    np.testing.assert_allclose(pred, expected, atol=1e-6)


def test_zero_innovation_gives_fixed_effect():
    sim, design, spec, params = tiny_problem(n=3, seed=1)
    params = params.replace(v=np.zeros(2))
    fitted = _as_fitted(spec, params, design)
    field_ = smoothed_field(fitted, sim.subset([0, 1]), design.subset([0, 1]))
    pred = predict_station(fitted, field_, sim.stations[2], design.X[2], sim.grid.h)
    np.testing.assert_allclose(pred, params.beta[0, 0], atol=1e-12)


def test_interpolation_limit():
    sim, design, spec, params = tiny_problem(n=3, missing=0.0, seed=2)
    params = params.replace(theta=1e7)
    fitted = _as_fitted(spec, params, design)
    field_ = smoothed_field(fitted, sim, design)
    s0 = sim.stations[0]
    target = StationMeta("near", "", s0.latitude + 1e-6, s0.longitude)  # about 0.1 m away
    pred = predict_station(fitted, field_, target, design.X[0], sim.grid.h)
    own = params.beta[0, 0] + field_.mean[:, :, 0] @ evaluate_basis(spec.basis_omega, sim.grid.h).T
    np.testing.assert_allclose(pred, own, atol=1e-3)


def test_target_must_be_new():
    sim, design, spec, params = tiny_problem(n=3)
    fitted = _as_fitted(spec, params, design)
    field_ = smoothed_field(fitted, sim, design)
    with pytest.raises(ValueError, match="fitted"):
        kriging_weights(fitted, field_, sim.stations[1])
    twin = StationMeta("twin", "", sim.stations[1].latitude, sim.stations[1].longitude)
    with pytest.raises(ValueError, match="coincides"):
        kriging_weights(fitted, field_, twin)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 20), st.integers(1, 10), st.integers(1, 10))
def test_split_is_disjoint_and_stratified(seed, n1, a, b):
    rng = np.random.default_rng(seed)
    labels = np.array([1] * n1 + [2] * 25)
    rng.shuffle(labels)
    props = (0.414, 0.586)
    need1 = sum(int(np.floor(s * 0.414 + 0.5)) for s in (a, b))
    if need1 > n1:
        with pytest.raises(ValueError):
            stratified_split(labels, (a, b), props, rng)
        return
    ins, outs = stratified_split(labels, (a, b), props, rng)
    assert not set(ins) & set(outs)
    assert len(ins) == a and len(outs) == b
    assert len(set(ins)) == a
    assert (labels[ins] == 1).sum() == int(np.floor(a * 0.414 + 0.5))


def test_cv_noise_free_is_exact():
    spec = recovery_spec(random_effect=False)
    sim, design, _, truth = recovery_problem(0, n=12, T=6, q=24, v=0.0, sigma2=0.0)
    res = cross_validate(sim, design, spec, CvConfig(6, 6, iterations=3))
    assert np.max(res.rmse) < 1e-6
    assert res.replicates == 3


def test_cv_pure_noise_matches_sd():
    spec = ModelSpec(basis_mu=BasisSpec(order=1, break_points=(0, 24)), basis_omega=BasisSpec(order=1, break_points=(0, 24)),
                     basis_eps=BasisSpec(order=1, break_points=(0, 24)), design="intercept", random_effect=False)
    ds = template(stations_in_box(40, 0, 3000.0), 60, 12)
    design = FixedEffectsDesign.intercept(40, 60)
    rng = np.random.default_rng(1)
    sim = ds.with_values(5.0 + 2.0 * rng.standard_normal(ds.shape))
    res = cross_validate(sim, design, spec, CvConfig(20, 20, iterations=5))
    sd = np.std(sim.values, axis=(0, 1))
    np.testing.assert_allclose(res.rmse, sd, rtol=0.1)


def test_cv_full_model_beats_intercept_and_is_reproducible(tmp_path):
    sim, design, spec, _ = recovery_problem(5, n=16, T=10, q=12)
    flat = FixedEffectsDesign(("c",), np.ones((16, 10, 1)))
    cfg = CvConfig(8, 8, iterations=4, seed=2)
    flat_spec = ModelSpec(basis_mu=BasisSpec(order=1, break_points=(0, 24)), basis_omega=spec.basis_omega,
                          basis_eps=spec.basis_eps, design="intercept")
    em = EmConfig(max_iterations=30)
    full = cross_validate(sim, design, spec, cfg, em_config=em)
    const = cross_validate(sim, flat, flat_spec, cfg, em_config=em)
    assert np.mean(full.rmse ** 2) < np.mean(const.rmse ** 2)
    again = cross_validate(sim, design, spec, cfg, em_config=em)
    full.write(tmp_path / "a")
    again.write(tmp_path / "b")
    assert (tmp_path / "a" / "rmse_h.csv").read_bytes() == (tmp_path / "b" / "rmse_h.csv").read_bytes()
    assert np.all(full.rmse >= 0) and np.all(full.daily >= 0)


def test_cv_insufficient_stations():
    sim, design, spec, _ = recovery_problem(0, n=5, T=4, q=12)
    with pytest.raises(ValueError):
        cross_validate(sim, design, spec, CvConfig(3, 3, iterations=1))
    labels = np.array([1, 2, 2, 2, 2])
    with pytest.raises(ValueError, match="cluster 1"):
        cross_validate(sim, design, spec, CvConfig(2, 2, iterations=1), labels=labels)


def test_rmse_summary():
    r = RmseCurves(np.array([0.0, 12.0]), np.array([1.0, 3.0]), np.array([1.0, 2.0, 3.0, 4.0]), 2, "x")
    s = r.summary()
    assert s["daily_median"] == 2.5 and s["rmse_max"] == 3.0
    assert r.daily_quartiles == (1.75, 3.25)


def test_simulated_station_prediction_error_reasonable():
    sim, design, spec, truth = recovery_problem(8, n=12, T=10, q=12)
    fitted = fit(sim.subset(range(11)), design.subset(range(11)), spec)
    field_ = smoothed_field(fitted, sim.subset(range(11)), design.subset(range(11)))
    pred = predict_station(fitted, field_, sim.stations[11], design.X[11], sim.grid.h)
    model = assemble(sim, design, spec, truth)
    err = sim.values[11] - pred
    # prediction should beat the fixed effect alone
    assert np.mean(err ** 2) < np.mean((sim.values[11] - model.offset[11]) ** 2)

