"""
Fit the functional state-space model to simulated stations
===========================================================

Ten stations within a kilometre share a daily random effect that evolves
from day to day and is correlated in space. We simulate a month of hourly
counts with known parameters, fit by EM and compare, then predict the
curve at a station that was left out of the fit.
"""

import datetime as dt

import numpy as np

from stfda.basis import BasisSpec, evaluate_basis
from stfda.data import FixedEffectsDesign, FunctionalDataset, FunctionalGrid, StationMeta
from stfda.em import fit
from stfda.model import ModelParams, ModelSpec
from stfda.prediction import predict_station, smoothed_field
from stfda.state_space import assemble, simulate

rng = np.random.default_rng(4)
n, T, q = 11, 30, 24
lat = 60.17 + rng.uniform(0, 1000, n) / 111_195.0
lon = 24.94 + rng.uniform(0, 1000, n) / (111_195.0 * np.cos(np.radians(60.17)))
stations = [StationMeta(f"S{i}", "", float(a), float(b)) for i, (a, b) in enumerate(zip(lat, lon))]
days = [dt.date(2017, 5, 9) + dt.timedelta(days=k) for k in range(T)]
empty = FunctionalDataset(stations, days, FunctionalGrid.regular(q), np.zeros((n, T, q)), np.ones((n, T, q), bool))

spec = ModelSpec(
    basis_mu=BasisSpec(order=4, break_points=(0, 6, 12, 18, 24)),
    basis_omega=BasisSpec(order=2, break_points=(0, 12, 24)),
    basis_eps=BasisSpec(order=2, break_points=(0, 12, 24)),
    design="intercept",
)
design = FixedEffectsDesign.intercept(n, T)
truth = ModelParams([[8, 6, 10, 14, 12, 9, 8]], [0.5] * 3, [4.0] * 3, 200.0, [1.0] * 3)
data = simulate(assemble(empty, design, spec, truth), seed=1)

# hold out the last station
ins = list(range(n - 1))
fitted = fit(data.subset(ins), design.subset(ins), spec)
print("EM iterations:", fitted.iterations, "converged:", fitted.converged)
print("g     true 0.5   estimated", np.round(fitted.params.g, 3))
print("V     true 4.0   estimated", np.round(fitted.params.v, 2))
print("theta true 200   estimated %.0f m" % fitted.params.theta)

h = data.grid.h
phi = evaluate_basis(spec.basis_mu, h)
print("max |beta(h) - truth|: %.2f" % np.abs(phi @ (fitted.params.beta[0] - truth.beta[0])).max())

# kriging the held-out station from the smoothed random effects
field = smoothed_field(fitted, data.subset(ins), design.subset(ins))
pred = predict_station(fitted, field, stations[-1], design.X[-1], h)
rmse = np.sqrt(np.mean((pred - data.values[-1]) ** 2))
fixed_only = np.sqrt(np.mean((phi @ fitted.params.beta[0] - data.values[-1]) ** 2))
print("held-out RMSE %.2f bikes (mean curve alone: %.2f)" % (rmse, fixed_only))
