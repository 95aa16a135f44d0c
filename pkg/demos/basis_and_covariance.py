"""
Daily curves from B-splines, and how fast spatial correlation decays
=====================================================================

A station's bike count over one day is treated as a smooth function of
the hour. Here the default cubic B-spline basis is built, a curve is
expanded from coefficients, and the exponential correlation between two
stations is tabulated against their distance.
"""

import numpy as np

from stfda.basis import BasisSpec, evaluate_basis, expand_function
from stfda.covariance import CovarianceSpec, correlation, distance_matrix

# the default basis: cubic, break points packed into the day-time hours
spec = BasisSpec()
h = np.linspace(0, 24, 97)
Phi = evaluate_basis(spec, h)
print("basis functions:", Phi.shape[1])
print("largest deviation from partition of unity: %.1e" % np.abs(Phi.sum(axis=1) - 1).max())

# a morning-peak curve: coefficients are roughly the curve's values near each knot
coef = np.array([6, 6, 9, 14, 11, 8, 7, 8, 10, 8, 6, 6], dtype=float)
curve = expand_function(spec, coef, h)
for hour in (3, 8, 12, 17, 22):
    print("%5.1f h  %5.2f bikes" % (hour, curve[np.argmin(np.abs(h - hour))]))

# correlation against distance for a 160 m range
cov = CovarianceSpec("exponential", theta=160.0)
for d in (0, 50, 160, 500, 1000, 3000):
    print("%5d m  rho = %.3f" % (d, correlation(cov, float(d))))

# three stations around the Helsinki railway square
lat = np.array([60.1709, 60.1718, 60.1690])
lon = np.array([24.9414, 24.9450, 24.9380])
print(np.round(distance_matrix(lat, lon)))
