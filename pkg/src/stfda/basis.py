"""B-spline and Fourier basis systems on the within-day domain [0, 24] hours."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

DOMAIN = (0.0, 24.0)

#: Break points used for the bike-count model (denser during the day).
DEFAULT_BREAKS = (0.0, 5.0, 7.14, 9.29, 11.43, 13.57, 15.71, 17.86, 20.0, 24.0)


@dataclass(frozen=True)
class BasisSpec:
    """Description of a basis system.

    Parameters
    ----------
    family : {'bspline', 'fourier'}
    order : int
        Polynomial order of the B-splines (degree + 1). Ignored for Fourier.
    break_points : tuple of float
        Increasing break points from 0 to 24. Ignored for Fourier.
    n_harmonics : int
        Number of sine/cosine pairs for the Fourier family; the dimension is
        ``2 * n_harmonics + 1``.
    """

    family: str = "bspline"
    order: int = 4
    break_points: tuple = DEFAULT_BREAKS
    n_harmonics: int = 0

    def __post_init__(self):
        object.__setattr__(self, "break_points", tuple(float(b) for b in self.break_points))

    @property
    def dimension(self) -> int:
        if self.family == "fourier":
            return 2 * self.n_harmonics + 1
        return len(self.break_points) - 2 + self.order

    @property
    def knots(self) -> np.ndarray:
        """Knot vector with boundary knots repeated ``order`` times."""
        bp = np.asarray(self.break_points)
        deg = self.order - 1
        return np.concatenate([np.repeat(bp[0], deg), bp, np.repeat(bp[-1], deg)])

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "order": self.order,
            "break_points": list(self.break_points),
            "n_harmonics": self.n_harmonics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return make_basis(cls(
            family=d.get("family", "bspline"),
            order=int(d.get("order", 4)),
            break_points=tuple(d.get("break_points", DEFAULT_BREAKS)),
            n_harmonics=int(d.get("n_harmonics", 0)),
        ))


def make_basis(spec: BasisSpec) -> BasisSpec:
    """Validate a basis specification and return it."""
    if spec.family == "fourier":
        if spec.n_harmonics < 0:
            raise ValueError("n_harmonics must be non-negative")
        return spec
    if spec.family != "bspline":
        raise ValueError(f"unknown basis family {spec.family!r}")
    bp = np.asarray(spec.break_points, dtype=float)
    if bp.size < 2:
        raise ValueError("at least two break points are required")
    if np.any(np.diff(bp) <= 0):
        raise ValueError("break points must be strictly increasing")
    if bp[0] != DOMAIN[0] or bp[-1] != DOMAIN[1]:
        raise ValueError(f"break points must start at {DOMAIN[0]:g} and end at {DOMAIN[1]:g}")
    if spec.order < 1:
        raise ValueError("spline order must be at least 1")
    return spec


def evaluate_basis(spec: BasisSpec, abscissae) -> np.ndarray:
    """Evaluate all basis functions at the given hours.

    Returns an ``(len(abscissae), K)`` array whose rows are
    ``phi_1(h), ..., phi_K(h)``. B-spline rows sum to one.
    """
    h = np.atleast_1d(np.asarray(abscissae, dtype=float))
    if np.any(h < DOMAIN[0]) or np.any(h > DOMAIN[1]) or not np.all(np.isfinite(h)):
        raise ValueError("abscissae must lie within [0, 24]")
    make_basis(spec)
    if spec.family == "fourier":
        w = 2 * np.pi * h / (DOMAIN[1] - DOMAIN[0])
        cols = [np.ones_like(h)]
        for r in range(1, spec.n_harmonics + 1):
            cols += [np.sin(r * w), np.cos(r * w)]
        return np.column_stack(cols)
    return BSpline.design_matrix(h, spec.knots, spec.order - 1).toarray()


def expand_function(spec: BasisSpec, coefficients, abscissae) -> np.ndarray:
    """Evaluate ``sum_k phi_k(h) c_k`` at the given hours."""
    c = np.asarray(coefficients, dtype=float)
    if c.shape[-1] != spec.dimension:
        raise ValueError(f"expected {spec.dimension} coefficients, got {c.shape[-1]}")
    return evaluate_basis(spec, abscissae) @ c.T if c.ndim > 1 else evaluate_basis(spec, abscissae) @ c
