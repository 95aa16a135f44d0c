"""Model form and parameter containers shared by the estimation modules."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .basis import BasisSpec, make_basis
from .data import DEFAULT_COVARIATES

SIGMA2_FLOOR = 1e-8
G_BOUND = 0.99


@dataclass(frozen=True)
class ModelSpec:
    """Basis systems, covariates and covariance family of a model.

    The defaults reproduce the bike-count model: cubic B-splines on the
    day-focused break points for all three terms, exponential covariance,
    and cluster-specific intercepts and covariate effects.
    """

    basis_mu: BasisSpec = field(default_factory=BasisSpec)
    basis_omega: BasisSpec = field(default_factory=BasisSpec)
    basis_eps: BasisSpec = field(default_factory=BasisSpec)
    covariance: str = "exponential"
    nu: float = 0.5
    covariates: tuple = DEFAULT_COVARIATES
    design: str = "interaction"
    random_effect: bool = True

    def __post_init__(self):
        for b in (self.basis_mu, self.basis_omega, self.basis_eps):
            make_basis(b)
        if self.design not in ("intercept", "additive", "interaction"):
            raise ValueError(f"unknown design {self.design!r}")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def p_mu(self) -> int:
        return self.basis_mu.dimension

    @property
    def p_omega(self) -> int:
        return self.basis_omega.dimension

    @property
    def p_eps(self) -> int:
        return self.basis_eps.dimension

    def with_design(self, design: str) -> "ModelSpec":
        return replace(self, design=design)

    def to_dict(self) -> dict:
        return {
            "basis_mu": self.basis_mu.to_dict(),
            "basis_omega": self.basis_omega.to_dict(),
            "basis_eps": self.basis_eps.to_dict(),
            "covariance": self.covariance,
            "nu": self.nu,
            "covariates": list(self.covariates),
            "design": self.design,
            "random_effect": self.random_effect,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        kw = {}
        for key in ("basis_mu", "basis_omega", "basis_eps"):
            if key in d:
                kw[key] = BasisSpec.from_dict(d[key])
        for key in ("covariance", "nu", "design", "random_effect"):
            if key in d:
                kw[key] = d[key]
        if "covariates" in d:
            kw["covariates"] = tuple(d["covariates"])
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter values of the hierarchical model.

    Attributes
    ----------
    beta : (d, p_mu) array
        Basis coefficients of each fixed-effect function.
    g : (p_omega,) array
        Diagonal of the latent transition matrix.
    v : (p_omega,) array
        Innovation variances (diagonal of V).
    theta : float
        Spatial range in meters.
    sigma2_eps : (p_eps,) array
        Basis coefficients of the error-variance function.
    """

    beta: np.ndarray
    g: np.ndarray
    v: np.ndarray
    theta: float
    sigma2_eps: np.ndarray

    def __post_init__(self):
        for name in ("beta", "g", "v", "sigma2_eps"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "theta", float(self.theta))
        if self.beta.ndim != 2:
            raise ValueError("beta must be a (d, p_mu) array")
        if self.g.shape != self.v.shape:
            raise ValueError("g and v must have the same length")
        if np.any(self.v < 0) or np.any(self.sigma2_eps < 0):
            raise ValueError("variances must be non-negative")
        if not self.theta > 0:
            raise ValueError("theta must be positive")

    def replace(self, **kw) -> "ModelParams":
        return replace(self, **kw)

    def vector(self) -> np.ndarray:
        """Flat parameter vector: beta, g, v, theta, sigma2_eps."""
        return np.concatenate([self.beta.ravel(), self.g, self.v, [self.theta], self.sigma2_eps])

    def vector_names(self, design_names=None) -> list:
        d, p = self.beta.shape
        design_names = design_names or [f"x{c}" for c in range(d)]
        names = [f"beta[{design_names[c]}][{k}]" for c in range(d) for k in range(p)]
        names += [f"g[{k}]" for k in range(len(self.g))]
        names += [f"v[{k}]" for k in range(len(self.v))]
        names += ["theta"]
        names += [f"sigma2_eps[{k}]" for k in range(len(self.sigma2_eps))]
        return names

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "g": self.g.tolist(),
            "v": self.v.tolist(),
            "theta": self.theta,
            "sigma2_eps": self.sigma2_eps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(np.array(d["beta"], dtype=float).reshape(len(d["beta"]), -1),
                   d["g"], d["v"], d["theta"], d["sigma2_eps"])
