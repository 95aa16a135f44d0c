"""Linear-Gaussian state-space form of the hierarchical functional model.

The latent state of day ``t`` stacks the random-effect coefficients of all
stations, coefficient-major: entry ``k * n + i`` is coefficient ``k`` at
station ``i``. With this ordering the transition is ``diag(g) (x) I_n`` and
the innovation covariance is exactly ``V (x) R``.

The observation update never forms the ``n q``-dimensional innovation
covariance. Because the observation matrix is ``Phi (x) I_n`` and the noise
is diagonal, the update is carried out in state dimension through
``A = H' W H`` and ``b = H' W e`` (``W`` the inverse noise variances of the
observed cells).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .basis import evaluate_basis
from .covariance import JITTER, CovarianceSpec, correlation_matrix, distance_matrix
from .data import FixedEffectsDesign, FunctionalDataset
from .model import SIGMA2_FLOOR, ModelParams, ModelSpec

LOG_2PI = np.log(2 * np.pi)


class NumericalError(RuntimeError):
    """Raised when a recursion produces non-finite or indefinite quantities."""


@dataclass(eq=False)
class StateSpaceModel:
    """Per-day observation model plus latent AR(1) dynamics.

    Attributes
    ----------
    y : (n, T, q) array
        Observed counts, NaN where unobserved.
    mask : (n, T, q) bool array
    offset : (n, T, q) array
        Fixed-effect surface ``mu(s, t, h_j)``.
    phi : (q, p) array
        Random-effect basis evaluated on the grid.
    g, v : (p,) arrays
        Transition diagonal and innovation variances.
    R : (n, n) array
        Spatial correlation matrix including diagonal jitter.
    sigma2 : (q,) array
        Error variance on the grid (unfloored).
    """

    y: np.ndarray
    mask: np.ndarray
    offset: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    v: np.ndarray
    R: np.ndarray
    sigma2: np.ndarray
    dataset: FunctionalDataset | None = None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def q(self) -> int:
        return self.y.shape[2]

    @property
    def p(self) -> int:
        return self.phi.shape[1]

    @property
    def m(self) -> int:
        return self.n * self.p

    @property
    def noise_var(self) -> np.ndarray:
        return np.maximum(self.sigma2, SIGMA2_FLOOR)

    def transition_diag(self) -> np.ndarray:
        return np.repeat(self.g, self.n)

    def transition(self) -> np.ndarray:
        return np.diag(self.transition_diag())

    def innovation_cov(self) -> np.ndarray:
        return np.kron(np.diag(self.v), self.R)

    def initial_cov(self) -> np.ndarray:
        """Stationary covariance ``diag(v / (1 - g^2)) (x) R``."""
        return np.kron(np.diag(self.v / (1 - self.g ** 2)), self.R)

    def observation_matrix(self) -> np.ndarray:
        """``Phi (x) I_n``; row ``j * n + i`` is grid point ``j`` at station ``i``."""
        return np.kron(self.phi, np.eye(self.n))


def assemble(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec,
             params: ModelParams) -> StateSpaceModel:
    """Build the state-space model for ``dataset`` under ``params``."""
    n, T, q = dataset.shape
    if design.X.shape[:2] != (n, T):
        raise ValueError(f"design covers {design.X.shape[:2]} station-days, dataset has {(n, T)}")
    if params.beta.shape != (design.d, spec.p_mu):
        raise ValueError(f"beta must be {(design.d, spec.p_mu)}, got {params.beta.shape}")
    if params.g.shape != (spec.p_omega,):
        raise ValueError(f"expected {spec.p_omega} transition coefficients")
    if params.sigma2_eps.shape != (spec.p_eps,):
        raise ValueError(f"expected {spec.p_eps} error-variance coefficients")
    h = dataset.grid.h
    phi_mu = evaluate_basis(spec.basis_mu, h)
    offset = np.einsum("itc,cp,jp->itj", design.X, params.beta, phi_mu, optimize=True)
    phi = evaluate_basis(spec.basis_omega, h)
    R = station_correlation(dataset, spec, params.theta)
    sigma2 = evaluate_basis(spec.basis_eps, h) @ params.sigma2_eps
    return StateSpaceModel(np.asarray(dataset.values), np.asarray(dataset.observed_mask), offset, phi,
                           params.g.copy(), params.v.copy(), R, sigma2, dataset)


def station_correlation(dataset: FunctionalDataset, spec: ModelSpec, theta: float) -> np.ndarray:
    lat, lon = dataset.coordinates
    if dataset.n == 1:
        return np.array([[1.0 + JITTER]])
    D = distance_matrix(lat, lon)
    return correlation_matrix(CovarianceSpec(spec.covariance, theta, spec.nu), D, jitter=JITTER)


@dataclass(eq=False)
class FilterResult:
    pred_mean: np.ndarray   # (T, m)
    pred_cov: np.ndarray    # (T, m, m)
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    loglik: float
    loglik_terms: np.ndarray


@dataclass(eq=False)
class SmootherResult:
    mean: np.ndarray        # (T, m)
    cov: np.ndarray         # (T, m, m)
    lag_cov: np.ndarray     # (T, m, m); lag_cov[t] = Cov(z_t, z_{t-1} | all data), lag_cov[0] = 0


def _day_statistics(model: StateSpaceModel, t: int):
    """Information-form quantities of day ``t``: A, b0, e'We, N, sum log sigma2."""
    mask = model.mask[:, t, :]
    s2 = model.noise_var
    w = mask / s2[None, :]
    e0 = np.where(mask, model.y[:, t, :] - model.offset[:, t, :], 0.0)
    n, p = model.n, model.p
    C = np.einsum("ij,jk,jl->ikl", w, model.phi, model.phi, optimize=True)
    A = np.einsum("ikl,ij->kilj", C, np.eye(n)).reshape(n * p, n * p)
    b0 = np.einsum("jk,ij->ki", model.phi, w * e0).reshape(n * p)
    quad = float(np.sum(w * e0 ** 2))
    nobs = int(mask.sum())
    logdet = float(np.sum(mask * np.log(s2)[None, :]))
    return A, b0, quad, nobs, logdet


def kalman_filter(model: StateSpaceModel) -> FilterResult:
    """Kalman filter with exact prediction-error log-likelihood.

    Unobserved cells are dropped from each day's observation vector; a day
    without observations is a pure prediction step.
    """
    T, m = model.T, model.m
    f = model.transition_diag()
    Q = model.innovation_cov()
    pm = np.zeros((T, m))
    pc = np.zeros((T, m, m))
    fm = np.zeros((T, m))
    fc = np.zeros((T, m, m))
    terms = np.zeros(T)
    x, P = np.zeros(m), model.initial_cov()
    I = np.eye(m)
    for t in range(T):
        pm[t], pc[t] = x, P
        A, b0, quad, nobs, logdet = _day_statistics(model, t)
        if nobs:
            b = b0 - A @ x
            eWe = quad - 2 * x @ b0 + x @ A @ x
            M = I + P @ A
            try:
                lu, piv = linalg.lu_factor(M, check_finite=True)
            except (ValueError, linalg.LinAlgError) as exc:
                raise NumericalError(f"day {t}: observation update failed ({exc})") from None
            G = linalg.lu_solve((lu, piv), P)
            G = 0.5 * (G + G.T)
            ld = np.sum(np.log(np.abs(np.diag(lu))))
            x = x + G @ b
            IGA = I - G @ A
            # Joseph form expressed in state dimension
            P = IGA @ P @ IGA.T + G @ A @ G
            P = 0.5 * (P + P.T)
            terms[t] = -0.5 * (nobs * LOG_2PI + logdet + ld + eWe - b @ G @ b)
            if not np.isfinite(terms[t]):
                raise NumericalError(f"day {t}: non-finite log-likelihood contribution")
        fm[t], fc[t] = x, P
        x = f * x
        P = f[:, None] * P * f[None, :] + Q
        P = 0.5 * (P + P.T)
    return FilterResult(pm, pc, fm, fc, float(terms.sum()), terms)


def _smoother_gain(Pf, f, Pp):
    """``J = Pf F Pp^{-1}`` with a pseudo-inverse fallback for singular Pp."""
    FPf = f[:, None] * Pf
    try:
        c = linalg.cho_factor(Pp, check_finite=False)
        return linalg.cho_solve(c, FPf).T
    except linalg.LinAlgError:
        return (np.linalg.pinv(Pp, hermitian=True) @ FPf).T


def kalman_smoother(model: StateSpaceModel, filt: FilterResult | None = None) -> SmootherResult:
    """Fixed-interval (Rauch-Tung-Striebel) smoother with lag-one covariances."""
    filt = filt or kalman_filter(model)
    T, m = model.T, model.m
    f = model.transition_diag()
    xs = filt.filt_mean.copy()
    Ps = filt.filt_cov.copy()
    lag = np.zeros((T, m, m))
    for t in range(T - 2, -1, -1):
        J = _smoother_gain(filt.filt_cov[t], f, filt.pred_cov[t + 1])
        xs[t] = filt.filt_mean[t] + J @ (xs[t + 1] - filt.pred_mean[t + 1])
        P = filt.filt_cov[t] + J @ (Ps[t + 1] - filt.pred_cov[t + 1]) @ J.T
        Ps[t] = 0.5 * (P + P.T)
        lag[t + 1] = Ps[t + 1] @ J.T
    return SmootherResult(xs, Ps, lag)


def random_effect(model: StateSpaceModel, state_mean: np.ndarray) -> np.ndarray:
    """Evaluate ``phi_omega(h)' z(s, t)`` for every cell, shape (n, T, q)."""
    z = state_mean.reshape(model.T, model.p, model.n)
    return np.einsum("tki,jk->itj", z, model.phi)


def simulate(model: StateSpaceModel, seed, mask=None, return_latent: bool = False):
    """Draw a dataset from the model.

    The first latent state comes from the stationary distribution. The
    returned dataset copies stations, days and grid from ``model.dataset``
    and is fully observed unless ``mask`` is given.
    """
    if np.any(np.abs(model.g) >= 1):
        raise ValueError("|g| must be < 1 for a stationary latent process")
    if model.dataset is None:
        raise ValueError("model has no dataset template")
    rng = np.random.default_rng(seed)
    n, T, q, p = model.n, model.T, model.q, model.p
    L = np.linalg.cholesky(model.R)
    sd0 = np.sqrt(model.v / (1 - model.g ** 2))
    sdv = np.sqrt(model.v)
    z = np.zeros((T, p, n))
    z[0] = sd0[:, None] * (rng.standard_normal((p, n)) @ L.T)
    for t in range(1, T):
        z[t] = model.g[:, None] * z[t - 1] + sdv[:, None] * (rng.standard_normal((p, n)) @ L.T)
    omega = np.einsum("tki,jk->itj", z, model.phi)
    noise = rng.standard_normal((n, T, q)) * np.sqrt(np.maximum(model.sigma2, 0.0))[None, None, :]
    values = model.offset + omega + noise
    mask = np.ones((n, T, q), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    ds = model.dataset.with_values(np.where(mask, values, np.nan), mask)
    if return_latent:
        return ds, z.reshape(T, p * n)
    return ds
