"""Maximum-likelihood estimation by EM with Kalman-smoother E-steps.

Each M-step is a sequence of conditional maximizations of the expected
complete-data log-likelihood ``Q``, so the observed-data likelihood never
decreases:

* ``beta`` by generalized least squares on ``y - phi_omega' E[z]``;
* each ``(g_j, sigma2_eta_j)`` jointly, given the range;
* the range ``theta`` by golden-section search on ``log theta``;
* the error-variance coefficients by non-negative least squares on the
  binned expected squared residuals, refined on ``Q`` itself.

The first latent state has the stationary prior, whose covariance depends on
``g``, ``V`` and ``theta``; its contribution is kept in the ``g``/``V`` and
``theta`` objectives.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg, optimize

from .basis import evaluate_basis
from .covariance import JITTER, CovarianceSpec, correlation_matrix, distance_matrix
from .data import FixedEffectsDesign, FunctionalDataset
from .model import G_BOUND, SIGMA2_FLOOR, ModelParams, ModelSpec
from .state_space import (LOG_2PI, NumericalError, SmootherResult, StateSpaceModel, assemble,
                          kalman_filter, kalman_smoother, random_effect)

logger = logging.getLogger(__name__)

V_FLOOR = 1e-10
GOLDEN = (math.sqrt(5) - 1) / 2


class CollinearityError(ValueError):
    """The generalized least-squares normal equations are singular."""


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 200
    loglik_rel_tol: float = 1e-5
    theta_bounds: tuple = (10.0, 100_000.0)
    theta_tol: float = 1e-3
    theta_grid: int = 25

    def __post_init__(self):
        lo, hi = self.theta_bounds
        if not 0 < lo < hi:
            raise ValueError("theta bounds must be positive and ordered")


@dataclass(eq=False)
class FittedModel:
    """Estimated parameters plus the log-likelihood trace of the fit."""

    spec: ModelSpec
    params: ModelParams
    design_names: tuple
    loglik_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def beta(self) -> np.ndarray:
        return self.params.beta

    @property
    def transition(self) -> np.ndarray:
        return self.params.g

    @property
    def innovation(self) -> np.ndarray:
        return self.params.v

    @property
    def theta(self) -> float:
        return self.params.theta

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1] if self.loglik_trace else math.nan

    def beta_functions(self, h) -> dict:
        """Fixed-effect functions evaluated at ``h``, keyed by design name."""
        curves = evaluate_basis(self.spec.basis_mu, h) @ self.params.beta.T
        return {name: curves[:, c] for c, name in enumerate(self.design_names)}

    def error_variance(self, h) -> np.ndarray:
        return np.maximum(evaluate_basis(self.spec.basis_eps, h) @ self.params.sigma2_eps, SIGMA2_FLOOR)

    def curves(self, h) -> dict:
        out = {f"beta[{k}]": v for k, v in self.beta_functions(h).items()}
        out["sigma2_eps"] = self.error_variance(h)
        return out

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "design_names": list(self.design_names),
            "params": self.params.to_dict(),
            "loglik_trace": list(self.loglik_trace),
            "iterations": self.iterations,
            "converged": self.converged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        return cls(ModelSpec.from_dict(d["spec"]), ModelParams.from_dict(d["params"]),
                   tuple(d["design_names"]), list(d["loglik_trace"]), int(d["iterations"]),
                   bool(d["converged"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "FittedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def export_curves(self, directory, h) -> list:
        """Write one ``(h, value)`` CSV per parameter function."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = []
        for name, vals in self.curves(h).items():
            path = directory / f"{_safe(name)}.csv"
            with open(path, "w") as f:
                f.write("h,value\n")
                for a, b in zip(h, vals):
                    f.write(f"{a!r},{b!r}\n")
            written.append(path)
        return written


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name).strip("_")


# ----------------------------------------------------------------------------
# Initialization
# ----------------------------------------------------------------------------

def _normal_equations(dataset, design, phi_mu, weights, target):
    """Weighted normal equations for vec(beta), ordered (covariate, coefficient)."""
    X = design.X
    C = np.einsum("itj,ja,jb->itab", weights, phi_mu, phi_mu, optimize=True)
    N = np.einsum("itc,itd,itab->cadb", X, X, C, optimize=True)
    rhs = np.einsum("itc,itj,ja->ca", X, weights * target, phi_mu, optimize=True)
    d, p = X.shape[2], phi_mu.shape[1]
    return N.reshape(d * p, d * p), rhs.reshape(d * p)


def _solve_beta(dataset, design, N, rhs, p_mu):
    d = design.d
    scale = np.sqrt(np.maximum(np.diag(N), 1e-300))
    Ns = N / scale[:, None] / scale[None, :]
    try:
        c = linalg.cho_factor(Ns, check_finite=True)
        ok = np.min(np.abs(np.diag(c[0]))) ** 2 > 1e-12
    except (linalg.LinAlgError, ValueError):
        ok = False
    if not ok or np.any(np.diag(N) <= 0):
        raise CollinearityError(_collinearity_message(dataset, design))
    return (linalg.cho_solve(c, rhs / scale) / scale).reshape(d, p_mu)


def _collinearity_message(dataset, design) -> str:
    used = dataset.observed_mask.any(axis=2)
    Xo = design.X[used]
    G = Xo.T @ Xo
    w, U = np.linalg.eigh(G)
    tol = max(w.max(), 1.0) * 1e-10
    names = set()
    for k in np.flatnonzero(w <= tol):
        vec = U[:, k]
        names.update(design.names[c] for c in np.flatnonzero(np.abs(vec) > 1e-6))
    if names:
        return f"singular normal equations; collinear covariates: {', '.join(sorted(names))}"
    return "singular normal equations; fixed-effect basis not identified by the observed grid points"


def default_init(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec) -> ModelParams:
    """Starting values: OLS fixed effects, g = 0.5, range from the station spacing.

    The residual variance is split evenly between the innovation variances
    and the error variance.
    """
    h = dataset.grid.h
    phi_mu = evaluate_basis(spec.basis_mu, h)
    mask = dataset.observed_mask
    y = np.where(mask, dataset.values, 0.0)
    N, rhs = _normal_equations(dataset, design, phi_mu, mask.astype(float), y)
    beta = _solve_beta(dataset, design, N, rhs, spec.p_mu)
    fitted = np.einsum("itc,cp,jp->itj", design.X, beta, phi_mu, optimize=True)
    resid = (y - fitted)[mask]
    s2 = float(np.mean(resid ** 2)) if resid.size else 0.0
    half = max(0.5 * s2, SIGMA2_FLOOR)
    lat, lon = dataset.coordinates
    theta = 1000.0
    if dataset.n > 1 and np.all(np.isfinite(lat)):
        D = distance_matrix(lat, lon)
        nz = D[np.triu_indices(dataset.n, 1)]
        nz = nz[nz > 0]
        if nz.size:
            theta = float(np.median(nz)) / 10.0
    p = spec.p_omega
    g = np.full(p, 0.5) if spec.random_effect else np.zeros(p)
    v = np.full(p, half) if spec.random_effect else np.zeros(p)
    return ModelParams(beta, g, v, theta, np.full(spec.p_eps, half))


# ----------------------------------------------------------------------------
# Expected complete-data log-likelihood pieces
# ----------------------------------------------------------------------------

@dataclass(eq=False)
class LatentMoments:
    """Smoothed second moments of each coefficient block (n x n matrices).

    ``first[k] = E[z_1k z_1k']``, ``s11[k] = sum_{t>=2} E[z_tk z_tk']``,
    ``s00[k] = sum_{t<=T-1} E[z_tk z_tk']`` and
    ``s10[k] = sum_{t>=2} E[z_tk z_(t-1)k']``.
    """

    first: np.ndarray
    s11: np.ndarray
    s00: np.ndarray
    s10: np.ndarray
    T: int

    @classmethod
    def from_smoother(cls, sm: SmootherResult, n: int, p: int) -> "LatentMoments":
        T = sm.mean.shape[0]
        x = sm.mean.reshape(T, p, n)
        P = sm.cov.reshape(T, p, n, p, n)
        L = sm.lag_cov.reshape(T, p, n, p, n)
        second = np.einsum("tkakb->tkab", P) + np.einsum("tka,tkb->tkab", x, x)
        cross = np.einsum("tkakb->tkab", L[1:]) + np.einsum("tka,tkb->tkab", x[1:], x[:-1])
        return cls(second[0], second[1:].sum(0), second[:-1].sum(0), cross.sum(0), T)


def latent_objective(mom: LatentMoments, g, v, R) -> float:
    """Latent part of ``Q`` (up to constants) for given g, V and correlation R."""
    n = R.shape[0]
    T = mom.T
    c = linalg.cho_factor(R)
    logdet_R = 2 * np.sum(np.log(np.diag(c[0])))
    total = 0.0
    for k in range(len(g)):
        M = _block_scatter(mom, k, g[k])
        tr = np.trace(linalg.cho_solve(c, M))
        total += n * T * math.log(v[k]) - n * math.log(1 - g[k] ** 2) + T * logdet_R + tr / v[k]
    return -0.5 * total


def _block_scatter(mom, k, g):
    s10 = mom.s10[k] + mom.s10[k].T
    return (1 - g ** 2) * mom.first[k] + mom.s11[k] - g * s10 + g ** 2 * mom.s00[k]


def _update_gv(mom: LatentMoments, R, g_old, v_old):
    n, T = R.shape[0], mom.T
    c = linalg.cho_factor(R)
    g_new, v_new = np.array(g_old, dtype=float), np.array(v_old, dtype=float)
    for k in range(len(g_old)):
        a0 = np.trace(linalg.cho_solve(c, mom.first[k]))
        s11 = np.trace(linalg.cho_solve(c, mom.s11[k]))
        s00 = np.trace(linalg.cho_solve(c, mom.s00[k]))
        s10 = np.trace(linalg.cho_solve(c, mom.s10[k]))

        def vhat(g):
            return max(((1 - g * g) * a0 + s11 - 2 * g * s10 + g * g * s00) / (n * T), V_FLOOR)

        def profile(g):
            return n * T * math.log(vhat(g)) - n * math.log(1 - g * g)

        res = optimize.minimize_scalar(profile, bounds=(-G_BOUND, G_BOUND), method="bounded",
                                       options={"xatol": 1e-10})
        candidates = [float(res.x), -G_BOUND, G_BOUND, float(g_old[k])]
        best = min(candidates, key=profile)
        g_new[k] = best
        v_new[k] = vhat(best)
        # keep the old pair if the new one does not improve Q
        old = n * T * math.log(max(v_old[k], V_FLOOR)) - n * math.log(1 - g_old[k] ** 2) + \
            ((1 - g_old[k] ** 2) * a0 + s11 - 2 * g_old[k] * s10 + g_old[k] ** 2 * s00) / max(v_old[k], V_FLOOR)
        new = profile(best) + n * T
        if new > old:
            g_new[k], v_new[k] = g_old[k], v_old[k]
    return g_new, v_new


def theta_objective(mom: LatentMoments, g, v, D, spec: ModelSpec, log_theta: float) -> float:
    """Latent part of ``Q`` as a function of ``log theta`` (to be maximized)."""
    R = correlation_matrix(CovarianceSpec(spec.covariance, math.exp(log_theta), spec.nu), D, jitter=JITTER)
    try:
        return latent_objective(mom, g, v, R)
    except linalg.LinAlgError:
        return -math.inf


def golden_section(f, a: float, b: float, tol: float):
    """Maximize a unimodal ``f`` on ``[a, b]`` to an interval width below ``tol``."""
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _update_theta(mom, g, v, D, spec, theta_old, config: EmConfig):
    lo, hi = (math.log(b) for b in config.theta_bounds)

    def f(lt):
        return theta_objective(mom, g, v, D, spec, lt)

    grid = np.linspace(lo, hi, config.theta_grid)
    vals = np.array([f(x) for x in grid])
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    x, fx = golden_section(f, a, b, config.theta_tol)
    if vals[k] > fx:
        x, fx = grid[k], vals[k]
    lt_old = math.log(min(max(theta_old, config.theta_bounds[0]), config.theta_bounds[1]))
    if f(lt_old) >= fx:
        return math.exp(lt_old)
    return math.exp(x)


def _obs_objective(S, N, s):
    s = np.maximum(s, SIGMA2_FLOOR)
    return -0.5 * float(np.sum(N * np.log(s) + S / s))


def _update_sigma2(S, N, phi_eps, c_old):
    """Error-variance coefficients: NNLS start, then ascent on Q over c >= floor."""
    use = N > 0
    A = np.sqrt(N[use])[:, None] * phi_eps[use]
    b = np.sqrt(N[use]) * (S[use] / N[use])
    c0 = np.maximum(optimize.nnls(A, b)[0], SIGMA2_FLOOR)

    def negq(c):
        s = phi_eps @ c
        grad_s = -0.5 * (N / s - S / s ** 2)
        return 0.5 * float(np.sum(N * np.log(s) + S / s)), phi_eps.T @ grad_s

    res = optimize.minimize(negq, c0, jac=True, method="L-BFGS-B",
                            bounds=[(SIGMA2_FLOOR, None)] * len(c0))
    cands = [np.asarray(c_old, dtype=float), c0, np.maximum(res.x, SIGMA2_FLOOR)]
    return max(cands, key=lambda c: _obs_objective(S, N, phi_eps @ c))


# ----------------------------------------------------------------------------
# EM driver
# ----------------------------------------------------------------------------

def _independent_loglik(model: StateSpaceModel) -> float:
    s2 = model.noise_var[None, None, :]
    r = np.where(model.mask, model.y - model.offset, 0.0)
    return float(-0.5 * np.sum(model.mask * (LOG_2PI + np.log(s2) + r ** 2 / s2)))


def loglikelihood(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec,
                  params: ModelParams) -> float:
    """Exact marginal log-likelihood of the observed cells."""
    model = assemble(dataset, design, spec, params)
    if not spec.random_effect:
        return _independent_loglik(model)
    return kalman_filter(model).loglik


def m_step(dataset, design, spec, params: ModelParams, model: StateSpaceModel,
           smooth: SmootherResult | None, config: EmConfig, D=None) -> ModelParams:
    """One round of conditional maximizations given the smoothed moments."""
    h = dataset.grid.h
    phi_mu = evaluate_basis(spec.basis_mu, h)
    phi_eps = evaluate_basis(spec.basis_eps, h)
    mask = dataset.observed_mask
    y = np.where(mask, dataset.values, 0.0)
    n, T, p = model.n, model.T, model.p

    if smooth is not None:
        omega = random_effect(model, smooth.mean)
        blocks = np.einsum("tkili->tikl", smooth.cov.reshape(T, p, n, p, n))
        quad = np.einsum("jk,tikl,jl->itj", model.phi, blocks, model.phi, optimize=True)
    else:
        omega = np.zeros_like(y)
        quad = np.zeros_like(y)

    # beta: GLS on y - E[omega] with weights 1 / sigma2(h)
    w = mask / model.noise_var[None, None, :]
    N, rhs = _normal_equations(dataset, design, phi_mu, w, y - omega)
    beta = _solve_beta(dataset, design, N, rhs, spec.p_mu)
    mu = np.einsum("itc,cp,jp->itj", design.X, beta, phi_mu, optimize=True)

    g, v, theta = params.g, params.v, params.theta
    if smooth is not None:
        mom = LatentMoments.from_smoother(smooth, n, p)
        g, v = _update_gv(mom, model.R, params.g, params.v)
        if n > 1:
            theta = _update_theta(mom, g, v, D, spec, params.theta, config)

    # error variance from binned expected squared residuals
    r = np.where(mask, y - mu - omega, 0.0)
    S = np.sum(mask * (r ** 2 + quad), axis=(0, 1))
    cnt = mask.sum(axis=(0, 1)).astype(float)
    sigma2 = _update_sigma2(S, cnt, phi_eps, params.sigma2_eps)
    return ModelParams(beta, g, v, theta, sigma2)


def fit(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec,
        config: EmConfig | None = None, init: ModelParams | None = None) -> FittedModel:
    """Fit the model by EM; stops on relative log-likelihood change below tolerance."""
    config = config or EmConfig()
    if dataset.n < 2 or dataset.T < 2:
        raise ValueError("fitting needs at least 2 stations and 2 days")
    if spec.basis_eps.family != "bspline":
        raise ValueError("the error-variance basis must be a B-spline basis")
    params = init if init is not None else default_init(dataset, design, spec)
    lo, hi = config.theta_bounds
    params = params.replace(theta=min(max(params.theta, lo), hi),
                            g=np.clip(params.g, -G_BOUND, G_BOUND))
    if not spec.random_effect:
        params = params.replace(g=np.zeros_like(params.g), v=np.zeros_like(params.v))
    lat, lon = dataset.coordinates
    D = distance_matrix(lat, lon) if dataset.n > 1 else np.zeros((1, 1))

    trace: list = []
    converged = False
    it = 0
    for it in range(config.max_iterations + 1):
        model = assemble(dataset, design, spec, params)
        if spec.random_effect:
            filt = kalman_filter(model)
            ll = filt.loglik
        else:
            filt, ll = None, _independent_loglik(model)
        if not np.isfinite(ll):
            raise NumericalError(f"non-finite log-likelihood at iteration {it}")
        trace.append(ll)
        logger.debug("iteration %d: loglik %.6f", it, ll)
        if it > 0 and abs(trace[-1] - trace[-2]) <= config.loglik_rel_tol * abs(trace[-2]):
            converged = True
            break
        if it == config.max_iterations:
            break
        smooth = kalman_smoother(model, filt) if spec.random_effect else None
        params = m_step(dataset, design, spec, params, model, smooth, config, D)
    return FittedModel(spec, params, design.names, trace, it, converged)
