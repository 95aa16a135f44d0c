"""Prediction at held-out stations and out-of-sample functional RMSE."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path

import numpy as np
from scipy import linalg

from ._parallel import pmap
from .basis import evaluate_basis
from .covariance import CovarianceSpec, correlation, great_circle_distance
from .data import FixedEffectsDesign, FunctionalDataset, StationMeta
from .em import EmConfig, FittedModel, fit
from .model import ModelSpec
from .state_space import assemble, kalman_filter, kalman_smoother

logger = logging.getLogger(__name__)

DEFAULT_PROPORTIONS = (0.414, 0.586)


@dataclass(eq=False)
class LatentField:
    """Smoothed random-effect coefficients at the fitted stations, shape (T, p, n)."""

    stations: tuple
    mean: np.ndarray
    R: np.ndarray


def smoothed_field(fitted: FittedModel, dataset: FunctionalDataset, design: FixedEffectsDesign) -> LatentField:
    """Run the smoother at the fitted parameters and keep the state means."""
    model = assemble(dataset, design, fitted.spec, fitted.params)
    sm = kalman_smoother(model, kalman_filter(model))
    return LatentField(tuple(dataset.stations), sm.mean.reshape(model.T, model.p, model.n), model.R)


def kriging_weights(fitted: FittedModel, field_: LatentField, target: StationMeta) -> np.ndarray:
    """Simple-kriging weights ``R^{-1} r*`` from the fitted stations to ``target``."""
    ids = {s.id for s in field_.stations}
    if target.id in ids:
        raise ValueError(f"target station {target.id!r} is one of the fitted stations")
    r = np.array([great_circle_distance((target.latitude, target.longitude), (s.latitude, s.longitude))
                  for s in field_.stations])
    if np.any(r == 0):
        raise ValueError(f"target station {target.id!r} coincides with a fitted station")
    cov = CovarianceSpec(fitted.spec.covariance, fitted.params.theta, fitted.spec.nu)
    rho = np.asarray(correlation(cov, r), dtype=float)
    return linalg.solve(field_.R, rho, assume_a="pos")


def predict_station(fitted: FittedModel, field_: LatentField, target: StationMeta, covariates, h) -> np.ndarray:
    """Predicted curves (T, len(h)) at a new station.

    ``covariates`` holds the target's design row per day, shape (T, d).
    The random effect is the kriged smoothed coefficient field.
    """
    x = np.asarray(covariates, dtype=float)
    phi_mu = evaluate_basis(fitted.spec.basis_mu, h)
    mu = x @ fitted.params.beta @ phi_mu.T
    if not fitted.spec.random_effect:
        return mu
    w = kriging_weights(fitted, field_, target)
    z = field_.mean @ w  # (T, p)
    return mu + z @ evaluate_basis(fitted.spec.basis_omega, h).T


@dataclass(frozen=True)
class CvConfig:
    in_sample_size: int = 30
    out_sample_size: int = 30
    proportions: tuple = DEFAULT_PROPORTIONS
    iterations: int = 1000
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.in_sample_size < 2 or self.out_sample_size < 1:
            raise ValueError("need at least 2 in-sample and 1 out-of-sample station")
        if abs(sum(self.proportions) - 1) > 1e-9:
            raise ValueError("cluster proportions must sum to one")


@dataclass(eq=False)
class RmseCurves:
    """Functional RMSE on the grid and the distribution of daily RMSE values."""

    h: np.ndarray
    rmse: np.ndarray
    daily: np.ndarray
    replicates: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def daily_median(self) -> float:
        return float(np.median(self.daily)) if self.daily.size else math.nan

    @property
    def daily_quartiles(self) -> tuple:
        if not self.daily.size:
            return (math.nan, math.nan)
        return tuple(float(x) for x in np.percentile(self.daily, [25, 75]))

    def summary(self) -> dict:
        q1, q3 = self.daily_quartiles
        return {
            "label": self.label,
            "replicates": self.replicates,
            "rmse_mean": float(np.nanmean(self.rmse)),
            "rmse_min": float(np.nanmin(self.rmse)),
            "rmse_max": float(np.nanmax(self.rmse)),
            "daily_median": self.daily_median,
            "daily_q25": q1,
            "daily_q75": q3,
            **self.extra,
        }

    def write(self, directory, stem: str = "rmse") -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / f"{stem}_h.csv", "w") as f:
            f.write("h,rmse\n")
            for a, b in zip(self.h, self.rmse):
                f.write(f"{a!r},{b!r}\n")
        (directory / f"{stem}_summary.json").write_text(json.dumps(self.summary(), indent=2))


def stratified_split(labels, sizes, proportions, rng):
    """Draw disjoint station index sets, each stratified by cluster.

    ``labels`` holds 1 or 2 per station;
    ``sizes`` gives the size of each set. Sampling is without replacement.
    """
    labels = np.asarray(labels)
    n = len(labels)
    pools = {k: list(rng.permutation(np.flatnonzero(labels == k))) for k in (1, 2)}
    out = []
    for size in sizes:
        n1 = int(math.floor(size * proportions[0] + 0.5))
        need = {1: n1, 2: size - n1}
        chosen = []
        for k in (1, 2):
            if len(pools[k]) < need[k]:
                raise ValueError(f"cluster {k} has too few stations for the requested split "
                                 f"({need[k]} needed, {len(pools[k])} left of {n})")
            chosen += pools[k][:need[k]]
            pools[k] = pools[k][need[k]:]
        out.append(np.array(sorted(chosen)))
    return out


def _cv_replicate(r, dataset, design, spec, cv, labels, em_config):
    rng = np.random.default_rng([cv.seed, r])
    ins, outs = stratified_split(labels, (cv.in_sample_size, cv.out_sample_size), cv.proportions, rng)
    if set(ins) & set(outs):
        raise RuntimeError("in-sample and out-of-sample stations overlap")
    try:
        sub, sub_design = dataset.subset(ins), design.subset(ins)
        fitted = fit(sub, sub_design, spec, em_config)
        field_ = smoothed_field(fitted, sub, sub_design) if spec.random_effect else None
    except (ValueError, RuntimeError, linalg.LinAlgError) as exc:
        logger.warning("cv replicate %d failed: %s", r, exc)
        return None
    h = dataset.grid.h
    sq = np.zeros(dataset.q)
    cnt = np.zeros(dataset.q)
    dsq = np.zeros(dataset.T)
    dcnt = np.zeros(dataset.T)
    for i in outs:
        pred = predict_station(fitted, field_, dataset.stations[i], design.X[i], h)
        m = dataset.observed_mask[i]
        e2 = np.where(m, (dataset.values[i] - pred) ** 2, 0.0)
        sq += e2.sum(0)
        cnt += m.sum(0)
        dsq += e2.sum(1)
        dcnt += m.sum(1)
    return sq, cnt, dsq, dcnt


def cross_validate(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec, cv: CvConfig,
                   labels=None, em_config: EmConfig | None = None, label: str = "") -> RmseCurves:
    """Repeated stratified in-sample/out-of-sample RMSE study.

    Each replicate fits on the in-sample stations, predicts the disjoint
    out-of-sample stations and accumulates squared errors on observed cells.
    ``labels`` (1 or 2 per station) stratifies the draws; without labels all
    stations form one stratum.
    """
    if labels is None:
        labels = np.ones(dataset.n, dtype=int)
        cv = CvConfig(cv.in_sample_size, cv.out_sample_size, (1.0, 0.0), cv.iterations, cv.seed, cv.workers)
    labels = np.asarray(labels)
    if cv.in_sample_size + cv.out_sample_size > dataset.n:
        raise ValueError(f"need {cv.in_sample_size + cv.out_sample_size} stations, dataset has {dataset.n}")
    # validates cluster sizes up front
    stratified_split(labels, (cv.in_sample_size, cv.out_sample_size), cv.proportions, np.random.default_rng(0))
    job = partial(_cv_replicate, dataset=dataset, design=design, spec=spec, cv=cv, labels=labels,
                  em_config=em_config)
    results = pmap(job, range(cv.iterations), cv.workers)
    ok = [r for r in results if r is not None]
    if len(ok) < 0.9 * cv.iterations:
        raise RuntimeError(f"{cv.iterations - len(ok)} of {cv.iterations} cv replicates failed")
    sq = sum(r[0] for r in ok)
    cnt = sum(r[1] for r in ok)
    daily = np.concatenate([np.sqrt(r[2][r[3] > 0] / r[3][r[3] > 0]) for r in ok])
    with np.errstate(invalid="ignore", divide="ignore"):
        rmse = np.sqrt(sq / cnt)
    return RmseCurves(dataset.grid.h, rmse, daily, len(ok), label)
