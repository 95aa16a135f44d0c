"""Spatial bootstrap over stations: pooled estimates, standard errors, percentile CIs."""

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
from .data import FixedEffectsDesign, FunctionalDataset
from .em import EmConfig, fit
from .model import ModelParams, ModelSpec
from .prediction import DEFAULT_PROPORTIONS

logger = logging.getLogger(__name__)


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 1000
    m: int = 30
    proportions: tuple = DEFAULT_PROPORTIONS
    alpha: float = 0.05
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.B < 1 or self.m < 1:
            raise ValueError("B and m must be positive")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if abs(sum(self.proportions) - 1) > 1e-9:
            raise ValueError("cluster proportions must sum to one")


def stratum_sizes(m: int, proportions) -> tuple:
    """Stations per cluster: ``round(m * p1)`` from cluster 1, the rest from cluster 2."""
    n1 = int(math.floor(m * proportions[0] + 0.5))
    return n1, m - n1


def draw_sample(labels, config: BootstrapConfig, index: int) -> np.ndarray:
    """Station indices of bootstrap replicate ``index``, drawn with replacement.

    With ``labels`` (1 or 2 per station) the draw is stratified by cluster;
    if every label is 1 all stations form one pool. Deterministic in
    ``(config.seed, index)``.
    """
    rng = np.random.default_rng([config.seed, index])
    labels = np.asarray(labels)
    if np.all(labels == 1):
        return rng.choice(len(labels), size=config.m, replace=True)
    out = []
    for k, size in zip((1, 2), stratum_sizes(config.m, config.proportions)):
        pool = np.flatnonzero(labels == k)
        if pool.size == 0:
            raise ValueError(f"cluster {k} is empty")
        out.append(rng.choice(pool, size=size, replace=True))
    return np.concatenate(out)


def bootstrap_se(values) -> np.ndarray:
    """Replicate standard deviation with the ``B - 1`` denominator."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] < 2:
        raise ValueError("standard errors need at least two replicates")
    mean = v.mean(axis=0)
    return np.sqrt(np.sum((v - mean) ** 2, axis=0) / (v.shape[0] - 1))


def percentile_ci(values, alpha: float):
    """Nearest-rank ``alpha/2`` and ``1 - alpha/2`` quantiles along axis 0."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie strictly between 0 and 1")
    v = np.sort(np.asarray(values, dtype=float), axis=0)
    B = v.shape[0]
    if B < 2:
        raise ValueError("percentile intervals need at least two values")

    def rank(p):
        return min(max(int(math.ceil(p * B - 1e-9)), 1), B)

    return v[rank(alpha / 2) - 1], v[rank(1 - alpha / 2) - 1]


@dataclass(eq=False)
class BootstrapResult:
    """Replicate parameter vectors and parameter-function curves.

    ``curves`` maps a function name to a (B, q) array evaluated on ``h``.
    """

    names: list
    replicates: np.ndarray
    h: np.ndarray
    curves: dict
    alpha: float
    samples: list = field(default_factory=list)
    dropped: int = 0

    @property
    def B(self) -> int:
        return self.replicates.shape[0]

    @property
    def estimate(self) -> np.ndarray:
        return self.replicates.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        return bootstrap_se(self.replicates)

    def ci(self):
        return percentile_ci(self.replicates, self.alpha)

    def curve_band(self, name: str):
        """Pointwise mean, lower and upper percentile bound of a parameter function."""
        c = self.curves[name]
        lo, hi = percentile_ci(c, self.alpha)
        return c.mean(axis=0), lo, hi

    def to_dict(self) -> dict:
        lo, hi = self.ci()
        return {
            "B": self.B,
            "dropped": self.dropped,
            "alpha": self.alpha,
            "parameters": {
                n: {"estimate": float(e), "se": float(s), "lower": float(a), "upper": float(b)}
                for n, e, s, a, b in zip(self.names, self.estimate, self.se, lo, hi)
            },
        }

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "bootstrap.json").write_text(json.dumps(self.to_dict(), indent=2))
        bands = directory / "bands"
        bands.mkdir(exist_ok=True)
        for name in self.curves:
            mean, lo, hi = self.curve_band(name)
            safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in name).strip("_")
            with open(bands / f"{safe}.csv", "w") as f:
                f.write("h,mean,lower,upper\n")
                for row in zip(self.h, mean, lo, hi):
                    f.write(",".join(repr(float(x)) for x in row) + "\n")


def _replicate(index, dataset, design, spec, config, labels, em_config):
    idx = draw_sample(labels, config, index)
    try:
        fitted = fit(dataset.subset(idx), design.subset(idx), spec, em_config)
    except (ValueError, RuntimeError, linalg.LinAlgError) as exc:
        logger.warning("bootstrap replicate %d dropped: %s", index, exc)
        return index, idx, None, None
    return index, idx, fitted.params.vector(), fitted.curves(dataset.grid.h)


def run(dataset: FunctionalDataset, design: FixedEffectsDesign, spec: ModelSpec, config: BootstrapConfig,
        labels=None, em_config: EmConfig | None = None) -> BootstrapResult:
    """Fit the model on ``config.B`` resampled station sets.

    Replicates whose fit fails are dropped and logged; more than 10% drops
    is an error.
    """
    if labels is None:
        labels = np.ones(dataset.n, dtype=int)
    job = partial(_replicate, dataset=dataset, design=design, spec=spec, config=config,
                  labels=np.asarray(labels), em_config=em_config)
    results = pmap(job, range(config.B), config.workers)
    ok = [r for r in results if r[2] is not None]
    dropped = config.B - len(ok)
    if dropped > 0.1 * config.B:
        raise BootstrapError(f"{dropped} of {config.B} bootstrap replicates failed")
    if not ok:
        raise BootstrapError("no bootstrap replicate succeeded")
    template = ModelParams(np.zeros((design.d, spec.p_mu)), np.zeros(spec.p_omega),
                           np.zeros(spec.p_omega), 1.0, np.zeros(spec.p_eps))
    names = template.vector_names(list(design.names))
    curves = {k: np.array([r[3][k] for r in ok]) for k in ok[0][3]}
    return BootstrapResult(names, np.array([r[2] for r in ok]), dataset.grid.h, curves, config.alpha,
                           [r[1] for r in ok], dropped)
