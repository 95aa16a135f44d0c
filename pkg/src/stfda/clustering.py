"""Per-weekday k-means of median daily curves under correlation distance."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import WEEKDAYS, FunctionalDataset

logger = logging.getLogger(__name__)


def median_curve(dataset: FunctionalDataset, station: int, weekday: int) -> np.ndarray:
    """Pointwise median over the station's days falling on ``weekday`` (Monday = 0).

    Only observed cells enter the median. Grid points never observed on that
    weekday are filled by linear interpolation along the grid.
    """
    days = np.flatnonzero(dataset.weekdays == weekday)
    vals = dataset.values[station, days]
    if days.size == 0 or not np.any(dataset.observed_mask[station, days]):
        raise ValueError(f"station {dataset.station_ids[station]!r} has no data on {WEEKDAYS[weekday]}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
        med = np.nanmedian(vals, axis=0)
    ok = np.isfinite(med)
    if not ok.all():
        h = dataset.grid.h
        med = np.interp(h, h[ok], med[ok])
    return med


def _standardize(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    c = x - x.mean(axis=1, keepdims=True)
    norm = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("correlation is undefined for a constant curve")
    return c / norm


def correlation_distance(a, b) -> float:
    """``1 - Pearson correlation`` between two curves, in [0, 2]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("curves must be 1-D, of equal length >= 2")
    za, zb = _standardize(a)[0], _standardize(b)[0]
    return float(np.clip(1.0 - za @ zb, 0.0, 2.0))


@dataclass(eq=False)
class KMeansResult:
    labels: np.ndarray      # 1..k
    centres: np.ndarray     # (k, q) pointwise means of member curves
    total: float            # total within-cluster correlation distance
    history: list = field(default_factory=list)


def _lloyd(Z, init_idx, max_iter, rng):
    k = len(init_idx)
    C = Z[init_idx].copy()
    labels = None
    history = []
    for _ in range(max_iter):
        D = 1.0 - Z @ C.T
        new = np.argmin(D, axis=1)
        history.append(float(D[np.arange(len(Z)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if not members.any():
                # reseed an empty cluster at the curve farthest from its centre
                far = int(np.argmax(D[np.arange(len(Z)), labels]))
                labels[far] = j
                members = labels == j
            s = Z[members].sum(axis=0)
            norm = np.linalg.norm(s)
            C[j] = s / norm if norm > 0 else Z[rng.integers(len(Z))]
    D = 1.0 - Z @ C.T
    total = float(np.clip(D[np.arange(len(Z)), labels], 0, 2).sum())
    return labels, total, history


def _plus_plus(Z, k, rng):
    idx = [int(rng.integers(len(Z)))]
    for _ in range(1, k):
        d = np.min(1.0 - Z @ Z[idx].T, axis=1).clip(0)
        if d.sum() <= 0:
            rest = [i for i in range(len(Z)) if i not in idx]
            idx.append(int(rng.choice(rest)))
        else:
            idx.append(int(rng.choice(len(Z), p=d / d.sum())))
    return idx


def kmeans_curves(curves, k: int = 2, seed: int = 0, restarts: int = 10, midday_index: int | None = None,
                  max_iter: int = 100) -> KMeansResult:
    """k-means of curves with ``1 - correlation`` as the distance.

    Assignments use the correlation-optimal centre of each cluster (the
    normalized mean of the members' standardized curves), which makes the
    objective non-increasing. Reported centres are pointwise means of the
    member curves. Label 1 goes to the centre with the highest value at
    ``midday_index`` (default: the middle grid point).
    """
    X = np.asarray(curves, dtype=float)
    if X.ndim != 2 or X.shape[0] < k:
        raise ValueError(f"need at least {k} curves")
    Z = _standardize(X)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels, total, hist = _lloyd(Z, _plus_plus(Z, k, rng), max_iter, rng)
        if best is None or total < best[1] - 1e-12:
            best = (labels, total, hist)
    labels, total, hist = best
    centres = np.array([X[labels == j].mean(axis=0) for j in range(k)])
    mid = X.shape[1] // 2 if midday_index is None else midday_index
    order = np.argsort(-centres[:, mid], kind="stable")
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    return KMeansResult(relabel[labels] + 1, centres[order], total, hist)


@dataclass(eq=False)
class ClusterResult:
    """Per-weekday cluster labels and centres plus per-station vote counts.

    ``weekday_labels[w, i]`` is the label of station ``i`` on weekday ``w``
    (0 when the station had no usable data that weekday).
    """

    station_ids: list
    h: np.ndarray
    weekday_labels: np.ndarray
    centres: dict
    k: int = 2

    @property
    def counts(self) -> np.ndarray:
        return np.stack([(self.weekday_labels == j + 1).sum(axis=0) for j in range(self.k)], axis=1)

    @property
    def majority(self) -> np.ndarray:
        """Majority label per station; ties go to the higher label (cluster 2)."""
        c = self.counts
        return (c.shape[1] - np.argmax(c[:, ::-1], axis=1)).astype(int)

    @property
    def shares(self) -> np.ndarray:
        maj = self.majority
        return np.array([(maj == j + 1).mean() for j in range(self.k)])

    def majority_labels(self) -> dict:
        return dict(zip(self.station_ids, self.majority.tolist()))

    def write(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "clusters.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["station", "weekday", "label"])
            for wd in range(7):
                for sid, lab in zip(self.station_ids, self.weekday_labels[wd]):
                    if lab:
                        w.writerow([sid, WEEKDAYS[wd], int(lab)])
        with open(directory / "centres.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["weekday", "cluster", "h", "value"])
            for wd, C in sorted(self.centres.items()):
                for j, row in enumerate(C):
                    for h, v in zip(self.h, row):
                        w.writerow([WEEKDAYS[wd], j + 1, repr(float(h)), repr(float(v))])
        with open(directory / "station_labels.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["station"] + [f"count{j + 1}" for j in range(self.k)] + ["label"])
            for sid, c, m in zip(self.station_ids, self.counts, self.majority):
                w.writerow([sid] + [int(x) for x in c] + [int(m)])


def read_station_labels(path) -> dict:
    """Majority labels from a ``station_labels.csv`` file."""
    with open(path, newline="") as f:
        return {row["station"]: int(row["label"]) for row in csv.DictReader(f)}


def assign_weekly(dataset: FunctionalDataset, k: int = 2, seed: int = 0, restarts: int = 10,
                  midday_hour: float = 12.0) -> ClusterResult:
    """Cluster stations separately for each weekday and tally their labels."""
    h = dataset.grid.h
    mid = int(np.argmin(np.abs(h - midday_hour)))
    labels = np.zeros((7, dataset.n), dtype=int)
    centres = {}
    for wd in range(7):
        idx, curves = [], []
        for i in range(dataset.n):
            try:
                c = median_curve(dataset, i, wd)
            except ValueError:
                continue
            if np.ptp(c) == 0:
                logger.info("station %s: constant median curve on %s, skipped",
                            dataset.station_ids[i], WEEKDAYS[wd])
                continue
            idx.append(i)
            curves.append(c)
        if len(idx) < k:
            continue
        res = kmeans_curves(np.array(curves), k, seed=seed + wd, restarts=restarts, midday_index=mid)
        labels[wd, idx] = res.labels
        centres[wd] = res.centres
    return ClusterResult(dataset.station_ids, h, labels, centres, k)
