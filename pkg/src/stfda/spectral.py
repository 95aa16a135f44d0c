"""Station periodograms, relative magnitudes across stations, functional boxplots."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FunctionalDataset

GAP_FLAG = 0.2


@dataclass(eq=False)
class Periodogram:
    """One station's spectrum at the positive Fourier frequencies (cycles/day).

    ``magnitudes`` are ``|DFT|`` by default, or ``|DFT|^2`` when built with
    ``power=True``. ``dc`` keeps the zero-frequency term, which is excluded
    from relative magnitudes.
    """

    frequencies: np.ndarray
    magnitudes: np.ndarray
    dc: float
    gap_fraction: float = 0.0

    @property
    def flagged(self) -> bool:
        return self.gap_fraction > GAP_FLAG


def fill_gaps(series) -> tuple:
    """Linearly interpolate NaNs; ends take the nearest observed value."""
    x = np.asarray(series, dtype=float)
    ok = np.isfinite(x)
    if not ok.any():
        raise ValueError("series is entirely missing")
    frac = 1.0 - ok.mean()
    if frac > 0:
        t = np.arange(x.size)
        x = np.interp(t, t[ok], x[ok])
    return x, float(frac)


def periodogram(series, spacing_days: float, power: bool = False) -> Periodogram:
    """DFT magnitude spectrum of an evenly spaced series with optional gaps."""
    x, frac = fill_gaps(series)
    if x.size < 2:
        raise ValueError("series needs at least two samples")
    X = np.abs(np.fft.rfft(x))
    freqs = np.fft.rfftfreq(x.size, d=spacing_days)
    mags = X[1:] ** 2 if power else X[1:]
    return Periodogram(freqs[1:], mags, float(X[0] ** 2 if power else X[0]), frac)


def station_periodograms(dataset: FunctionalDataset, power: bool = False) -> list:
    """Periodogram of each station's concatenated series over the whole period.

    Requires a regular grid; the sample spacing is the grid step in days.
    """
    h = dataset.grid.h
    step = np.diff(h)
    if step.size == 0 or np.ptp(step) > 1e-9 or abs(step[0] * dataset.q - 24) > 1e-6:
        raise ValueError("periodograms need a regular grid covering the whole day")
    spacing = step[0] / 24.0
    return [periodogram(dataset.values[i].reshape(-1), spacing, power) for i in range(dataset.n)]


def relative_magnitude(periodograms) -> tuple:
    """Percent share of each frequency in the magnitude summed over all stations."""
    if not periodograms:
        raise ValueError("no periodograms")
    f0 = periodograms[0].frequencies
    for p in periodograms[1:]:
        if p.frequencies.shape != f0.shape or not np.allclose(p.frequencies, f0, rtol=0, atol=1e-12):
            raise ValueError("periodograms are on different frequency grids")
    total = np.sum([p.magnitudes for p in periodograms], axis=0)
    denom = total.sum()
    if denom <= 0:
        raise ValueError("total magnitude is zero")
    return f0, 100.0 * total / denom


def band_depth(curves) -> np.ndarray:
    """Modified band depth with bands formed by pairs of curves.

    For each curve and grid point, counts the pairs whose band contains it:
    all pairs minus those lying strictly below or strictly above.
    """
    Y = np.asarray(curves, dtype=float)
    n, q = Y.shape
    S = np.sort(Y, axis=0)
    below = np.empty_like(Y)
    above = np.empty_like(Y)
    for j in range(q):
        below[:, j] = np.searchsorted(S[:, j], Y[:, j], side="left")
        above[:, j] = n - np.searchsorted(S[:, j], Y[:, j], side="right")
    inside = math.comb(n, 2) - below * (below - 1) / 2 - above * (above - 1) / 2
    return inside.mean(axis=1) / math.comb(n, 2)


@dataclass(eq=False)
class FunctionalBoxplotStats:
    depth: np.ndarray
    median_index: int
    median: np.ndarray
    central_lower: np.ndarray
    central_upper: np.ndarray
    whisker_lower: np.ndarray
    whisker_upper: np.ndarray
    outliers: np.ndarray


def functional_boxplot(curves, factor: float = 1.5) -> FunctionalBoxplotStats:
    """Median, 50% central region, whiskers and outliers of a curve ensemble."""
    Y = np.asarray(curves, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 3:
        raise ValueError("functional boxplot needs at least 3 curves")
    depth = band_depth(Y)
    order = np.argsort(-depth, kind="stable")
    central = Y[order[: math.ceil(Y.shape[0] / 2)]]
    lo, hi = central.min(axis=0), central.max(axis=0)
    iqr = hi - lo
    wlo, whi = lo - factor * iqr, hi + factor * iqr
    out = np.flatnonzero(np.any((Y < wlo) | (Y > whi), axis=1))
    return FunctionalBoxplotStats(depth, int(order[0]), Y[order[0]], lo, hi, wlo, whi, out)


def write_periodograms(periodograms, station_ids, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "gaps.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["station", "gap_fraction", "flagged"])
        for sid, p in zip(station_ids, periodograms):
            w.writerow([sid, repr(p.gap_fraction), int(p.flagged)])
    for k, (sid, p) in enumerate(zip(station_ids, periodograms)):
        with open(directory / f"periodogram_{k:04d}.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["station", "frequency", "magnitude"])
            for a, b in zip(p.frequencies, p.magnitudes):
                w.writerow([sid, repr(float(a)), repr(float(b))])
    f0, pct = relative_magnitude(periodograms)
    with open(directory / "relative_magnitude.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["frequency", "percent"])
        for a, b in zip(f0, pct):
            w.writerow([repr(float(a)), repr(float(b))])


def write_boxplot(stats: FunctionalBoxplotStats, h, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["h", "median", "central_lower", "central_upper", "whisker_lower", "whisker_upper"])
        for row in zip(h, stats.median, stats.central_lower, stats.central_upper,
                       stats.whisker_lower, stats.whisker_upper):
            w.writerow([repr(float(x)) for x in row])
