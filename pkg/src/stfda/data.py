"""In-memory containers for station-day curves and their CSV ingestion."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

WEEKDAYS = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")
HIRE_HEADER = ["station_id", "timestamp", "bike_count"]
META_HEADER = ["id", "name", "lat", "lon", "elevation_m", "dist_metro_km", "dist_train_km"]
WEATHER_HEADER = ["timestamp", "temperature_C", "cloud_okta", "wind_ms", "precip_mm"]
WEATHER_NAMES = ("temperature", "cloud", "wind", "precipitation")
STATION_COVARIATES = ("elevation", "dist_metro", "dist_train")
DEFAULT_COVARIATES = ("saturday", "sunday") + WEATHER_NAMES + STATION_COVARIATES


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class FunctionalGrid:
    """Evaluation abscissae (hours) shared by every functional observation."""

    points: tuple = field(default_factory=lambda: tuple(np.arange(288) * 5 / 60))
    domain_start: float = 0.0
    domain_end: float = 24.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise ValueError("grid needs at least one point")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        if pts[0] < self.domain_start or pts[-1] >= self.domain_end:
            raise ValueError("grid points must lie in [domain_start, domain_end)")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @classmethod
    def regular(cls, q: int) -> "FunctionalGrid":
        """``q`` equally spaced points starting at midnight."""
        return cls(tuple(np.arange(q) * 24.0 / q))

    @property
    def q(self) -> int:
        return len(self.points)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.points)


@dataclass(frozen=True)
class StationMeta:
    id: str
    name: str = ""
    latitude: float = math.nan
    longitude: float = math.nan
    elevation: float = 0.0
    dist_metro: float = 0.0
    dist_train: float = 0.0

    def __post_init__(self):
        # NaN coordinates mark stations known only from hire data
        if abs(self.latitude) > 90:
            raise DataError(f"station {self.id}: latitude {self.latitude} outside [-90, 90]")
        if abs(self.longitude) > 180:
            raise DataError(f"station {self.id}: longitude {self.longitude} outside [-180, 180]")
        for name in ("elevation", "dist_metro", "dist_train"):
            if getattr(self, name) < 0:
                raise DataError(f"station {self.id}: {name} must be non-negative")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FunctionalDataset:
    """Station x day x grid array of counts with an observation mask.

    ``values[i, t, j]`` is the count at station ``i`` on day ``t`` at grid
    point ``j``. Unobserved cells hold NaN.
    """

    stations: tuple
    days: tuple
    grid: FunctionalGrid
    values: np.ndarray
    observed_mask: np.ndarray
    n_rejected: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.observed_mask, dtype=bool)
        n, T, q = len(self.stations), len(self.days), self.grid.q
        if min(n, T, q) <= 0:
            raise DataError("dataset needs at least one station, day and grid point")
        if values.shape != (n, T, q) or mask.shape != (n, T, q):
            raise DataError(f"values/mask must have shape {(n, T, q)}, got {values.shape} and {mask.shape}")
        if not np.all(np.isfinite(values[mask])):
            raise DataError("observed values must be finite")
        values = np.where(mask, values, np.nan)
        object.__setattr__(self, "stations", tuple(self.stations))
        object.__setattr__(self, "days", tuple(self.days))
        object.__setattr__(self, "values", _frozen(values, float))
        object.__setattr__(self, "observed_mask", _frozen(mask, bool))

    @property
    def shape(self):
        return self.values.shape

    @property
    def n(self) -> int:
        return len(self.stations)

    @property
    def T(self) -> int:
        return len(self.days)

    @property
    def q(self) -> int:
        return self.grid.q

    @property
    def station_ids(self) -> list:
        return [s.id for s in self.stations]

    @property
    def weekdays(self) -> np.ndarray:
        """Weekday index per day, Monday = 0."""
        return np.array([d.weekday() for d in self.days])

    @property
    def coordinates(self) -> tuple:
        lat = np.array([s.latitude for s in self.stations])
        lon = np.array([s.longitude for s in self.stations])
        return lat, lon

    def subset(self, station_indices) -> "FunctionalDataset":
        """Dataset restricted to ``station_indices``.

        Repeated indices become distinct stations (ids suffixed ``#2``, ``#3``,
        ...) with identical data and coordinates.
        """
        idx = [int(i) for i in station_indices]
        seen: dict = {}
        stations = []
        for i in idx:
            s = self.stations[i]
            seen[i] = seen.get(i, 0) + 1
            stations.append(s if seen[i] == 1 else replace(s, id=f"{s.id}#{seen[i]}"))
        return FunctionalDataset(stations, self.days, self.grid,
                                 self.values[idx], self.observed_mask[idx])

    def with_values(self, values, mask=None) -> "FunctionalDataset":
        mask = self.observed_mask if mask is None else mask
        return FunctionalDataset(self.stations, self.days, self.grid, values, mask)


@dataclass(frozen=True, eq=False)
class CovariateSet:
    """Named scalar covariates per (station, day).

    Each entry of ``values`` is an array broadcastable to ``(n, T)``:
    shape ``(n, 1)`` for station-constant and ``(1, T)`` for day-constant
    covariates.
    """

    names: tuple
    values: Mapping

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if set(self.names) != set(self.values):
            raise DataError("covariate names and values disagree")
        for k, v in self.values.items():
            v = np.asarray(v, dtype=float)
            if v.ndim != 2:
                raise DataError(f"covariate {k!r} must be 2-D (n x T, n x 1 or 1 x T)")
            if not np.all(np.isfinite(v)):
                raise DataError(f"covariate {k!r} has missing entries")

    @property
    def d(self) -> int:
        return len(self.names)

    def table(self, name: str, n: int, T: int) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.values[name], dtype=float), (n, T)).copy()

    def merge(self, other: "CovariateSet") -> "CovariateSet":
        dup = set(self.names) & set(other.names)
        if dup:
            raise DataError(f"duplicate covariates: {sorted(dup)}")
        return CovariateSet(self.names + other.names, {**self.values, **other.values})

    @classmethod
    def from_stations(cls, stations: Sequence[StationMeta]) -> "CovariateSet":
        """Station-constant covariates (elevation and transit distances)."""
        vals = {
            "elevation": np.array([[s.elevation] for s in stations], dtype=float),
            "dist_metro": np.array([[s.dist_metro] for s in stations], dtype=float),
            "dist_train": np.array([[s.dist_train] for s in stations], dtype=float),
        }
        return cls(STATION_COVARIATES, vals)


@dataclass(frozen=True, eq=False)
class FixedEffectsDesign:
    """Scalar covariate values ``x_c(s, t)`` for every station-day, shape (n, T, d)."""

    names: tuple
    X: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 3 or X.shape[2] != len(self.names):
            raise DataError("design must be (n, T, d) with d names")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "X", _frozen(X, float))

    @property
    def d(self) -> int:
        return len(self.names)

    def subset(self, station_indices) -> "FixedEffectsDesign":
        return FixedEffectsDesign(self.names, self.X[list(station_indices)])

    @classmethod
    def intercept(cls, n: int, T: int) -> "FixedEffectsDesign":
        return cls(("intercept",), np.ones((n, T, 1)))


# ----------------------------------------------------------------------------
# CSV ingestion
# ----------------------------------------------------------------------------

def _open_csv(path, header):
    f = open(path, newline="", encoding="utf-8")
    reader = csv.reader(f)
    first = next(reader, None)
    if first is None or [c.strip() for c in first] != header:
        f.close()
        raise DataError(f"{path}: expected header {','.join(header)}")
    return f, reader


def _parse_timestamp(text: str, utc_offset_hours):
    ts = dt.datetime.fromisoformat(text.strip())
    if ts.tzinfo is not None:
        if utc_offset_hours is not None:
            ts = ts.astimezone(dt.timezone(dt.timedelta(hours=utc_offset_hours)))
        ts = ts.replace(tzinfo=None)
    return ts


def ingest_hire_data(path, grid: FunctionalGrid | None = None, stations: Sequence[StationMeta] | None = None,
                     start: dt.date | None = None, end: dt.date | None = None,
                     tolerance_minutes: float = 2.5, utc_offset_hours: float | None = None) -> FunctionalDataset:
    """Read ``station_id,timestamp,bike_count`` records into a dataset.

    Each calendar day between ``start`` and ``end`` (defaults: first and last
    record) becomes one functional observation. Records are assigned to the
    nearest grid slot of their day when within ``tolerance_minutes``;
    others, and repeated records for an occupied slot, are rejected and
    counted. Slots without records stay unobserved.
    """
    grid = grid or FunctionalGrid()
    gmin = grid.h * 60.0
    records = []
    f, reader = _open_csv(path, HIRE_HEADER)
    with f:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                sid = row[0].strip()
                ts = _parse_timestamp(row[1], utc_offset_hours)
                count = float(row[2])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not sid or not math.isfinite(count) or count < 0:
                raise DataError(f"{path}:{lineno}: invalid station id or count")
            records.append((sid, ts, count))

    if start is not None or end is not None:
        records = [r for r in records
                   if (start is None or r[1].date() >= start) and (end is None or r[1].date() <= end)]
    if not records:
        raise DataError(f"{path}: no records in range")

    first = start or min(r[1].date() for r in records)
    last = end or max(r[1].date() for r in records)
    days = [first + dt.timedelta(days=k) for k in range((last - first).days + 1)]
    if stations is None:
        ids = sorted({r[0] for r in records})
        stations = [StationMeta(id=i, name=i) for i in ids]
    sidx = {s.id: i for i, s in enumerate(stations)}
    n, T, q = len(stations), len(days), grid.q
    values = np.full((n, T, q), np.nan)
    mask = np.zeros((n, T, q), dtype=bool)

    rejected = unknown = 0
    for sid, ts, count in records:
        i = sidx.get(sid)
        if i is None:
            unknown += 1
            continue
        t = (ts.date() - first).days
        minutes = ts.hour * 60 + ts.minute + ts.second / 60 + ts.microsecond / 6e7
        j = int(np.argmin(np.abs(gmin - minutes)))
        if abs(gmin[j] - minutes) > tolerance_minutes + 1e-9 or mask[i, t, j]:
            rejected += 1
            continue
        values[i, t, j] = count
        mask[i, t, j] = True
    if rejected:
        logger.warning("%s: rejected %d records (off-grid or duplicate slot)", path, rejected)
    if unknown:
        logger.warning("%s: skipped %d records for stations without metadata", path, unknown)
    return FunctionalDataset(stations, days, grid, values, mask, n_rejected=rejected + unknown)


def export_hire_data(dataset: FunctionalDataset, path) -> None:
    """Write observed cells in the hire-data CSV format."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HIRE_HEADER)
        secs = np.rint(dataset.grid.h * 3600).astype(int)
        for i, s in enumerate(dataset.stations):
            for t, day in enumerate(dataset.days):
                base = dt.datetime.combine(day, dt.time())
                for j in np.flatnonzero(dataset.observed_mask[i, t]):
                    ts = base + dt.timedelta(seconds=int(secs[j]))
                    w.writerow([s.id, ts.isoformat(), repr(float(dataset.values[i, t, j]))])


def ingest_station_meta(path) -> list:
    """Read station metadata; ids must be unique and coordinates in range."""
    out, seen = [], set()
    f, reader = _open_csv(path, META_HEADER)
    with f:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(META_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(META_HEADER)} fields")
            sid = row[0].strip()
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate station id {sid!r}")
            seen.add(sid)
            try:
                lat, lon, elev, dm, dtr = (float(x) for x in row[2:])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not -90 <= lat <= 90 or not -180 <= lon <= 180:
                raise DataError(f"{path}:{lineno}: coordinate out of range for station {sid!r}")
            out.append(StationMeta(sid, row[1].strip(), lat, lon, elev, dm, dtr))
    return out


def export_station_meta(stations: Sequence[StationMeta], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(META_HEADER)
        for s in stations:
            w.writerow([s.id, s.name, repr(s.latitude), repr(s.longitude),
                        repr(s.elevation), repr(s.dist_metro), repr(s.dist_train)])


def ingest_weather(path, days: Sequence[dt.date], utc_offset_hours: float | None = None) -> CovariateSet:
    """Daily weather covariates, constant over space.

    Temperature, cloud cover and wind are daily means; precipitation is the
    daily sum. Every requested day needs at least one row.
    """
    days = list(days)
    index = {d: k for k, d in enumerate(days)}
    sums = np.zeros((len(days), 4))
    counts = np.zeros((len(days), 4))
    f, reader = _open_csv(path, WEATHER_HEADER)
    with f:
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 fields")
            try:
                ts = _parse_timestamp(row[0], utc_offset_hours)
                vals = [float(x) if x.strip() else math.nan for x in row[1:]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            k = index.get(ts.date())
            if k is None:
                continue
            for c, v in enumerate(vals):
                if math.isfinite(v):
                    sums[k, c] += v
                    counts[k, c] += 1
    missing = [days[k].isoformat() for k in range(len(days)) if np.any(counts[k] == 0)]
    if missing:
        raise DataError(f"{path}: no weather data for {', '.join(missing)}")
    daily = sums / counts
    daily[:, 3] = sums[:, 3]
    return CovariateSet(WEATHER_NAMES, {name: daily[:, c][None, :] for c, name in enumerate(WEATHER_NAMES)})


def export_weather(covariates: CovariateSet, days: Sequence[dt.date], path) -> None:
    """Write one noon row per day; re-ingesting reproduces the daily values."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(WEATHER_HEADER)
        T = len(days)
        cols = [covariates.table(name, 1, T)[0] for name in WEATHER_NAMES]
        for t, day in enumerate(days):
            ts = dt.datetime.combine(day, dt.time(12))
            w.writerow([ts.isoformat()] + [repr(float(c[t])) for c in cols])


# ----------------------------------------------------------------------------
# Design construction
# ----------------------------------------------------------------------------

def _cluster_labels(clusters, station_ids) -> np.ndarray:
    if hasattr(clusters, "majority_labels"):
        clusters = clusters.majority_labels()
    labels = []
    for sid in station_ids:
        base = sid.split("#")[0]
        lab = clusters.get(sid, clusters.get(base))
        if lab is None:
            raise DataError(f"station {sid!r} has no cluster label")
        labels.append(int(lab))
    return np.array(labels)


def covariate_tables(dataset: FunctionalDataset, covariates: CovariateSet | None, names) -> np.ndarray:
    """Stack the requested covariates into an (n, T, len(names)) array.

    ``saturday`` and ``sunday`` are derived from the calendar.
    """
    n, T = dataset.n, dataset.T
    wd = dataset.weekdays
    cols = []
    for name in names:
        if name == "saturday":
            cols.append(np.broadcast_to((wd == 5).astype(float), (n, T)))
        elif name == "sunday":
            cols.append(np.broadcast_to((wd == 6).astype(float), (n, T)))
        elif covariates is not None and name in covariates.names:
            cols.append(covariates.table(name, n, T))
        else:
            raise DataError(f"covariate {name!r} not available")
    return np.stack(cols, axis=-1) if cols else np.zeros((n, T, 0))


def build_design(dataset: FunctionalDataset, covariates: CovariateSet | None, clusters, spec) -> FixedEffectsDesign:
    """Fixed-effect covariate array for the model form in ``spec``.

    ``spec.design`` selects the form:

    * ``'intercept'`` -- a single intercept;
    * ``'additive'`` -- intercept plus every covariate;
    * ``'interaction'`` -- one intercept per cluster and every covariate
      multiplied by each cluster indicator (d = 2 + 2 * len(covariates)).
    """
    n, T = dataset.n, dataset.T
    names = tuple(spec.covariates)
    if spec.design == "intercept":
        return FixedEffectsDesign.intercept(n, T)
    Z = covariate_tables(dataset, covariates, names)
    if spec.design == "additive":
        return FixedEffectsDesign(("intercept",) + names, np.concatenate([np.ones((n, T, 1)), Z], axis=-1))
    if spec.design != "interaction":
        raise ValueError(f"unknown design {spec.design!r}")
    if clusters is None:
        raise DataError("interaction design requires cluster labels")
    lab = _cluster_labels(clusters, dataset.station_ids)
    ind = np.stack([(lab == 1), (lab == 2)], axis=-1).astype(float)  # (n, 2)
    cols = [np.broadcast_to(ind[:, None, 0], (n, T)), np.broadcast_to(ind[:, None, 1], (n, T))]
    out_names = ["Cluster1", "Cluster2"]
    for c, name in enumerate(names):
        for k in (0, 1):
            cols.append(Z[:, :, c] * ind[:, None, k])
            out_names.append(f"Cluster{k + 1}*{name}")
    return FixedEffectsDesign(tuple(out_names), np.stack(cols, axis=-1))
