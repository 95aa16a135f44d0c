"""Command-line runs driven by a YAML configuration file.

Subcommands read ``--config`` and write into ``<out>/<command>/``. Every
output directory receives a ``manifest.json`` with the config hash and
library versions. Errors print one JSON line to stderr and exit with

* 2 -- configuration error
* 3 -- data error (including a missing prerequisite artifact)
* 4 -- numerical failure
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import yaml
from scipy import linalg

from . import __version__
from .basis import BasisSpec
from .bootstrap import BootstrapConfig, BootstrapError
from .bootstrap import run as run_bootstrap
from .clustering import assign_weekly, read_station_labels
from .covariance import EARTH_RADIUS_M
from .data import (DEFAULT_COVARIATES, WEATHER_NAMES, CovariateSet, DataError,
                   FunctionalDataset, FunctionalGrid, StationMeta, build_design, export_hire_data,
                   export_station_meta, export_weather, ingest_hire_data, ingest_station_meta, ingest_weather)
from .em import CollinearityError, EmConfig, fit
from .model import ModelParams, ModelSpec
from .prediction import DEFAULT_PROPORTIONS, CvConfig, cross_validate
from .spectral import functional_boxplot, station_periodograms, write_boxplot, write_periodograms
from .state_space import NumericalError, assemble, simulate

logger = logging.getLogger("stfda")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class PrerequisiteError(DataError):
    pass


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

@dataclass
class RunConfig:
    seed: int
    out: Path
    workers: int = 1
    hire: Path | None = None
    stations: Path | None = None
    weather: Path | None = None
    start: dt.date | None = None
    end: dt.date | None = None
    utc_offset_hours: float | None = None
    grid_points: int = 288
    model: ModelSpec = field(default_factory=ModelSpec)
    em: EmConfig = field(default_factory=EmConfig)
    clustering: dict = field(default_factory=dict)
    bootstrap: dict = field(default_factory=dict)
    cv: dict = field(default_factory=dict)
    simulate: dict | None = None
    digest: str = ""
    raw: dict = field(default_factory=dict)

    @property
    def grid(self) -> FunctionalGrid:
        return FunctionalGrid.regular(self.grid_points)


def _date(value, key):
    if value is None or isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"{key}: not an ISO date: {value!r}") from None


def _basis(d, key):
    if d is None:
        return BasisSpec()
    if not isinstance(d, dict):
        raise ConfigError(f"model.{key} must be a mapping")
    return BasisSpec.from_dict(d)


def load_config(path, seed=None, out=None, workers=None) -> RunConfig:
    """Parse and validate a run configuration; relative paths resolve against its folder."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw or not isinstance(raw["seed"], int):
        raise ConfigError("seed is mandatory and must be an integer")
    base = path.parent
    data = raw.get("data") or {}

    def resolve(p):
        return None if p is None else (base / p).resolve()

    try:
        m = raw.get("model") or {}
        spec = ModelSpec(
            basis_mu=_basis(m.get("basis_mu"), "basis_mu"),
            basis_omega=_basis(m.get("basis_omega"), "basis_omega"),
            basis_eps=_basis(m.get("basis_eps"), "basis_eps"),
            covariance=m.get("covariance", "exponential"),
            nu=float(m.get("nu", 0.5)),
            covariates=tuple(m.get("covariates", DEFAULT_COVARIATES)),
            design=m.get("design", "interaction"),
            random_effect=bool(m.get("random_effect", True)),
        )
        e = dict(raw.get("em") or {})
        if "theta_bounds" in e:
            e["theta_bounds"] = tuple(float(x) for x in e["theta_bounds"])
        em = EmConfig(**e)
        cfg = RunConfig(
            seed=raw["seed"],
            out=Path(out) if out is not None else resolve(raw.get("output", "out")),
            workers=int(workers if workers is not None else raw.get("workers", 1)),
            hire=resolve(data.get("hire")),
            stations=resolve(data.get("stations")),
            weather=resolve(data.get("weather")),
            start=_date(data.get("start"), "data.start"),
            end=_date(data.get("end"), "data.end"),
            utc_offset_hours=data.get("utc_offset_hours"),
            grid_points=int((raw.get("grid") or {}).get("points_per_day", 288)),
            model=spec,
            em=em,
            clustering=dict(raw.get("clustering") or {}),
            bootstrap=dict(raw.get("bootstrap") or {}),
            cv=dict(raw.get("cv") or {}),
            simulate=raw.get("simulate"),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if cfg.start and cfg.end and cfg.end < cfg.start:
        raise ConfigError("date range is empty (end before start)")
    if cfg.grid_points < 1:
        raise ConfigError("grid.points_per_day must be positive")
    canonical = json.dumps(raw, sort_keys=True, default=str)
    cfg.digest = hashlib.sha256(canonical.encode()).hexdigest()
    cfg.raw = raw
    return cfg


def _require_files(cfg: RunConfig, *keys):
    for key in keys:
        p = getattr(cfg, key)
        if p is None:
            raise ConfigError(f"data.{key} is not set")
        if not p.exists():
            raise ConfigError(f"data.{key}: file not found: {p}")


# ----------------------------------------------------------------------------
# Shared steps
# ----------------------------------------------------------------------------

def write_manifest(directory: Path, command: str, cfg: RunConfig, extra=None) -> None:
    manifest = {
        "command": command,
        "config_sha256": cfg.digest,
        "seed": cfg.seed,
        "created": dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
        "versions": {
            "stfda": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _outdir(cfg: RunConfig, command: str) -> Path:
    d = cfg.out / command
    d.mkdir(parents=True, exist_ok=True)
    return d


def load_dataset(cfg: RunConfig) -> FunctionalDataset:
    _require_files(cfg, "hire", "stations")
    stations = ingest_station_meta(cfg.stations)
    return ingest_hire_data(cfg.hire, cfg.grid, stations, cfg.start, cfg.end,
                            utc_offset_hours=cfg.utc_offset_hours)


def load_covariates(cfg: RunConfig, dataset: FunctionalDataset) -> CovariateSet:
    covs = CovariateSet.from_stations(dataset.stations)
    needs_weather = any(c in WEATHER_NAMES for c in cfg.model.covariates)
    if needs_weather and cfg.model.design != "intercept":
        _require_files(cfg, "weather")
        covs = covs.merge(ingest_weather(cfg.weather, dataset.days, cfg.utc_offset_hours))
    return covs


def cluster_labels(cfg: RunConfig, required: bool, for_command: str):
    path = cfg.out / "cluster" / "station_labels.csv"
    if not path.exists():
        if required:
            raise PrerequisiteError(f"{for_command} needs cluster labels ({path} missing); run 'stfda cluster' first")
        return None
    return read_station_labels(path)


def _label_array(labels: dict | None, dataset: FunctionalDataset):
    if labels is None:
        return None
    try:
        return np.array([labels[s] for s in dataset.station_ids])
    except KeyError as exc:
        raise PrerequisiteError(f"station {exc.args[0]!r} has no cluster label; re-run 'stfda cluster'") from None


# ----------------------------------------------------------------------------
# Commands
# ----------------------------------------------------------------------------

def _gap_periods(dataset: FunctionalDataset):
    """Contiguous runs of unobserved slots per station, as (station, start, end, slots)."""
    secs = np.rint(dataset.grid.h * 3600).astype(int)
    stamps = [dt.datetime.combine(d, dt.time()) + dt.timedelta(seconds=int(s))
              for d in dataset.days for s in secs]
    rows = []
    for i, sid in enumerate(dataset.station_ids):
        miss = ~dataset.observed_mask[i].reshape(-1)
        edges = np.flatnonzero(np.diff(np.concatenate([[0], miss.astype(int), [0]])))
        for a, b in zip(edges[::2], edges[1::2]):
            rows.append((sid, stamps[a].isoformat(), stamps[b - 1].isoformat(), int(b - a)))
    return rows


def cmd_ingest(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    load_covariates(cfg, ds)  # validates weather coverage
    out = _outdir(cfg, "ingest")
    miss = 1.0 - ds.observed_mask.mean(axis=(1, 2))
    with open(out / "missingness.csv", "w") as f:
        f.write("station," + ",".join(d.isoformat() for d in ds.days) + "\n")
        frac = 1.0 - ds.observed_mask.mean(axis=2)
        for sid, row in zip(ds.station_ids, frac):
            f.write(sid + "," + ",".join(f"{x:.6f}" for x in row) + "\n")
    with open(out / "gaps.csv", "w") as f:
        f.write("station,start,end,slots\n")
        for r in _gap_periods(ds):
            f.write(",".join(str(x) for x in r) + "\n")
    summary = {
        "n": ds.n, "T": ds.T, "q": ds.q,
        "first_day": ds.days[0].isoformat(), "last_day": ds.days[-1].isoformat(),
        "missing_percent": float(100 * (1 - ds.observed_mask.mean())),
        "station_missing_percent": {s: float(100 * m) for s, m in zip(ds.station_ids, miss)},
        "rejected_records": ds.n_rejected,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, "ingest", cfg)
    return out


def _daily_curves(dataset: FunctionalDataset, station: int, min_observed: float = 0.8):
    rows = []
    h = dataset.grid.h
    for t in range(dataset.T):
        m = dataset.observed_mask[station, t]
        if m.mean() >= min_observed:
            rows.append(np.interp(h, h[m], dataset.values[station, t, m]))
    return np.array(rows)


def cmd_explore(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    out = _outdir(cfg, "explore")
    power = bool((cfg.raw.get("explore") or {}).get("power", False))
    pgs = station_periodograms(ds, power=power)
    write_periodograms(pgs, ds.station_ids, out / "spectra")
    box = out / "boxplots"
    box.mkdir(exist_ok=True)
    with open(box / "outliers.csv", "w") as f:
        f.write("station,day\n")
        for i, sid in enumerate(ds.station_ids):
            curves = _daily_curves(ds, i)
            if len(curves) < 3:
                continue
            stats = functional_boxplot(curves)
            write_boxplot(stats, ds.grid.h, box / f"boxplot_{i:04d}.csv")
            days = [d for t, d in enumerate(ds.days) if ds.observed_mask[i, t].mean() >= 0.8]
            for k in stats.outliers:
                f.write(f"{sid},{days[k].isoformat()}\n")
    write_manifest(out, "explore", cfg)
    return out


def cmd_cluster(cfg: RunConfig) -> Path:
    ds = load_dataset(cfg)
    c = cfg.clustering
    res = assign_weekly(ds, k=int(c.get("k", 2)), seed=cfg.seed, restarts=int(c.get("restarts", 10)))
    out = _outdir(cfg, "cluster")
    res.write(out)
    shares = {f"cluster{j + 1}": float(s) for j, s in enumerate(res.shares)}
    (out / "shares.json").write_text(json.dumps(shares, indent=2))
    write_manifest(out, "cluster", cfg)
    return out


def _prepare(cfg: RunConfig, spec: ModelSpec, command: str):
    ds = load_dataset(cfg)
    labels = cluster_labels(cfg, spec.design == "interaction", command)
    covs = load_covariates(cfg, ds) if spec.design != "intercept" else None
    design = build_design(ds, covs, labels, spec)
    return ds, design, labels


def cmd_fit(cfg: RunConfig) -> Path:
    ds, design, _ = _prepare(cfg, cfg.model, "fit")
    fitted = fit(ds, design, cfg.model, cfg.em)
    out = _outdir(cfg, "fit")
    fitted.save(out / "model.json")
    fitted.export_curves(out / "curves", ds.grid.h)
    write_manifest(out, "fit", cfg, {"converged": fitted.converged, "iterations": fitted.iterations})
    return out


def _proportions(section: dict):
    return tuple(float(x) for x in section.get("proportions", DEFAULT_PROPORTIONS))


def cmd_bootstrap(cfg: RunConfig) -> Path:
    ds, design, labels = _prepare(cfg, cfg.model, "bootstrap")
    b = cfg.bootstrap
    bc = BootstrapConfig(B=int(b.get("B", 1000)), m=int(b.get("m", 30)), proportions=_proportions(b),
                         alpha=float(b.get("alpha", 0.05)), seed=cfg.seed, workers=cfg.workers)
    res = run_bootstrap(ds, design, cfg.model, bc, _label_array(labels, ds), cfg.em)
    out = _outdir(cfg, "bootstrap")
    res.write(out)
    write_manifest(out, "bootstrap", cfg)
    return out


CV_VARIANTS = ("intercept", "additive", "interaction")


def cmd_cv(cfg: RunConfig) -> Path:
    c = cfg.cv
    cv = CvConfig(in_sample_size=int(c.get("in_sample_size", 30)), out_sample_size=int(c.get("out_sample_size", 30)),
                  proportions=_proportions(c), iterations=int(c.get("iterations", 1000)), seed=cfg.seed,
                  workers=cfg.workers)
    variants = tuple(c.get("variants", CV_VARIANTS))
    ds = load_dataset(cfg)
    labels = cluster_labels(cfg, True, "cv")
    lab = _label_array(labels, ds)
    covs = load_covariates(cfg, ds)
    out = _outdir(cfg, "cv")
    for name in variants:
        spec = cfg.model.with_design(name)
        design = build_design(ds, covs, labels, spec)
        res = cross_validate(ds, design, spec, cv, lab, cfg.em, label=name)
        res.write(out, name)
    write_manifest(out, "cv", cfg)
    return out


# ----------------------------------------------------------------------------
# Simulation
# ----------------------------------------------------------------------------

def _simulated_stations(n, centre, extent_m, rng):
    lat0, lon0 = centre
    dy = rng.uniform(-extent_m / 2, extent_m / 2, n)
    dx = rng.uniform(-extent_m / 2, extent_m / 2, n)
    lat = lat0 + np.degrees(dy / EARTH_RADIUS_M)
    lon = lon0 + np.degrees(dx / (EARTH_RADIUS_M * math.cos(math.radians(lat0))))
    return [StationMeta(f"S{k:03d}", f"sim {k}", float(lat[k]), float(lon[k]),
                        float(rng.uniform(0, 50)), float(rng.uniform(0, 3)), float(rng.uniform(0, 3)))
            for k in range(n)]


def _simulated_weather(T, rng) -> CovariateSet:
    vals = {
        "temperature": rng.normal(15, 3, T),
        "cloud": rng.uniform(0, 8, T),
        "wind": np.abs(rng.normal(4, 1.5, T)),
        "precipitation": np.where(rng.uniform(size=T) < 0.3, rng.exponential(2.0, T), 0.0),
    }
    return CovariateSet(WEATHER_NAMES, {k: v[None, :] for k, v in vals.items()})


def _beta_matrix(block, names, p):
    """Coefficient matrix from a mapping name -> scalar or list of p coefficients.

    A scalar gives a constant function (B-spline coefficients sum to one at
    every point). Unlisted design functions are zero.
    """
    beta = np.zeros((len(names), p))
    if isinstance(block, list):
        beta = np.array(block, dtype=float)
        if beta.shape != (len(names), p):
            raise ConfigError(f"simulate.params.beta must be {len(names)} x {p}")
        return beta
    for key, val in (block or {}).items():
        if key not in names:
            raise ConfigError(f"simulate.params.beta: unknown design function {key!r} (have {list(names)})")
        arr = np.broadcast_to(np.asarray(val, dtype=float), (p,)) if np.ndim(val) == 0 else np.asarray(val, float)
        if arr.shape != (p,):
            raise ConfigError(f"simulate.params.beta[{key}] needs {p} coefficients")
        beta[list(names).index(key)] = arr
    return beta


def _vector(val, p, key):
    arr = np.broadcast_to(np.asarray(val, dtype=float), (p,)) if np.ndim(val) == 0 else np.asarray(val, float)
    if arr.shape != (p,):
        raise ConfigError(f"simulate.params.{key} needs {p} entries")
    return arr


def cmd_simulate(cfg: RunConfig) -> Path:
    s = cfg.simulate
    if not isinstance(s, dict) or not isinstance(s.get("params"), dict):
        raise ConfigError("simulate needs an explicit 'simulate.params' block")
    p = s["params"]
    spec = cfg.model
    for key in ("g", "v", "theta", "sigma2_eps"):
        if key not in p:
            raise ConfigError(f"simulate.params.{key} is required")
    g = _vector(p["g"], spec.p_omega, "g")
    if np.any(np.abs(g) >= 1):
        raise ConfigError("simulate.params.g: every |g_j| must be < 1")
    rng = np.random.default_rng([cfg.seed, 0])
    n = int(s.get("n_stations", 10))
    T = int(s.get("days", 30))
    start = _date(s.get("start", "2017-05-09"), "simulate.start")
    stations = _simulated_stations(n, s.get("centre", (60.17, 24.94)), float(s.get("extent_m", 2000)), rng)
    days = [start + dt.timedelta(days=k) for k in range(T)]
    grid = cfg.grid
    template = FunctionalDataset(stations, days, grid, np.zeros((n, T, grid.q)), np.ones((n, T, grid.q), bool))
    weather = _simulated_weather(T, rng)
    covs = CovariateSet.from_stations(stations).merge(weather)
    props = _proportions(s)
    n1 = int(math.floor(n * props[0] + 0.5))
    labels = {st.id: (1 if k < n1 else 2) for k, st in enumerate(stations)}
    design = build_design(template, covs, labels, spec)
    try:
        params = ModelParams(_beta_matrix(p.get("beta"), design.names, spec.p_mu), g,
                             _vector(p["v"], spec.p_omega, "v"), float(p["theta"]),
                             _vector(p["sigma2_eps"], spec.p_eps, "sigma2_eps"))
    except ValueError as exc:
        raise ConfigError(f"simulate.params: {exc}") from None
    model = assemble(template, design, spec, params)
    missing = float(s.get("missing", 0.0))
    mask = rng.uniform(size=(n, T, grid.q)) >= missing
    ds = simulate(model, [cfg.seed, 1], mask=mask)
    # counts are non-negative at ingestion, so clip here
    clipped = int(np.sum(ds.values[ds.observed_mask] < 0))
    ds = ds.with_values(np.where(ds.observed_mask, np.maximum(ds.values, 0.0), np.nan), ds.observed_mask)

    out = _outdir(cfg, "simulate")
    export_hire_data(ds, out / "hire.csv")
    export_station_meta(stations, out / "stations.csv")
    export_weather(weather, days, out / "weather.csv")
    truth = {"spec": spec.to_dict(), "design_names": list(design.names), "params": params.to_dict(),
             "clusters": labels, "clipped_negative_values": clipped}
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    write_manifest(out, "simulate", cfg)
    return out


COMMANDS = {
    "ingest": cmd_ingest,
    "explore": cmd_explore,
    "cluster": cmd_cluster,
    "fit": cmd_fit,
    "bootstrap": cmd_bootstrap,
    "cv": cmd_cv,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stfda", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, type=Path)
        sp.add_argument("--out", type=Path)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
    return ap


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(json.dumps({"error": kind, "code": code, "message": msg}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out, args.workers)
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (CollinearityError, NumericalError, BootstrapError, linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except (DataError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (ValueError, RuntimeError) as exc:
        # remaining failures come from estimation (e.g. too many failed replicates)
        kind = "data" if isinstance(exc, ValueError) else "numerical"
        return _fail(EXIT_DATA if kind == "data" else EXIT_NUMERICAL, kind, exc)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
