"""Great-circle distances and isotropic spatial correlation functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gamma, kv

EARTH_RADIUS_M = 6_371_000.0
JITTER = 1e-8


@dataclass(frozen=True)
class CovarianceSpec:
    family: str = "exponential"
    theta: float = 300.0
    nu: float = 0.5

    def __post_init__(self):
        if self.family not in ("exponential", "matern"):
            raise ValueError(f"unknown covariance family {self.family!r}")
        if not self.theta > 0:
            raise ValueError("range parameter theta must be positive")
        if self.family == "matern" and not self.nu > 0:
            raise ValueError("Matern smoothness nu must be positive")


def _check_coords(lat, lon):
    if np.any(np.abs(lat) > 90) or np.any(np.abs(lon) > 180):
        raise ValueError("latitude must be in [-90, 90] and longitude in [-180, 180]")


def great_circle_distance(a, b) -> float:
    """Haversine distance in meters between two (lat, lon) points in degrees."""
    lat1, lon1 = a
    lat2, lon2 = b
    _check_coords(np.array([lat1, lat2]), np.array([lon1, lon2]))
    return float(_haversine(lat1, lon1, lat2, lon2))


def _haversine(lat1, lon1, lat2, lon2):
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2) - np.radians(lon1)
    s = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


def distance_matrix(lat, lon) -> np.ndarray:
    """Symmetric matrix of pairwise great-circle distances (meters)."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    _check_coords(lat, lon)
    D = _haversine(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def correlation(spec: CovarianceSpec, distance):
    """Correlation at the given distance(s) in meters."""
    d = np.asarray(distance, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    r = d / spec.theta
    if spec.family == "exponential":
        out = np.exp(-r)
    else:
        nu = spec.nu
        with np.errstate(invalid="ignore"):
            x = np.sqrt(2 * nu) * r
            out = 2 ** (1 - nu) / gamma(nu) * x ** nu * kv(nu, x)
        # the Bessel form overflows as x -> 0, where the limit is 1
        out = np.where(x < 1e-12, 1.0, np.nan_to_num(out, nan=0.0))
    return out if out.ndim else float(out)


def correlation_matrix(spec: CovarianceSpec, distances, jitter: float = 0.0) -> np.ndarray:
    """Elementwise correlation of a distance matrix, with optional diagonal jitter."""
    D = np.asarray(distances, dtype=float)
    if not np.all(np.isfinite(D)):
        raise ValueError("distance matrix contains non-finite entries")
    R = np.asarray(correlation(spec, D), dtype=float).reshape(D.shape)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0 + jitter)
    return R
