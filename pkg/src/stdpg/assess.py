"""Grid goodness-of-fit, posterior density rasters, and risk boundaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .data import Dataset
from .errors import EmptyTrace, LengthMismatch
from .geo import Domain
from .sampler import ChainState, Draws, Trace

DEFAULT_GRID = (8, 13, 3)


@dataclass
class AssessmentGrid:
    """Rectangular cells partitioning the domain, ``n_lon x n_lat x n_t``.

    Cells are flattened lon-major: ``index = (i_lon * n_lat + i_lat) * n_t + i_t``.
    """

    domain: Domain
    n_lon: int = DEFAULT_GRID[0]
    n_lat: int = DEFAULT_GRID[1]
    n_t: int = DEFAULT_GRID[2]

    def __post_init__(self):
        if min(self.n_lon, self.n_lat, self.n_t) < 1:
            raise ValueError("grid counts must be positive")

    @property
    def size(self) -> int:
        return self.n_lon * self.n_lat * self.n_t

    @property
    def edges(self):
        d = self.domain
        return (np.linspace(d.lon_min, d.lon_max, self.n_lon + 1),
                np.linspace(d.lat_min, d.lat_max, self.n_lat + 1),
                np.linspace(d.t_min, d.t_max, self.n_t + 1))

    def bounds(self) -> np.ndarray:
        """(G, 6) array of lon_lo, lon_hi, lat_lo, lat_hi, t_lo, t_hi."""
        ex, ey, et = self.edges
        i, j, k = np.meshgrid(np.arange(self.n_lon), np.arange(self.n_lat),
                              np.arange(self.n_t), indexing="ij")
        i, j, k = i.ravel(), j.ravel(), k.ravel()
        return np.column_stack([ex[i], ex[i + 1], ey[j], ey[j + 1], et[k], et[k + 1]])


def _bin(values, edges):
    # [lo, hi) cells with the last one closed; -1 marks out-of-range values
    n = len(edges) - 1
    idx = np.searchsorted(edges, values, side="right") - 1
    idx = np.where(values == edges[-1], n - 1, idx)
    return np.where((values < edges[0]) | (values > edges[-1]), -1, idx)


def cell_index(grid: AssessmentGrid, x, t) -> np.ndarray:
    ex, ey, et = grid.edges
    x = np.asarray(x, dtype=float).reshape(-1, 2)
    i, j, k = _bin(x[:, 0], ex), _bin(x[:, 1], ey), _bin(np.asarray(t, dtype=float), et)
    flat = (i * grid.n_lat + j) * grid.n_t + k
    return np.where((i < 0) | (j < 0) | (k < 0), -1, flat)


def observed_proportions(data: Dataset, grid: AssessmentGrid) -> np.ndarray:
    idx = cell_index(grid, data.x, data.t)
    counts = np.bincount(idx[idx >= 0], minlength=grid.size).astype(float)
    return counts / data.n


def cell_masses(grid: AssessmentGrid, cs, ct, weights, omega_s: float, omega_t: float) -> np.ndarray:
    """Per-cell mass of ``sum_j weights_j N(cs_j, omega_s^2 I) N(ct_j, omega_t^2)``.

    The covariance is diagonal so each cell integral is a product of 1-D
    normal interval probabilities.
    """
    ex, ey, et = grid.edges
    cs = np.asarray(cs, dtype=float).reshape(-1, 2)
    ct = np.asarray(ct, dtype=float).reshape(-1)
    px = np.diff(ndtr((ex[None, :] - cs[:, 0, None]) / omega_s), axis=1)
    py = np.diff(ndtr((ey[None, :] - cs[:, 1, None]) / omega_s), axis=1)
    pt = np.diff(ndtr((et[None, :] - ct[:, None]) / omega_t), axis=1)
    return np.einsum("j,ja,jb,jc->abc", np.asarray(weights, dtype=float), px, py, pt).ravel()


def _as_draws(trace) -> Draws:
    draws = Draws.from_trace(trace) if isinstance(trace, Trace) else trace
    if len(draws) == 0:
        raise EmptyTrace("trace retains no center draws")
    return draws


def theoretical_proportions(trace, data: Dataset | None, grid: AssessmentGrid,
                            return_raw: bool = False):
    """Draw-averaged model mass per cell, renormalized over the grid per draw.

    ``trace`` is a :class:`Trace` or :class:`Draws`. With ``return_raw``
    the un-renormalized average is returned as well.
    """
    draws = _as_draws(trace)
    acc = np.zeros(grid.size)
    raw = np.zeros(grid.size)
    for d in range(len(draws)):
        mask = draws.nonempty[d]
        m = cell_masses(grid, draws.cs[d][mask], draws.ct[d][mask], draws.q[d][mask],
                        draws.theta[d, 0], draws.theta[d, 1])
        raw += m
        acc += m / m.sum()
    acc /= len(draws)
    raw /= len(draws)
    return (acc, raw) if return_raw else acc


def assessment_mse(p_theo, p_obs) -> float:
    p_theo = np.asarray(p_theo, dtype=float)
    p_obs = np.asarray(p_obs, dtype=float)
    if p_theo.shape != p_obs.shape:
        raise LengthMismatch(f"{p_theo.shape} vs {p_obs.shape}")
    return float(np.mean((p_theo - p_obs) ** 2))


def qq_pairs(p_theo, p_obs):
    return np.sort(np.asarray(p_theo, dtype=float)), np.sort(np.asarray(p_obs, dtype=float))


def qq_export(p_theo, p_obs, path) -> int:
    if len(p_theo) != len(p_obs):
        raise LengthMismatch("quantile vectors differ in length")
    a, b = qq_pairs(p_theo, p_obs)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p_theo_sorted", "p_obs_sorted"])
        for u, v in zip(a, b):
            w.writerow([repr(float(u)), repr(float(v))])
    return len(a)


def write_assessment_csv(path, grid: AssessmentGrid, p_obs, p_theo, p_theo_raw) -> None:
    b = grid.bounds()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cube_index", "lon_lo", "lon_hi", "lat_lo", "lat_hi", "t_lo", "t_hi",
                    "p_obs", "p_theo", "p_theo_raw"])
        for g in range(grid.size):
            w.writerow([g, *(repr(float(v)) for v in b[g]), repr(float(p_obs[g])),
                        repr(float(p_theo[g])), repr(float(p_theo_raw[g]))])


@dataclass
class DensityRaster:
    lon: np.ndarray  # cell-center longitudes (n_lon,)
    lat: np.ndarray  # cell-center latitudes (n_lat,)
    t_slice: float | None  # slice midpoint, None for the window aggregate
    values: np.ndarray  # (n_lon, n_lat)

    @property
    def cell_area(self) -> float:
        return float((self.lon[1] - self.lon[0]) * (self.lat[1] - self.lat[0]))


def _raster_axes(domain: Domain, grid_res):
    n_lon, n_lat = (grid_res, grid_res) if np.isscalar(grid_res) else grid_res
    ex = np.linspace(domain.lon_min, domain.lon_max, n_lon + 1)
    ey = np.linspace(domain.lat_min, domain.lat_max, n_lat + 1)
    return 0.5 * (ex[1:] + ex[:-1]), 0.5 * (ey[1:] + ey[:-1])


def density_raster(trace, domain: Domain, grid_res=100, n_time_slices: int = 3) -> list[DensityRaster]:
    """Posterior-mean space-time mixture density on a lon/lat raster.

    Per draw the occupied clusters' Gaussian space-time factors are summed
    with their weights and rescaled so the draw's density integrates to one
    over the raster times [0, 1] (mass leaking past the domain is dropped).
    Values are densities per (degree^2 x unit time); ``n_time_slices=0``
    gives one raster of the time-integrated density.
    """
    draws = _as_draws(trace)
    lon, lat = _raster_axes(domain, grid_res)
    area = (domain.lon_max - domain.lon_min) * (domain.lat_max - domain.lat_min) / (len(lon) * len(lat))
    slices = [None] if n_time_slices == 0 else list((np.arange(n_time_slices) + 0.5) / n_time_slices)
    acc = np.zeros((len(slices), len(lon), len(lat)))
    for d in range(len(draws)):
        mask = draws.nonempty[d]
        cs, ct, q = draws.cs[d][mask], draws.ct[d][mask], draws.q[d][mask]
        ws, wt = draws.theta[d, 0], draws.theta[d, 1]
        fx = np.exp(-0.5 * ((lon[None, :] - cs[:, 0, None]) / ws) ** 2)
        fy = np.exp(-0.5 * ((lat[None, :] - cs[:, 1, None]) / ws) ** 2)
        # time factor integrated over [0, 1], up to the sqrt(2 pi) wt constant
        t_mass = ndtr((1.0 - ct) / wt) - ndtr((0.0 - ct) / wt)
        total = area * float(np.sum(q * t_mass * fx.sum(axis=1) * fy.sum(axis=1)))
        if not total > 0:
            continue
        for s, tm in enumerate(slices):
            ft = t_mass if tm is None else np.exp(-0.5 * ((tm - ct) / wt) ** 2) / (np.sqrt(2 * np.pi) * wt)
            acc[s] += np.einsum("j,ja,jb->ab", q * ft, fx, fy) / total
    acc /= len(draws)
    return [DensityRaster(lon, lat, tm, acc[s]) for s, tm in enumerate(slices)]


def write_raster_csv(path, rasters) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "t_slice", "density"])
        for r in rasters:
            ts = "all" if r.t_slice is None else repr(float(r.t_slice))
            for a, lo in enumerate(r.lon):
                for b, la in enumerate(r.lat):
                    w.writerow([repr(float(lo)), repr(float(la)), ts, repr(float(r.values[a, b]))])


@dataclass(frozen=True)
class RiskBoundary:
    lon: float
    lat: float
    t: float
    radius_km: float


def risk_boundaries(final_state: ChainState, km_scale: float) -> list[RiskBoundary]:
    """A circle of radius ``2 * omega_s`` (in km) around every occupied cluster."""
    radius = 2.0 * final_state.theta.omega_s * km_scale
    cs, ct = final_state.centers.cs, final_state.centers.ct
    return [RiskBoundary(float(cs[j, 0]), float(cs[j, 1]), float(ct[j]), radius)
            for j in final_state.nonempty()]


def write_boundaries_csv(path, boundaries) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lon", "lat", "t", "radius_km"])
        for b in boundaries:
            w.writerow([repr(b.lon), repr(b.lat), repr(b.t), repr(b.radius_km)])


@dataclass
class Assessment:
    grid: AssessmentGrid
    p_obs: np.ndarray
    p_theo: np.ndarray
    p_theo_raw: np.ndarray

    @property
    def mse(self) -> float:
        return assessment_mse(self.p_theo, self.p_obs)

    @property
    def qq_correlation(self) -> float:
        a, b = qq_pairs(self.p_theo, self.p_obs)
        return float(np.corrcoef(a, b)[0, 1])


def assess(trace, data: Dataset, grid: AssessmentGrid | None = None) -> Assessment:
    grid = grid or AssessmentGrid(data.domain)
    p_obs = observed_proportions(data, grid)
    p_theo, raw = theoretical_proportions(trace, data, grid, return_raw=True)
    return Assessment(grid, p_obs, p_theo, raw)
