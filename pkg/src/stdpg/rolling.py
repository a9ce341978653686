"""Sequential window-by-window fitting with posterior-informed priors."""

from __future__ import annotations

import datetime as dt
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, LandmarkCatalog, normalize, window_slice
from .errors import EmptyWindow
from .geo import km_per_degree
from .model import ClusterCenters, RangeParams, StickState, stick_weights
from .sampler import (
    ChainState,
    PosteriorSummary,
    SamplerConfig,
    Trace,
    run_chain,
    sample_memberships,
    summarize,
    with_seed,
)

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-10
# jitter half-width for window-1 centers, as a fraction of the shorter domain side
INIT_JITTER = 0.01


@dataclass
class WindowPrior:
    """Independent positive-truncated normal priors on the range parameters.

    ``mu is None`` means the flat prior on the positive half-line. The
    truncation constant is omitted since it cancels in Metropolis ratios.
    """

    mu: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    c_mult: float = 2.0

    @property
    def flat(self) -> bool:
        return self.mu is None

    def logpdf(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.flat:
            return np.where(theta > 0, 0.0, -np.inf)
        with np.errstate(divide="ignore"):
            dens = -0.5 * (theta - self.mu) ** 2 / self.sigma2
        return np.where(theta > 0, dens, -np.inf)

    def to_dict(self) -> dict:
        if self.flat:
            return {"kind": "flat-positive"}
        return {"kind": "truncated-normal", "mu": self.mu.tolist(),
                "sigma2": self.sigma2.tolist(), "c_mult": self.c_mult}


FLAT_PRIOR = WindowPrior()


def build_prior(prev: PosteriorSummary, c_mult: float = 2.0, names=None) -> WindowPrior:
    """Prior ``N(mean, c_mult * var) * I(theta > 0)`` from a previous window's posterior."""
    mu = prev.theta_mean(names)
    var = prev.theta_var(names)
    if np.any(var <= 0):
        warnings.warn(f"zero posterior variance replaced by {VARIANCE_FLOOR}")
        var = np.maximum(var, VARIANCE_FLOOR)
    return WindowPrior(mu=mu, sigma2=c_mult * var, c_mult=c_mult)


def initial_range_params(data: Dataset, anchors: np.ndarray) -> RangeParams:
    """Moment-based starting ranges.

    Spatial ranges start at half the RMS distance from each case to its
    nearest landmark (or nearest initial center when there are no
    landmarks); the time range starts at 0.25.
    """
    if data.p:
        d2 = np.sum((data.z - data.x[:, None, :]) ** 2, axis=2).min(axis=1)
    else:
        d2 = np.min(np.sum((data.x[:, None, :] - anchors[None, :, :]) ** 2, axis=2), axis=1)
    omega_s = 0.5 * math.sqrt(float(np.mean(d2)))
    scale = math.sqrt(data.domain.area)
    omega_s = min(max(omega_s, 1e-3 * scale), scale)
    return RangeParams(omega_s, 0.25, np.full(data.p, omega_s))


def _jittered(rng, sites, domain):
    side = min(domain.lon_max - domain.lon_min, domain.lat_max - domain.lat_min)
    r = INIT_JITTER * side
    pts = sites + rng.uniform(-r, r, size=sites.shape)
    return np.clip(pts, domain.lower, domain.upper)


def init_window_state(prev_state: ChainState | None, data: Dataset,
                      catalog: LandmarkCatalog | None, M: int, rng: np.random.Generator,
                      carry_time: bool = False, hyper_a: float = 1.0, hyper_b: float = 0.25,
                      normalizer: str = "linear") -> ChainState:
    """Starting state for a window.

    With ``prev_state`` the spatial centers (and optionally the time
    centers) and ranges are carried over. Otherwise centers start at
    randomly chosen landmark sites plus jitter; without a catalog, at
    randomly chosen cases.
    """
    dom = data.domain
    if prev_state is not None:
        if prev_state.M != M:
            raise ValueError("previous state has a different truncation level")
        cs = np.clip(prev_state.centers.cs, dom.lower, dom.upper)
        ct = prev_state.centers.ct.copy() if carry_time else rng.uniform(0.0, 1.0, M)
        theta = prev_state.theta
        if theta.p != data.p:
            theta = initial_range_params(data, cs)
    else:
        pool = catalog.all_sites() if catalog is not None else data.x
        cs = _jittered(rng, pool[rng.integers(0, len(pool), size=M)], dom)
        ct = rng.uniform(0.0, 1.0, M)
        theta = initial_range_params(data, cs)
    b_u = float(rng.gamma(hyper_a, 1.0 / hyper_b))
    U = np.empty(M)
    U[:-1] = np.clip(rng.beta(1.0, b_u, size=M - 1), np.finfo(float).tiny, np.nextafter(1.0, 0.0))
    U[-1] = 1.0
    stick = StickState(U, stick_weights(U), b_u)
    centers = ClusterCenters(cs, ct)
    state = ChainState(centers, np.zeros(data.n, dtype=int), stick, theta)
    state.g = sample_memberships(state, data, rng, normalizer)
    return state


@dataclass
class WindowResult:
    index: int
    start: dt.date
    end: dt.date  # exclusive; also the window's label
    n_cases: int
    summary: PosteriorSummary
    trace: Trace | None = None
    data: Dataset | None = None
    prior: WindowPrior = field(default_factory=WindowPrior)
    km_scale: float = 1.0
    raster: object = None
    assessment: object = None

    @property
    def label(self) -> str:
        return self.end.isoformat()


def window_bounds(study_start: dt.date, study_end: dt.date, window_days: int):
    """Consecutive half-open windows covering [study_start, study_end).

    The last window is shortened when the period is not a multiple of the
    window length.
    """
    if study_end <= study_start:
        raise ValueError("study period is empty")
    out = []
    start = study_start
    while start < study_end:
        end = min(start + dt.timedelta(days=window_days), study_end)
        out.append((start, end))
        start = end
    return out


def window_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(10_000 + index,)).generate_state(1)[0])


def fit_window(cases_in_window, start, length_days, catalog, config: SamplerConfig,
               prior: WindowPrior, prev_state: ChainState | None, seed: int,
               days_scale: float = 28.0, carry_time: bool = False):
    data = normalize(cases_in_window, start, length_days, catalog)
    cfg = with_seed(config, seed)
    init_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2**31,)))
    init = init_window_state(prev_state, data, catalog, cfg.M, init_rng, carry_time,
                             cfg.hyper_a, cfg.hyper_b, cfg.landmark_normalizer)
    trace = run_chain(cfg, data, None if prior.flat else prior, init)
    km = km_per_degree(data.domain)
    summary = summarize(trace, km_scale=km, days_scale=days_scale)
    return data, trace, summary, km


def run_rolling(cases, catalog: LandmarkCatalog | None, study_start: dt.date,
                study_end: dt.date, window_days: int, config: SamplerConfig,
                c_mult: float = 2.0, use_prior: bool = True, carry_centers: bool = True,
                carry_time: bool = False, days_scale: float = 28.0,
                on_window=None, resume=None) -> list[WindowResult]:
    """Fit consecutive windows, each informed by its predecessor.

    ``on_window(result)`` is called after each completed fit. ``resume``
    maps window index to ``(summary, final_state)`` for windows already
    fitted; those are reused instead of refitted.
    """
    results: list[WindowResult] = []
    prev_summary = None
    prev_state = None
    resume = resume or {}
    for w, (start, end) in enumerate(window_bounds(study_start, study_end, window_days)):
        length = (end - start).days
        try:
            in_window = window_slice(cases, start, length)
        except EmptyWindow:
            log.warning("window %d [%s, %s) has no cases; skipped", w, start, end)
            continue
        if prev_summary is not None and use_prior:
            names = [f"omega_{k}" for k in ("s", "t")] + \
                [f"omega_{k + 1}" for k in range(catalog.p if catalog is not None else 0)]
            prior = build_prior(prev_summary, c_mult, names)
        else:
            prior = FLAT_PRIOR
        seed = window_seed(config.seed, w)
        if w in resume:
            summary, final_state = resume[w]
            result = WindowResult(w, start, end, len(in_window), summary, prior=prior,
                                  km_scale=summary.conversions.get("km_per_degree", 1.0))
        else:
            data, trace, summary, km = fit_window(
                in_window, start, length, catalog, config, prior,
                prev_state if carry_centers else None, seed, days_scale, carry_time)
            final_state = trace.final_state
            result = WindowResult(w, start, end, len(in_window), summary, trace, data,
                                  prior, km)
            if on_window is not None:
                on_window(result)
        results.append(result)
        prev_summary = summary
        prev_state = final_state
    return results
