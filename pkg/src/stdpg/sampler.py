"""Blocked Gibbs sampler for the truncated stick-breaking mixture."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ChainDiverged, ConfigError, DegenerateError, EmptyTrace
from .model import (
    OMEGA_FLOOR,
    ClusterCenters,
    RangeParams,
    StickState,
    kernel_terms,
    log_likelihood,
    normalizer_power,
    stick_weights,
)

log = logging.getLogger(__name__)

# rejection attempts for truncated center draws before clamping
CENTER_MAX_TRIES = 100
# sweep-level RNG substreams, one per block
_BLOCKS = ("memberships", "centers", "sticks", "concentration", "ranges")
_U_MAX = np.nextafter(1.0, 0.0)
_U_MIN = np.finfo(float).tiny


@dataclass
class ChainState:
    centers: ClusterCenters
    g: np.ndarray
    stick: StickState
    theta: RangeParams

    @property
    def M(self) -> int:
        return self.centers.M

    def counts(self) -> np.ndarray:
        return np.bincount(self.g, minlength=self.M)

    def nonempty(self) -> np.ndarray:
        return np.flatnonzero(self.counts())

    @property
    def m_star(self) -> int:
        return int(np.count_nonzero(self.counts()))

    def copy(self) -> "ChainState":
        return ChainState(self.centers.copy(), self.g.copy(), self.stick.copy(), self.theta)


@dataclass
class SamplerConfig:
    M: int = 120
    n_iter: int = 20000
    n_burn: int = 10000
    thin: int = 1
    seed: int = 0
    mh_step: float | list | None = None
    adapt: bool = True
    hyper_a: float = 1.0
    hyper_b: float = 0.25
    landmark_normalizer: str = "linear"
    # keep centers/weights for every draw_thin-th retained draw
    draw_thin: int = 10
    adapt_interval: int = 50
    threads: int = 1

    def validate(self) -> "SamplerConfig":
        if self.M < 2:
            raise ConfigError("M must be at least 2")
        if not 0 <= self.n_burn < self.n_iter:
            raise ConfigError("need 0 <= n_burn < n_iter")
        if self.thin < 1 or self.draw_thin < 1:
            raise ConfigError("thinning strides must be >= 1")
        if self.hyper_a <= 0 or self.hyper_b <= 0:
            raise ConfigError("Gamma hyperparameters must be positive")
        if self.adapt_interval < 1:
            raise ConfigError("adapt_interval must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            normalizer_power(self.landmark_normalizer)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return self


def _chunks(n: int, threads: int):
    if threads <= 1 or n < 2 * threads:
        return [slice(0, n)]
    edges = np.linspace(0, n, threads + 1).astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _map_rows(fn, n: int, threads: int):
    chunks = _chunks(n, threads)
    if len(chunks) == 1:
        return [fn(chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(fn, chunks))


def sample_memberships(state: ChainState, data: Dataset, rng: np.random.Generator,
                       normalizer: str = "linear", threads: int = 1) -> np.ndarray:
    """Draw every ``g_i`` from its categorical conditional over all M clusters."""
    terms = kernel_terms(data, state.theta, normalizer)
    with np.errstate(divide="ignore"):
        logq = np.log(state.stick.q)
    u = rng.random(data.n)
    M = state.M

    def draw(rows):
        a = terms.matrix(data.t, state.centers, rows=rows, include_constants=False)
        a += logq[None, :]
        m = a.max(axis=1)
        if not np.all(np.isfinite(m)):
            raise DegenerateError("all membership terms underflowed")
        np.subtract(a, m[:, None], out=a)
        np.exp(a, out=a)
        np.cumsum(a, axis=1, out=a)
        target = u[rows] * a[:, -1]
        g = np.count_nonzero(a < target[:, None], axis=1)
        return np.minimum(g, M - 1)

    return np.concatenate(_map_rows(draw, data.n, threads))


def _truncated_normal(rng, mean, sd, lo, hi):
    """Rejection draws of N(mean, sd^2) restricted to the box [lo, hi]; clamp after the cap."""
    out = rng.normal(mean, sd)
    bad = np.any((out < lo) | (out > hi), axis=-1) if out.ndim > 1 else (out < lo) | (out > hi)
    tries = 1
    while np.any(bad) and tries < CENTER_MAX_TRIES:
        idx = np.flatnonzero(bad)
        out[idx] = rng.normal(mean[idx], sd[idx])
        sub = out[idx]
        sub_bad = (sub < lo) | (sub > hi)
        if sub_bad.ndim > 1:
            sub_bad = np.any(sub_bad, axis=-1)
        bad[idx] = sub_bad
        tries += 1
    return np.clip(out, lo, hi)


def spatial_center_conditional(state: ChainState, data: Dataset):
    """Per-cluster Gaussian mean (M, 2) and sd (M,) of the spatial center given members.

    Rows for empty clusters are NaN.
    """
    theta = state.theta
    prec_unit = 1.0 / theta.omega_s ** 2 + float(np.sum(1.0 / theta.omega_l ** 2))
    weighted = data.x / theta.omega_s ** 2
    if data.p:
        weighted = weighted + np.einsum("l,ilk->ik", 1.0 / theta.omega_l ** 2, data.z)
    n = state.counts()
    sums = np.stack([np.bincount(state.g, weights=weighted[:, k], minlength=state.M)
                     for k in range(2)], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = n * prec_unit
        mean = sums / lam[:, None]
        sd = 1.0 / np.sqrt(lam)
    return mean, sd


def sample_centers(state: ChainState, data: Dataset, rng: np.random.Generator) -> ClusterCenters:
    """Draw occupied centers from their truncated Gaussian conditionals, empty ones from the prior."""
    dom = data.domain
    M = state.M
    n = state.counts()
    occ = np.flatnonzero(n)
    empty = np.flatnonzero(n == 0)
    cs = np.empty((M, 2))
    ct = np.empty(M)

    mean, sd = spatial_center_conditional(state, data)
    tsum = np.bincount(state.g, weights=data.t, minlength=M)
    if len(occ):
        m_s = mean[occ]
        s_s = np.repeat(sd[occ, None], 2, axis=1)
        cs[occ] = _truncated_normal(rng, m_s, s_s, dom.lower, dom.upper)
        m_t = tsum[occ] / n[occ]
        s_t = state.theta.omega_t / np.sqrt(n[occ])
        ct[occ] = _truncated_normal(rng, m_t, s_t, dom.t_min, dom.t_max)
    if len(empty):
        cs[empty] = rng.uniform(dom.lower, dom.upper, size=(len(empty), 2))
        ct[empty] = rng.uniform(dom.t_min, dom.t_max, size=len(empty))
    return ClusterCenters(cs, ct)


def sample_sticks(state: ChainState, rng: np.random.Generator) -> StickState:
    n = state.counts()
    tail = n.sum() - np.cumsum(n)  # observations in clusters after j
    a = 1.0 + n[:-1]
    b = state.stick.b_u + tail[:-1]
    U = np.empty(state.M)
    U[:-1] = np.clip(rng.beta(a, b), _U_MIN, _U_MAX)
    U[-1] = 1.0
    return StickState(U, stick_weights(U), state.stick.b_u)


def concentration_posterior(U, a: float = 1.0, b: float = 0.25) -> tuple[float, float]:
    """(shape, rate) of the Gamma conditional of ``b_u``."""
    head = np.asarray(U, dtype=float)[:-1]
    if np.any(head >= 1.0):
        raise DegenerateError("a non-final stick equals 1")
    return len(head) + a, b - float(np.sum(np.log1p(-head)))


def sample_concentration(state: ChainState, rng: np.random.Generator,
                         a: float = 1.0, b: float = 0.25) -> float:
    shape, rate = concentration_posterior(state.stick.U, a, b)
    return float(rng.gamma(shape, 1.0 / rate))


def range_statistics(state: ChainState, data: Dataset) -> np.ndarray:
    """Summed squared deviations of each observation from its assigned center.

    Returns ``[S_space, S_time, S_landmark_1, ...]``.
    """
    cs = state.centers.cs[state.g]
    out = np.empty(2 + data.p)
    out[0] = np.sum((data.x - cs) ** 2)
    out[1] = np.sum((data.t - state.centers.ct[state.g]) ** 2)
    if data.p:
        out[2:] = np.sum((data.z - cs[:, None, :]) ** 2, axis=(0, 2))
    return out


def range_log_conditional(omega, stats, n: int, powers) -> np.ndarray:
    """Log of prod_i kernel(i, g_i) as a function of each range parameter separately."""
    omega = np.asarray(omega, dtype=float)
    return -np.asarray(powers) * n * np.log(omega) - np.asarray(stats) / (2.0 * omega ** 2)


def _range_powers(p: int, normalizer: str) -> np.ndarray:
    return np.array([2.0, 1.0] + [float(normalizer_power(normalizer))] * p)


def _prior_logpdf(prior, v) -> np.ndarray:
    if prior is None:
        return np.zeros(len(v))
    return np.asarray(prior.logpdf(v), dtype=float)


def sample_ranges(state: ChainState, data: Dataset, prior, rng: np.random.Generator,
                  steps, normalizer: str = "linear"):
    """Componentwise log-scale random-walk Metropolis for the range parameters.

    ``prior`` is ``None`` (flat on the positive axis) or any object with a
    ``logpdf(vector) -> per-component log density`` method. Returns the new
    ``RangeParams`` and a boolean acceptance vector.
    """
    v = state.theta.vector.copy()
    k = len(v)
    steps = np.broadcast_to(np.asarray(steps, dtype=float), (k,))
    stats = range_statistics(state, data)
    powers = _range_powers(data.p, normalizer)
    z = rng.standard_normal(k)
    log_u = np.log(rng.random(k))

    proposal = v * np.exp(steps * z)
    cur = range_log_conditional(v, stats, data.n, powers) + _prior_logpdf(prior, v) + np.log(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        new = (range_log_conditional(proposal, stats, data.n, powers)
               + _prior_logpdf(prior, proposal) + np.log(proposal))
    log_ratio = new - cur
    accept = (proposal > OMEGA_FLOOR) & np.isfinite(new) & (log_u < log_ratio)
    v = np.where(accept, proposal, v)
    return RangeParams.from_vector(v), accept


def default_steps(n: int, k: int) -> np.ndarray:
    return np.full(k, 1.0 / math.sqrt(max(n, 1)))


def gibbs_sweep(state: ChainState, data: Dataset, prior, rng: np.random.Generator,
                config: SamplerConfig | None = None, steps=None, return_accept: bool = False):
    """One pass: memberships, centers, sticks, concentration, ranges."""
    config = config or SamplerConfig(M=state.M)
    if steps is None:
        steps = config.mh_step if config.mh_step is not None else default_steps(data.n, 2 + data.p)
    streams = rng.spawn(len(_BLOCKS))
    g = sample_memberships(state, data, streams[0], config.landmark_normalizer, config.threads)
    state = ChainState(state.centers, g, state.stick, state.theta)
    state.centers = sample_centers(state, data, streams[1])
    state.stick = sample_sticks(state, streams[2])
    b_u = sample_concentration(state, streams[3], config.hyper_a, config.hyper_b)
    state.stick = StickState(state.stick.U, state.stick.q, b_u)
    theta, accept = sample_ranges(state, data, prior, streams[4], steps, config.landmark_normalizer)
    state.theta = theta
    if return_accept:
        return state, accept
    return state


@dataclass
class Trace:
    """Post burn-in draws.

    Scalar fields have one row per retained draw; ``cs``/``ct``/``q``/
    ``nonempty`` keep every ``draw_thin``-th retained draw for density work.
    """

    param_names: list
    iterations: np.ndarray
    theta: np.ndarray
    b_u: np.ndarray
    m_star: np.ndarray
    loglik: np.ndarray
    draw_iterations: np.ndarray
    cs: np.ndarray
    ct: np.ndarray
    q: np.ndarray
    nonempty: np.ndarray
    final_state: ChainState | None = None
    steps: np.ndarray | None = None
    accept_rate: np.ndarray | None = None
    landmark_types: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterations)

    def scalars(self) -> dict:
        out = {name: self.theta[:, k] for k, name in enumerate(self.param_names)}
        out["b_u"] = self.b_u
        out["M_star"] = self.m_star.astype(float)
        return out

    def save_draws(self, path) -> None:
        np.savez(path, draw_iterations=self.draw_iterations, cs=self.cs, ct=self.ct,
                 q=self.q, nonempty=self.nonempty, theta=self._draw_theta())

    def _draw_theta(self) -> np.ndarray:
        pos = np.searchsorted(self.iterations, self.draw_iterations)
        return self.theta[pos]


@dataclass
class Draws:
    """Center/weight draws with their range parameters, as read back from disk."""

    cs: np.ndarray
    ct: np.ndarray
    q: np.ndarray
    nonempty: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_trace(cls, trace: Trace) -> "Draws":
        return cls(trace.cs, trace.ct, trace.q, trace.nonempty, trace._draw_theta())

    @classmethod
    def load(cls, path) -> "Draws":
        with np.load(path) as f:
            return cls(f["cs"], f["ct"], f["q"], f["nonempty"], f["theta"])

    def __len__(self) -> int:
        return len(self.q)


def param_names(p: int) -> list[str]:
    return ["omega_s", "omega_t"] + [f"omega_{k + 1}" for k in range(p)]


def iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(iteration,)))


def run_chain(config: SamplerConfig, data: Dataset, prior, init: ChainState) -> Trace:
    config.validate()
    if init.M != config.M:
        raise ConfigError(f"initial state has M={init.M}, config has M={config.M}")
    k = 2 + data.p
    steps = (np.broadcast_to(np.asarray(config.mh_step, dtype=float), (k,)).copy()
             if config.mh_step is not None else default_steps(data.n, k))
    n_keep = (config.n_iter - config.n_burn) // config.thin
    iters = np.empty(n_keep, dtype=int)
    theta = np.empty((n_keep, k))
    b_u = np.empty(n_keep)
    m_star = np.empty(n_keep, dtype=int)
    loglik = np.empty(n_keep)
    draw_rows = []
    batch_acc = np.zeros(k)
    post_acc = np.zeros(k)
    state = init.copy()
    kept = 0
    for it in range(config.n_iter):
        state, acc = gibbs_sweep(state, data, prior, iteration_rng(config.seed, it),
                                 config, steps, return_accept=True)
        if it < config.n_burn:
            batch_acc += acc
            if config.adapt and (it + 1) % config.adapt_interval == 0:
                rate = batch_acc / config.adapt_interval
                steps = np.where(rate < 0.2, steps * 0.8, np.where(rate > 0.5, steps * 1.25, steps))
                batch_acc[:] = 0.0
            continue
        post_acc += acc
        if (it - config.n_burn) % config.thin != config.thin - 1:
            continue
        if kept >= n_keep:
            continue
        nonempty = state.nonempty()
        ll = log_likelihood(data, state.centers, state.stick, state.theta, nonempty,
                            config.landmark_normalizer)
        if not math.isfinite(ll):
            raise ChainDiverged(f"log-likelihood became {ll} at iteration {it}")
        iters[kept] = it
        theta[kept] = state.theta.vector
        b_u[kept] = state.stick.b_u
        m_star[kept] = len(nonempty)
        loglik[kept] = ll
        if kept % config.draw_thin == 0:
            mask = np.zeros(state.M, dtype=bool)
            mask[nonempty] = True
            draw_rows.append((it, state.centers.cs.copy(), state.centers.ct.copy(),
                              state.stick.q.copy(), mask))
        kept += 1
    M = config.M
    return Trace(
        param_names=param_names(data.p),
        iterations=iters, theta=theta, b_u=b_u, m_star=m_star, loglik=loglik,
        draw_iterations=np.array([r[0] for r in draw_rows], dtype=int),
        cs=np.array([r[1] for r in draw_rows]).reshape(-1, M, 2),
        ct=np.array([r[2] for r in draw_rows]).reshape(-1, M),
        q=np.array([r[3] for r in draw_rows]).reshape(-1, M),
        nonempty=np.array([r[4] for r in draw_rows], dtype=bool).reshape(-1, M),
        final_state=state, steps=steps,
        accept_rate=post_acc / max(config.n_iter - config.n_burn, 1),
        landmark_types=list(data.landmark_types),
    )


def hpd_interval(draws, confidence: float = 0.95) -> tuple[float, float]:
    """Shortest interval spanning ``ceil(confidence * K)`` sorted draws."""
    x = np.sort(np.asarray(draws, dtype=float))
    K = len(x)
    if K == 0:
        raise EmptyTrace("no draws")
    m = min(K, max(1, math.ceil(confidence * K - 1e-9)))
    widths = x[m - 1:] - x[:K - m + 1]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + m - 1])


@dataclass
class ParamSummary:
    mean: float
    var: float
    hpd_lo: float
    hpd_hi: float

    def scaled(self, factor: float) -> "ParamSummary":
        return ParamSummary(self.mean * factor, self.var * factor ** 2,
                            self.hpd_lo * factor, self.hpd_hi * factor)


@dataclass
class PosteriorSummary:
    params: dict
    converted: dict
    m_star_mean: float
    final_centers: dict
    n_draws: int
    conversions: dict = field(default_factory=dict)
    landmark_types: list = field(default_factory=list)

    def theta_mean(self, names=None) -> np.ndarray:
        names = names or [k for k in self.params if k.startswith("omega_")]
        return np.array([self.params[k].mean for k in names])

    def theta_var(self, names=None) -> np.ndarray:
        names = names or [k for k in self.params if k.startswith("omega_")]
        return np.array([self.params[k].var for k in names])

    def to_dict(self) -> dict:
        return {
            "params": {k: asdict(v) for k, v in self.params.items()},
            "converted": {k: asdict(v) for k, v in self.converted.items()},
            "M_star_mean": self.m_star_mean,
            "final_centers": self.final_centers,
            "n_draws": self.n_draws,
            "conversions": self.conversions,
            "landmark_types": self.landmark_types,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PosteriorSummary":
        return cls(
            params={k: ParamSummary(**v) for k, v in d["params"].items()},
            converted={k: ParamSummary(**v) for k, v in d["converted"].items()},
            m_star_mean=d["M_star_mean"], final_centers=d["final_centers"],
            n_draws=d["n_draws"], conversions=d.get("conversions", {}),
            landmark_types=d.get("landmark_types", []),
        )

    def save(self, path, metadata: dict | None = None) -> None:
        d = self.to_dict()
        if metadata is not None:
            d["metadata"] = metadata
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=False))

    @classmethod
    def load(cls, path) -> "PosteriorSummary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def summarize_values(values, confidence: float = 0.95) -> ParamSummary:
    values = np.asarray(values, dtype=float)
    if len(values) == 0:
        raise EmptyTrace("trace is empty")
    lo, hi = hpd_interval(values, confidence)
    mean = float(np.mean(values))
    var = float(np.var(values))
    if not lo - 1e-12 * abs(mean) <= mean <= hi + 1e-12 * abs(mean):
        warnings.warn("posterior mean lies outside its HPD interval; trace may be multimodal")
    return ParamSummary(mean, var, lo, hi)


def summarize(trace: Trace, confidence: float = 0.95, km_scale: float = 1.0,
              days_scale: float = 28.0) -> PosteriorSummary:
    if len(trace) == 0:
        raise EmptyTrace("trace is empty")
    params = {name: summarize_values(vals, confidence) for name, vals in trace.scalars().items()}
    converted = {}
    for name in trace.param_names:
        factor = days_scale if name == "omega_t" else km_scale
        converted[name] = params[name].scaled(factor)
    final = {}
    if trace.final_state is not None:
        st = trace.final_state
        final = {"cs": st.centers.cs.tolist(), "ct": st.centers.ct.tolist(),
                 "nonempty": st.nonempty().tolist(), "theta": st.theta.vector.tolist()}
    return PosteriorSummary(
        params=params, converted=converted,
        m_star_mean=float(np.mean(trace.m_star)), final_centers=final,
        n_draws=len(trace),
        conversions={"km_per_degree": km_scale, "days_scale": days_scale,
                     "confidence": confidence},
        landmark_types=list(trace.landmark_types),
    )


def write_trace_csv(trace: Trace, path) -> None:
    """One row per retained draw; floats written with round-trip precision."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", *trace.param_names, "b_u", "M_star", "loglik"])
        for r in range(len(trace)):
            w.writerow([int(trace.iterations[r]), *(repr(float(v)) for v in trace.theta[r]),
                        repr(float(trace.b_u[r])), int(trace.m_star[r]),
                        repr(float(trace.loglik[r]))])


def read_trace_csv(path) -> dict:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = list(zip(*body)) if body else [[] for _ in header]
    return {h: np.array(c, dtype=int if h in ("iteration", "M_star") else float)
            for h, c in zip(header, cols)}


def state_to_dict(state: ChainState) -> dict:
    return {"cs": state.centers.cs.tolist(), "ct": state.centers.ct.tolist(),
            "g": state.g.tolist(), "U": state.stick.U.tolist(), "b_u": state.stick.b_u,
            "theta": state.theta.vector.tolist()}


def state_from_dict(d: dict) -> ChainState:
    return ChainState(ClusterCenters(d["cs"], d["ct"]), np.asarray(d["g"], dtype=int),
                      StickState.from_sticks(d["U"], d["b_u"]),
                      RangeParams.from_vector(d["theta"]))


def config_dict(config: SamplerConfig) -> dict:
    d = asdict(config)
    if isinstance(d["mh_step"], np.ndarray):
        d["mh_step"] = d["mh_step"].tolist()
    return d


def with_seed(config: SamplerConfig, seed: int) -> SamplerConfig:
    return replace(config, seed=int(seed))
