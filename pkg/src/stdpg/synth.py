"""Forward simulation from the mixture model, used as ground truth in tests."""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, LandmarkCatalog, nearest_landmarks, write_cases, write_landmarks
from .errors import RejectionStall
from .geo import Domain
from .model import RangeParams

MODES = ("space-time-only", "full-with-landmarks")
MIN_ACCEPT_RATE = 1e-4
# attempts before the acceptance-rate check can trigger a stall
STALL_GRACE = 100_000
# rejection rounds for domain truncation before clamping
MAX_RESAMPLE = 1000


@dataclass
class SynthSpec:
    M_star: int
    theta: RangeParams
    b_u: float
    N: int
    domain: Domain
    catalog: LandmarkCatalog | None = None
    mode: str = "space-time-only"
    seed: int = 0
    # centers are kept this many range-widths away from the domain faces
    center_margin: float = 0.0
    start_date: dt.date = dt.date(2020, 3, 2)
    window_days: int = 14

    def __post_init__(self):
        if self.N < 1 or self.M_star < 1:
            raise ValueError("N and M_star must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.mode == "full-with-landmarks":
            if self.catalog is None:
                raise ValueError("full mode requires a landmark catalog")
            if self.catalog.p != self.theta.p:
                raise ValueError("theta needs one landmark range per catalog type")
        elif self.theta.p:
            raise ValueError("space-time-only mode takes no landmark ranges")


@dataclass
class GroundTruth:
    cs: np.ndarray
    ct: np.ndarray
    g: np.ndarray
    q: np.ndarray
    theta: RangeParams
    b_u: float
    acceptance_rate: float = 1.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"cs": self.cs.tolist(), "ct": self.ct.tolist(), "g": self.g.tolist(),
                "q": self.q.tolist(), "theta": self.theta.vector.tolist(), "b_u": self.b_u,
                "acceptance_rate": self.acceptance_rate}


def _gauss_in_box(rng, mean, sd, lo, hi):
    """Per-row Gaussian draws resampled until inside [lo, hi]."""
    out = rng.normal(mean, sd)
    for _ in range(MAX_RESAMPLE):
        bad = np.any((out < lo) | (out > hi), axis=-1) if out.ndim > 1 else (out < lo) | (out > hi)
        if not np.any(bad):
            return out
        out[bad] = rng.normal(mean[bad], sd if np.isscalar(sd) else sd[bad])
    return np.clip(out, lo, hi)


def simulate(spec: SynthSpec):
    """Draw a :class:`Dataset` and its :class:`GroundTruth` from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    dom = spec.domain
    th = spec.theta
    K = spec.M_star
    ms = spec.center_margin * th.omega_s
    mt = spec.center_margin * th.omega_t
    lo = dom.lower + ms
    hi = dom.upper - ms
    if np.any(lo >= hi) or mt >= 0.5:
        raise ValueError("center margin leaves no room for centers")
    cs = rng.uniform(lo, hi, size=(K, 2))
    ct = rng.uniform(mt, 1.0 - mt, size=K)
    U = rng.beta(1.0, spec.b_u, size=K)
    q = U * np.concatenate([[1.0], np.cumprod(1.0 - U[:-1])])
    q = q / q.sum()
    g = rng.choice(K, size=spec.N, p=q)

    t = _gauss_in_box(rng, ct[g], th.omega_t, 0.0, 1.0)
    rate = 1.0
    if spec.mode == "space-time-only":
        x = _gauss_in_box(rng, cs[g], th.omega_s, dom.lower, dom.upper)
        z = np.zeros((spec.N, 0, 2))
        types = []
    else:
        x, z, rate = _landmark_rejection(rng, spec, cs, g)
        types = list(spec.catalog.types)
    data = Dataset(x=x, t=t, z=z, domain=dom, landmark_types=types,
                   window_start=spec.start_date, window_days=spec.window_days)
    truth = GroundTruth(cs=cs, ct=ct, g=g, q=q, theta=th, b_u=spec.b_u, acceptance_rate=rate)
    return data, truth


def _landmark_rejection(rng, spec, cs, g):
    dom = spec.domain
    th = spec.theta
    N = spec.N
    x = np.empty((N, 2))
    pending = np.arange(N)
    tries = 0
    accepted = 0
    while len(pending):
        cand = _gauss_in_box(rng, cs[g[pending]], th.omega_s, dom.lower, dom.upper)
        z = nearest_landmarks(cand, spec.catalog)
        d2 = np.sum((z - cs[g[pending]][:, None, :]) ** 2, axis=2)
        log_acc = -np.sum(d2 / (2.0 * th.omega_l ** 2), axis=1)
        assert np.all(log_acc <= 0.0)
        ok = np.log(rng.random(len(pending))) < log_acc
        x[pending[ok]] = cand[ok]
        tries += len(pending)
        accepted += int(ok.sum())
        pending = pending[~ok]
        if tries >= STALL_GRACE and accepted / tries < MIN_ACCEPT_RATE:
            raise RejectionStall(f"acceptance rate {accepted / tries:.2e} after {tries} proposals")
    return x, nearest_landmarks(x, spec.catalog), accepted / tries


def random_catalog(domain: Domain, counts, rng, names=None) -> LandmarkCatalog:
    """Landmark sites placed uniformly over the domain."""
    names = names or [f"type{k + 1}" for k in range(len(counts))]
    sites = {n: rng.uniform(domain.lower, domain.upper, size=(c, 2)) for n, c in zip(names, counts)}
    return LandmarkCatalog(list(names), sites)


def to_dates(data: Dataset, start: dt.date, days: int) -> list[dt.date]:
    offs = np.minimum(np.floor(data.t * days).astype(int), days - 1)
    return [start + dt.timedelta(days=int(k)) for k in offs]


def spec_from_dict(d: dict) -> SynthSpec:
    """Build a spec from a JSON-style dict (see the README for the keys)."""
    dom = Domain(*d["domain"]) if isinstance(d["domain"], list) else Domain.from_dict(d["domain"])
    rng = np.random.default_rng(d.get("seed", 0) + 1)
    catalog = None
    if "landmark_counts" in d:
        catalog = random_catalog(dom, d["landmark_counts"], rng, d.get("landmark_types"))
    omega_l = d.get("omega_l", [])
    mode = d.get("mode", "full-with-landmarks" if catalog is not None and omega_l else "space-time-only")
    return SynthSpec(
        M_star=int(d["M_star"]),
        theta=RangeParams(d["omega_s"], d["omega_t"], omega_l),
        b_u=float(d["b_u"]), N=int(d["N"]), domain=dom, catalog=catalog, mode=mode,
        seed=int(d.get("seed", 0)), center_margin=float(d.get("center_margin", 0.0)),
        start_date=dt.date.fromisoformat(d.get("start_date", "2020-03-02")),
        window_days=int(d.get("window_days", 14)),
    )


def write_simulation(spec: SynthSpec, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, truth = simulate(spec)
    dates = to_dates(data, spec.start_date, spec.window_days)
    write_cases(out / "cases.csv", data.x, dates)
    paths = {"cases": str(out / "cases.csv")}
    if spec.catalog is not None:
        write_landmarks(out / "landmarks.csv", spec.catalog)
        paths["landmarks"] = str(out / "landmarks.csv")
    td = truth.to_dict()
    td["landmark_types"] = list(spec.catalog.types) if spec.catalog is not None else []
    (out / "truth.json").write_text(json.dumps(td, indent=2))
    paths["truth"] = str(out / "truth.json")
    return paths
