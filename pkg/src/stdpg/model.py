"""Stick-breaking weights, the space-time-landmark kernel, and the likelihood.

Cluster indices are 0-based throughout (``g[i]`` in ``0..M-1``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import DegenerateError, DomainError
from .geo import Domain

OMEGA_FLOOR = 1e-6
NORMALIZERS = {"linear": 1, "squared": 2}


def normalizer_power(normalizer: str) -> int:
    try:
        return NORMALIZERS[normalizer]
    except KeyError:
        raise ValueError(f"landmark normalizer must be one of {sorted(NORMALIZERS)}") from None


@dataclass(frozen=True)
class RangeParams:
    omega_s: float
    omega_t: float
    omega_l: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "omega_l", np.asarray(self.omega_l, dtype=float).reshape(-1))
        v = self.vector
        if not np.all(np.isfinite(v)) or np.any(v <= OMEGA_FLOOR):
            raise DomainError(f"range parameters must exceed {OMEGA_FLOOR}: {v}")

    @property
    def p(self) -> int:
        return len(self.omega_l)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.omega_s, self.omega_t], self.omega_l])

    @classmethod
    def from_vector(cls, v) -> "RangeParams":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), float(v[1]), v[2:].copy())


@dataclass
class ClusterCenters:
    cs: np.ndarray  # (M, 2) lon/lat
    ct: np.ndarray  # (M,)

    def __post_init__(self):
        self.cs = np.asarray(self.cs, dtype=float).reshape(-1, 2)
        self.ct = np.asarray(self.ct, dtype=float).reshape(-1)
        if len(self.cs) != len(self.ct):
            raise ValueError("spatial and temporal center counts differ")

    @property
    def M(self) -> int:
        return len(self.ct)

    def inside(self, domain: Domain) -> bool:
        lo, hi = domain.lower, domain.upper
        return bool(np.all(self.cs >= lo) and np.all(self.cs <= hi)
                    and np.all(self.ct >= 0.0) and np.all(self.ct <= 1.0))

    def copy(self) -> "ClusterCenters":
        return ClusterCenters(self.cs.copy(), self.ct.copy())


@dataclass
class StickState:
    U: np.ndarray
    q: np.ndarray
    b_u: float

    @classmethod
    def from_sticks(cls, U, b_u: float) -> "StickState":
        U = np.asarray(U, dtype=float)
        return cls(U, stick_weights(U), float(b_u))

    def copy(self) -> "StickState":
        return StickState(self.U.copy(), self.q.copy(), self.b_u)


def stick_weights(U) -> np.ndarray:
    """Truncated stick-breaking weights ``q_j = U_j * prod_{k<j} (1 - U_k)``.

    The last stick must equal 1 so the weights sum to one.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 1 or len(U) == 0:
        raise DomainError("U must be a non-empty vector")
    if np.any(~(U > 0.0)) or np.any(U > 1.0):
        raise DomainError("all sticks must lie in (0, 1]")
    if U[-1] != 1.0:
        raise DomainError("the final stick must equal 1")
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - U[:-1])])
    return U * remaining


def log_normalizer(theta: RangeParams, normalizer: str = "linear") -> float:
    power = normalizer_power(normalizer)
    return float(-2.0 * np.log(theta.omega_s) - np.log(theta.omega_t)
                 - power * np.sum(np.log(theta.omega_l)))


def log_kernel(i: int, j: int, data: Dataset, centers: ClusterCenters,
               theta: RangeParams, normalizer: str = "linear") -> float:
    """Unnormalized log kernel of observation ``i`` under cluster ``j``."""
    c = centers.cs[j]
    val = log_normalizer(theta, normalizer)
    val -= np.sum((data.x[i] - c) ** 2) / (2.0 * theta.omega_s ** 2)
    val -= (data.t[i] - centers.ct[j]) ** 2 / (2.0 * theta.omega_t ** 2)
    if data.p:
        d2 = np.sum((data.z[i] - c) ** 2, axis=1)
        val -= np.sum(d2 / (2.0 * theta.omega_l ** 2))
    return float(val)


@dataclass(frozen=True)
class KernelTerms:
    """Per-observation pieces of the kernel for a fixed ``theta``.

    The observation and landmark quadratics in the cluster's spatial center
    collapse to ``W * |ybar_i - c|^2 + resid_i`` with ``W`` the summed
    half-precisions and ``ybar_i`` the precision-weighted mean point.
    """

    ybar: np.ndarray
    W: float
    resid: np.ndarray
    inv2t: float
    lognorm: float

    def matrix(self, t, centers: ClusterCenters, rows=slice(None), cols=slice(None),
               include_constants: bool = True) -> np.ndarray:
        # expand the squared distances into one small matmul; coordinates are
        # shifted to a common origin first so the expansion does not cancel
        origin = self.ybar.mean(axis=0) if len(self.ybar) else np.zeros(2)
        yb = self.ybar[rows] - origin
        tt = np.asarray(t, dtype=float)[rows]
        cs = centers.cs[cols] - origin
        ct = centers.ct[cols]
        lhs = np.column_stack([yb, tt, np.ones(len(tt))])
        rhs = np.vstack([2.0 * self.W * cs.T, 2.0 * self.inv2t * ct,
                         -(self.W * np.sum(cs * cs, axis=1) + self.inv2t * ct * ct)])
        out = lhs @ rhs
        row = self.W * np.sum(yb * yb, axis=1) + self.inv2t * tt * tt
        if include_constants:
            row = row + self.resid[rows] - self.lognorm
        out -= row[:, None]
        return out


def kernel_terms(data: Dataset, theta: RangeParams, normalizer: str = "linear") -> KernelTerms:
    w_s = 0.5 / theta.omega_s ** 2
    w_l = 0.5 / theta.omega_l ** 2
    W = w_s + float(np.sum(w_l))
    ybar = w_s * data.x
    if data.p:
        ybar = ybar + np.einsum("l,ilk->ik", w_l, data.z)
    ybar = ybar / W
    resid = w_s * np.sum((data.x - ybar) ** 2, axis=1)
    if data.p:
        resid = resid + np.einsum("l,il->i", w_l, np.sum((data.z - ybar[:, None, :]) ** 2, axis=2))
    return KernelTerms(ybar=ybar, W=W, resid=resid, inv2t=0.5 / theta.omega_t ** 2,
                       lognorm=log_normalizer(theta, normalizer))


def log_kernel_matrix(data: Dataset, centers: ClusterCenters, theta: RangeParams,
                      normalizer: str = "linear") -> np.ndarray:
    """(N, M) matrix of :func:`log_kernel` values."""
    return kernel_terms(data, theta, normalizer).matrix(data.t, centers)


def _log_weights(q) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(q, dtype=float))


def normalize_log_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max shift; raises if a row is entirely -inf."""
    m = np.max(logits, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateError("all membership terms underflowed")
    p = np.exp(logits - m)
    return p / p.sum(axis=-1, keepdims=True)


def membership_logprobs(i: int, data: Dataset, centers: ClusterCenters, stick: StickState,
                        theta: RangeParams, normalizer: str = "linear") -> np.ndarray:
    """Normalized membership probabilities of observation ``i`` (length M).

    Despite the name the result is on the probability scale; the
    arithmetic is carried out in log space.
    """
    terms = kernel_terms(data, theta, normalizer)
    row = terms.matrix(data.t, centers, rows=slice(i, i + 1))[0]
    return normalize_log_rows(_log_weights(stick.q) + row)


def membership_prob_matrix(data: Dataset, centers: ClusterCenters, stick: StickState,
                           theta: RangeParams, normalizer: str = "linear") -> np.ndarray:
    terms = kernel_terms(data, theta, normalizer)
    return normalize_log_rows(_log_weights(stick.q) + terms.matrix(data.t, centers))


def logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = np.max(a, axis=1)
    if not np.all(np.isfinite(m)):
        raise DegenerateError("mixture density underflowed for some observation")
    return m + np.log(np.sum(np.exp(a - m[:, None]), axis=1))


def log_likelihood(data: Dataset, centers: ClusterCenters, stick: StickState,
                   theta: RangeParams, nonempty, normalizer: str = "linear",
                   terms: KernelTerms | None = None) -> float:
    """Mixture log-likelihood summed over observations, using clusters in ``nonempty``."""
    cols = np.unique(np.asarray(list(nonempty), dtype=int))
    if len(cols) == 0:
        raise DegenerateError("no non-empty clusters")
    if terms is None:
        terms = kernel_terms(data, theta, normalizer)
    a = terms.matrix(data.t, centers, cols=cols) + _log_weights(stick.q[cols])[None, :]
    return float(np.sum(logsumexp_rows(a)))
