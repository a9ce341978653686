import datetime as dt

import numpy as np
import pytest

from stdpg.data import Dataset, LandmarkCatalog
from stdpg.geo import Domain
from stdpg.model import ClusterCenters, RangeParams, StickState

CALI = Domain(-76.6, -76.45, 3.3, 3.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def cali():
    return CALI


def make_dataset(rng, n=20, p=2, domain=CALI):
    x = rng.uniform(domain.lower, domain.upper, size=(n, 2))
    t = rng.uniform(0, 1, n)
    z = rng.uniform(domain.lower, domain.upper, size=(n, p, 2))
    return Dataset(x=x, t=t, z=z, domain=domain)


def make_state_parts(rng, M=4, p=2, domain=CALI):
    centers = ClusterCenters(rng.uniform(domain.lower, domain.upper, size=(M, 2)),
                             rng.uniform(0, 1, M))
    U = np.append(rng.uniform(0.05, 0.9, M - 1), 1.0)
    stick = StickState.from_sticks(U, 2.0)
    theta = RangeParams(rng.uniform(0.01, 0.05), rng.uniform(0.05, 0.3), rng.uniform(0.01, 0.05, p))
    return centers, stick, theta


@pytest.fixture
def small_catalog():
    return LandmarkCatalog(["church", "school"], {
        "church": np.array([[-76.55, 3.35], [-76.50, 3.45], [-76.52, 3.40]]),
        "school": np.array([[-76.58, 3.32], [-76.47, 3.48], [-76.53, 3.43]]),
    })


@pytest.fixture
def day0():
    return dt.date(2020, 3, 2)


def stationary_cases(rng, start, n_windows, per_window, window_days=14,
                     centers=((-76.55, 3.35), (-76.5, 3.45), (-76.52, 3.4)),
                     omega_s=0.01, day_centers=(3.0, 7.0, 10.0), omega_days=1.5):
    """Case records from a fixed three-cluster process repeated in every window."""
    from stdpg.data import CaseRecord
    from stdpg.geo import GeoPoint

    centers = np.asarray(centers)
    out = []
    for w in range(n_windows):
        base = start + dt.timedelta(days=w * window_days)
        g = rng.integers(0, len(centers), per_window)
        xy = rng.normal(centers[g], omega_s)
        days = np.clip(np.floor(rng.normal(np.asarray(day_centers)[g], omega_days)), 0, window_days - 1)
        out += [CaseRecord(GeoPoint(float(a), float(b)), base + dt.timedelta(days=int(d)))
                for (a, b), d in zip(xy, days)]
    return out


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
