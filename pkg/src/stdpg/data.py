"""Case and landmark ingestion, windowing, and time normalization."""

from __future__ import annotations

import csv
import datetime as dt
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyFile, EmptyWindow, MalformedRow
from .geo import Domain, GeoPoint

log = logging.getLogger(__name__)

CASE_COLUMNS = ("lon", "lat", "date")
LANDMARK_COLUMNS = ("type", "lon", "lat")


@dataclass(frozen=True)
class CaseRecord:
    location: GeoPoint
    date: dt.date


@dataclass
class LandmarkCatalog:
    """Ordered landmark types, each with at least one site."""

    types: list[str]
    sites: dict[str, np.ndarray]  # type -> (n_sites, 2) lon/lat
    duplicates_dropped: int = 0

    def __post_init__(self):
        if len(self.types) < 1:
            raise ValueError("catalog needs at least one landmark type")
        if len(set(self.types)) != len(self.types):
            raise ValueError("landmark type names must be unique")
        for name in self.types:
            arr = np.asarray(self.sites[name], dtype=float).reshape(-1, 2)
            if len(arr) == 0:
                raise ValueError(f"landmark type {name!r} has no sites")
            self.sites[name] = arr

    @property
    def p(self) -> int:
        return len(self.types)

    def counts(self) -> list[int]:
        return [len(self.sites[name]) for name in self.types]

    def all_sites(self) -> np.ndarray:
        return np.concatenate([self.sites[name] for name in self.types])


@dataclass
class Dataset:
    """Normalized point pattern for one window.

    ``x`` holds (lon, lat) rows, ``t`` times in [0, 1], and ``z[i, l]`` the
    closest type-``l`` landmark to ``x[i]``.
    """

    x: np.ndarray
    t: np.ndarray
    z: np.ndarray
    domain: Domain
    landmark_types: list[str] = field(default_factory=list)
    window_start: dt.date | None = None
    window_days: int | None = None

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=float).reshape(-1, 2)
        self.t = np.ascontiguousarray(self.t, dtype=float).reshape(-1)
        n = len(self.x)
        if n < 1:
            raise ValueError("dataset needs at least one point")
        if len(self.t) != n:
            raise ValueError("x and t lengths differ")
        if np.any(self.t < 0.0) or np.any(self.t > 1.0):
            raise ValueError("times must lie in [0, 1]")
        self.z = np.ascontiguousarray(self.z, dtype=float).reshape(n, -1, 2)
        if len(self.landmark_types) != self.z.shape[1]:
            if self.landmark_types:
                raise ValueError("landmark_types does not match z")
            self.landmark_types = [f"landmark_{k + 1}" for k in range(self.z.shape[1])]
        for a in (self.x, self.t, self.z):
            a.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.x)

    @property
    def p(self) -> int:
        return self.z.shape[1]

    def denormalize(self, t) -> list[dt.date]:
        """Map normalized times back to calendar dates (day resolution)."""
        if self.window_start is None or self.window_days is None:
            raise ValueError("dataset carries no calendar window")
        days = np.floor(np.asarray(t, dtype=float) * self.window_days).astype(int)
        days = np.minimum(days, self.window_days - 1)
        return [self.window_start + dt.timedelta(days=int(d)) for d in days]

    def save(self, path) -> None:
        np.savez(path, x=self.x, t=self.t, z=self.z,
                 domain=np.array([self.domain.lon_min, self.domain.lon_max,
                                  self.domain.lat_min, self.domain.lat_max]),
                 landmark_types=np.array(self.landmark_types, dtype=str))

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as f:
            d = f["domain"]
            return cls(x=f["x"], t=f["t"], z=f["z"],
                       domain=Domain(*map(float, d)),
                       landmark_types=[str(s) for s in f["landmark_types"]])


def _open_rows(path, columns):
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path} is empty") from None
        header = [h.strip().lower() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise MalformedRow(1, f"header lacks columns {missing}")
        idx = [header.index(c) for c in columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise MalformedRow(lineno, "too few fields")
            rows.append((lineno, [row[k].strip() for k in idx]))
    if not rows:
        raise EmptyFile(f"{path} has a header but no rows")
    return rows


def _parse_point(lineno, lon, lat) -> GeoPoint:
    try:
        return GeoPoint(float(lon), float(lat))
    except ValueError as exc:
        raise MalformedRow(lineno, str(exc)) from None


def load_cases(path, study_start: dt.date | None = None,
               study_end: dt.date | None = None) -> list[CaseRecord]:
    """Read a ``lon,lat,date`` CSV. Dates are ISO-8601; row order is kept.

    When a study period is given, rows dated outside [start, end) are
    rejected as malformed.
    """
    records = []
    for lineno, (lon, lat, date) in _open_rows(path, CASE_COLUMNS):
        point = _parse_point(lineno, lon, lat)
        try:
            day = dt.date.fromisoformat(date)
        except ValueError:
            raise MalformedRow(lineno, f"bad date {date!r}") from None
        if study_start is not None and day < study_start:
            raise MalformedRow(lineno, f"date {day} before study start")
        if study_end is not None and day >= study_end:
            raise MalformedRow(lineno, f"date {day} after study end")
        records.append(CaseRecord(point, day))
    return records


def load_landmarks(path) -> LandmarkCatalog:
    """Read a ``type,lon,lat`` CSV; types keep first-appearance order."""
    types: list[str] = []
    sites: dict[str, list[tuple[float, float]]] = {}
    seen = set()
    dropped = 0
    for lineno, (name, lon, lat) in _open_rows(path, LANDMARK_COLUMNS):
        if not name:
            raise MalformedRow(lineno, "empty landmark type")
        point = _parse_point(lineno, lon, lat)
        key = (name, point.lon, point.lat)
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        if name not in sites:
            types.append(name)
            sites[name] = []
        sites[name].append((point.lon, point.lat))
    if dropped:
        log.warning("dropped %d duplicate landmark rows from %s", dropped, path)
    return LandmarkCatalog(types, {k: np.array(v) for k, v in sites.items()},
                           duplicates_dropped=dropped)


def window_slice(cases, window_start: dt.date, window_len_days: int = 14) -> list[CaseRecord]:
    """Cases with ``window_start <= date < window_start + window_len_days``."""
    end = window_start + dt.timedelta(days=window_len_days)
    out = [c for c in cases if window_start <= c.date < end]
    if not out:
        raise EmptyWindow(f"no cases in [{window_start}, {end})")
    return out


def day_jitter(day_offsets) -> np.ndarray:
    """Within-day position (rank + 0.5) / count for each case, in input order."""
    day_offsets = np.asarray(day_offsets)
    u = np.empty(len(day_offsets))
    for day in np.unique(day_offsets):
        idx = np.flatnonzero(day_offsets == day)
        u[idx] = (np.arange(len(idx)) + 0.5) / len(idx)
    return u


def nearest_landmarks(points, catalog: LandmarkCatalog | None) -> np.ndarray:
    """(N, p, 2) table of the closest site of each type (Euclidean, degrees).

    Ties go to the lowest site index.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    if catalog is None:
        return np.zeros((len(points), 0, 2))
    out = np.empty((len(points), catalog.p, 2))
    for l, name in enumerate(catalog.types):
        sites = catalog.sites[name]
        d2 = ((points[:, None, :] - sites[None, :, :]) ** 2).sum(axis=2)
        out[:, l, :] = sites[np.argmin(d2, axis=1)]
    return out


def normalize(cases, window_start: dt.date, window_len_days: int,
              catalog: LandmarkCatalog | None, domain: Domain | None = None) -> Dataset:
    """Turn a window's cases into a :class:`Dataset` with t in [0, 1)."""
    if not cases:
        raise EmptyWindow("cannot normalize an empty window")
    x = np.array([[c.location.lon, c.location.lat] for c in cases], dtype=float)
    offsets = np.array([(c.date - window_start).days for c in cases])
    if np.any(offsets < 0) or np.any(offsets >= window_len_days):
        raise ValueError("case dates fall outside the window")
    t = (offsets + day_jitter(offsets)) / window_len_days
    if domain is None:
        domain = Domain.from_points(x)
    z = nearest_landmarks(x, catalog)
    types = list(catalog.types) if catalog is not None else []
    return Dataset(x=x, t=t, z=z, domain=domain, landmark_types=types,
                   window_start=window_start, window_days=window_len_days)


def write_cases(path, lonlat, dates) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CASE_COLUMNS)
        for (lon, lat), day in zip(lonlat, dates):
            w.writerow([repr(float(lon)), repr(float(lat)), day.isoformat()])


def write_landmarks(path, catalog: LandmarkCatalog) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LANDMARK_COLUMNS)
        for name in catalog.types:
            for lon, lat in catalog.sites[name]:
                w.writerow([name, repr(float(lon)), repr(float(lat))])
