"""Coordinate domain handling and great-circle distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EARTH_RADIUS_KM = 6371.0

# fraction of the bounding-box width added on each side
DOMAIN_PAD = 0.02
# minimum padding (degrees) for degenerate boxes, e.g. a single case
MIN_PAD_DEG = 1e-3


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")


@dataclass(frozen=True)
class Domain:
    """Axis-aligned space-time box; time is always normalized to [0, 1]."""

    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if not self.lon_min < self.lon_max:
            raise ValueError("lon_min must be < lon_max")
        if not self.lat_min < self.lat_max:
            raise ValueError("lat_min must be < lat_max")
        if self.t_min != 0.0 or self.t_max != 1.0:
            raise ValueError("time domain is fixed to [0, 1]")

    @property
    def area(self) -> float:
        return (self.lon_max - self.lon_min) * (self.lat_max - self.lat_min)

    @property
    def centroid(self) -> GeoPoint:
        return GeoPoint(0.5 * (self.lon_min + self.lon_max),
                        0.5 * (self.lat_min + self.lat_max))

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.lon_min, self.lat_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.lon_max, self.lat_max])

    @classmethod
    def from_points(cls, lonlat, pad: float = DOMAIN_PAD) -> "Domain":
        """Bounding box of ``lonlat`` (shape (N, 2)) expanded by ``pad`` per side."""
        lonlat = np.asarray(lonlat, dtype=float).reshape(-1, 2)
        lo = lonlat.min(axis=0)
        hi = lonlat.max(axis=0)
        margin = np.maximum(pad * (hi - lo), MIN_PAD_DEG)
        lo = lo - margin
        hi = hi + margin
        return cls(float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))

    def to_dict(self) -> dict:
        return {"lon_min": self.lon_min, "lon_max": self.lon_max,
                "lat_min": self.lat_min, "lat_max": self.lat_max,
                "t_min": self.t_min, "t_max": self.t_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(d["lon_min"], d["lon_max"], d["lat_min"], d["lat_max"])


def haversine_km(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in km between two points on a 6371 km sphere."""
    return float(haversine_km_array(a.lon, a.lat, b.lon, b.lat))


def haversine_km_array(lon1, lat1, lon2, lat2):
    """Vectorized haversine; arguments broadcast, degrees in, km out."""
    lat1r = np.radians(lat1)
    lat2r = np.radians(lat2)
    dlat = np.radians(np.subtract(lat2, lat1))
    dlon = np.radians(np.subtract(lon2, lon1))
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1r) * np.cos(lat2r) * np.sin(dlon / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    return EARTH_RADIUS_KM * 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def degree_scales_km(lat: float, lon: float = 0.0) -> tuple[float, float]:
    """(km per degree of latitude, km per degree of longitude) at a point.

    Each scale is the haversine length of a 1 degree displacement centred
    on the point.
    """
    lat_lo = max(lat - 0.5, -90.0)
    lat_hi = min(lat + 0.5, 90.0)
    lat_scale = float(haversine_km_array(lon, lat_lo, lon, lat_hi)) / (lat_hi - lat_lo)
    lon_scale = float(haversine_km_array(lon - 0.5, lat, lon + 0.5, lat))
    return lat_scale, lon_scale


def km_per_degree(domain: Domain) -> float:
    """Isotropic degree-to-km factor at the domain centroid."""
    c = domain.centroid
    lat_scale, lon_scale = degree_scales_km(c.lat, c.lon)
    return 0.5 * (lat_scale + lon_scale)


def contains(domain: Domain, p: GeoPoint, t: float) -> bool:
    return (domain.lon_min <= p.lon <= domain.lon_max
            and domain.lat_min <= p.lat <= domain.lat_max
            and domain.t_min <= t <= domain.t_max)


def contains_array(domain: Domain, lonlat) -> np.ndarray:
    """Boolean mask of rows of ``lonlat`` inside the closed spatial box."""
    lonlat = np.asarray(lonlat, dtype=float)
    return ((lonlat[..., 0] >= domain.lon_min) & (lonlat[..., 0] <= domain.lon_max)
            & (lonlat[..., 1] >= domain.lat_min) & (lonlat[..., 1] <= domain.lat_max))
