"""Spatio-temporal Dirichlet process Gaussian mixtures for case point patterns."""

__version__ = "0.1.0"

from .geo import Domain, GeoPoint, haversine_km, km_per_degree
from .model import ClusterCenters, RangeParams, StickState, stick_weights
from .sampler import ChainState, SamplerConfig, Trace, run_chain, summarize
from .rolling import WindowPrior, build_prior, init_window_state, run_rolling

__all__ = [
    "ChainState", "ClusterCenters", "Domain", "GeoPoint", "RangeParams", "SamplerConfig",
    "StickState", "Trace", "WindowPrior", "build_prior", "haversine_km", "init_window_state",
    "km_per_degree", "run_chain", "run_rolling", "stick_weights", "summarize",
]
