"""Shared builders for the test suite."""

import numpy as np
import pytest

from ssbwind.domain import Dataset, Observation, Site, WindVector, normalize_domain

BOUNDS = (-74.0, 24.0, -70.0, 28.0)
CENTER = (-72.0, 26.0)


def make_dataset(lons, lats, sources, u, v, bounds=BOUNDS, center=CENTER):
    obs = tuple(
        Observation(Site(lo, la), src, WindVector(uu, vv))
        for lo, la, src, uu, vv in zip(lons, lats, sources, u, v)
    )
    return normalize_domain(
        Dataset(observations=obs, bounds=bounds, storm_center=center)
    )


@pytest.fixture
def small_dataset():
    """Nine observations, two sources, fixed values."""
    g = np.linspace(-73.5, -70.5, 3)
    lon, lat = np.meshgrid(g, np.linspace(24.5, 27.5, 3))
    lon, lat = lon.ravel(), lat.ravel()
    sources = ["satellite"] * 6 + ["buoy"] * 3
    u = np.linspace(-20.0, 20.0, 9)
    v = np.linspace(15.0, -15.0, 9)
    return make_dataset(lon, lat, sources, u, v)
