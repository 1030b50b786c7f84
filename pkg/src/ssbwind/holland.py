"""Parametric gradient-wind vortex profile and its (u, v) decomposition.

Wind speed at distance r km from the storm center:

    H(r) = sqrt( (B / rho) * (Rmax / r)^B * dP * exp(-(Rmax / r)^B) )

with dP the central pressure deficit in Pa (inputs are millibar and are
converted internally), rho air density (kg/m^3), Rmax the radius of
maximum wind (km), and B the profile shape parameter.  H peaks exactly at
r = Rmax and tends to zero both at the center and far field.

Components use the compass bearing phi of the wind vector,

    u = H sin(phi),   v = H cos(phi),

where at a site with bearing beta from the center (clockwise from north)
the wind points along the counterclockwise tangent, rotated toward the
center by a fixed inflow angle:

    phi = beta - 90 deg - inflow_offset_deg.

Distances come from a local equirectangular projection anchored at the
storm center (adequate at storm scale; documented convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ConfigError

EARTH_RADIUS_KM = 6371.0
KM_PER_DEG = np.pi * EARTH_RADIUS_KM / 180.0
MB_TO_PA = 100.0


@dataclass(frozen=True)
class HollandParams:
    """Vortex profile parameters and storm geometry.

    Pressures in millibar, Rmax_km in kilometers, center = (lon, lat).
    heading_deg is the storm translation bearing (kept as metadata; the
    symmetric profile itself does not use it).
    """

    Pn_mb: float = 1010.0
    Pc_mb: float = 939.0
    rho: float = 1.2
    Rmax_km: float = 49.0
    B: float = 1.9
    center: tuple[float, float] = (0.0, 0.0)
    heading_deg: float = 0.0
    inflow_offset_deg: float = 0.0

    def __post_init__(self):
        if self.Pn_mb < self.Pc_mb:
            raise ConfigError(
                f"ambient pressure {self.Pn_mb} mb below central {self.Pc_mb} mb"
            )
        if self.rho <= 0:
            raise ConfigError(f"air density must be positive, got {self.rho}")
        if self.Rmax_km <= 0:
            raise ConfigError(f"Rmax_km must be positive, got {self.Rmax_km}")
        if self.B <= 0:
            raise ConfigError(f"shape parameter B must be positive, got {self.B}")


def local_km_offsets(params: HollandParams, lon, lat):
    """East/north displacements (km) from the storm center.

    Equirectangular: one degree of longitude is scaled by cos(center
    latitude), so the metric is fixed per storm.
    """
    lon_c, lat_c = params.center
    dx = (np.asarray(lon, dtype=float) - lon_c) * KM_PER_DEG * np.cos(
        np.deg2rad(lat_c)
    )
    dy = (np.asarray(lat, dtype=float) - lat_c) * KM_PER_DEG
    return dx, dy


def radius_km(params: HollandParams, lon, lat):
    dx, dy = local_km_offsets(params, lon, lat)
    return np.hypot(dx, dy)


def speed_at_radius(params: HollandParams, r_km):
    """Wind speed (m/s) at radial distance r_km; zero at r = 0 and r -> inf."""
    r = np.asarray(r_km, dtype=float)
    dp = (params.Pn_mb - params.Pc_mb) * MB_TO_PA
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        x = (params.Rmax_km / r) ** params.B
        t = x * np.exp(-x)
        t = np.where(np.isfinite(x), t, 0.0)  # r == 0 -> x = inf -> zero wind
    return np.sqrt((params.B / params.rho) * dp * t)


def vmax(params: HollandParams) -> float:
    """Peak wind speed, attained at r = Rmax."""
    dp = (params.Pn_mb - params.Pc_mb) * MB_TO_PA
    return float(np.sqrt(params.B * dp / (params.rho * np.e)))


def inflow_angle(params: HollandParams, lon, lat):
    """Compass bearing phi (radians, [0, 2pi)) of the wind vector.

    Counterclockwise circulation: a site at bearing beta from the center
    gets phi = beta - pi/2 - inflow_offset.  At the center (r = 0) the
    bearing is undefined; phi is reported as 0 there (the speed is zero so
    the components are unaffected).
    """
    dx, dy = local_km_offsets(params, lon, lat)
    beta = np.arctan2(dx, dy)
    phi = beta - 0.5 * np.pi - np.deg2rad(params.inflow_offset_deg)
    phi = np.mod(phi, 2.0 * np.pi)
    return np.where((dx == 0) & (dy == 0), 0.0, phi)


def wind_components(params: HollandParams, lon, lat) -> np.ndarray:
    """(n, 2) array of (u, v) profile components at the given sites.

    Identity: hypot(u, v) == speed(r) to rounding.
    """
    r = radius_km(params, lon, lat)
    h = speed_at_radius(params, r)
    phi = inflow_angle(params, lon, lat)
    return np.column_stack([h * np.sin(phi), h * np.cos(phi)])


def field_at(params: HollandParams, lon, lat) -> np.ndarray:
    """Alias for wind_components, matching the offset-field role in fitting."""
    return wind_components(params, lon, lat)
