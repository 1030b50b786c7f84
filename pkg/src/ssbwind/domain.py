"""Core data model for two-component surface wind field reconstruction.

A Dataset is a collection of point observations of the (u, v) wind vector
(u = west-to-east, v = south-to-north, m/s) from two instrument sources
("satellite", which may carry an additive calibration bias, and "buoy",
which is treated as unbiased).  Sites live on a lon/lat rectangle and are
mapped to the unit square for all spatial modeling; raw coordinates are
kept alongside for output.

Also hosts the seeded RNG contract used across the package and the
synthetic data generator used by the test suite and the CLI.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

SOURCES = ("satellite", "buoy")


class ConfigError(ValueError):
    """Invalid configuration or parameter value (CLI exit code 2)."""


class NumericError(ArithmeticError):
    """Numerical failure: non-finite values, singular covariance, degenerate
    Monte Carlo estimates (CLI exit code 3)."""


class SchemaError(ValueError):
    """Malformed input data file (CLI exit code 4)."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class Site:
    """Observation location: raw lon/lat plus unit-square coordinates.

    s1/s2 are NaN until the parent dataset has been normalized.
    """

    lon: float
    lat: float
    s1: float = float("nan")
    s2: float = float("nan")


@dataclass(frozen=True)
class WindVector:
    u: float
    v: float


@dataclass(frozen=True)
class Observation:
    site: Site
    source: str
    wind: WindVector

    def __post_init__(self):
        if self.source not in SOURCES:
            raise SchemaError(
                f"unknown source {self.source!r}; expected one of {SOURCES}"
            )


@dataclass(frozen=True)
class Dataset:
    """Immutable observation set with its spatial domain and storm metadata.

    bounds = (lon0, lat0, lon1, lat1) with lon1 > lon0 and lat1 > lat0.
    """

    observations: tuple[Observation, ...]
    bounds: tuple[float, float, float, float]
    storm_center: tuple[float, float]
    storm_heading_deg: float = 0.0

    def __post_init__(self):
        validate_bounds(self.bounds)
        if len(self.observations) == 0:
            raise ConfigError("dataset must contain at least one observation")
        lon0, lat0, lon1, lat1 = self.bounds
        for i, obs in enumerate(self.observations):
            if not (lon0 <= obs.site.lon <= lon1 and lat0 <= obs.site.lat <= lat1):
                raise ConfigError(
                    f"observation {i} at ({obs.site.lon}, {obs.site.lat}) "
                    f"lies outside bounds {self.bounds}"
                )

    @property
    def n_obs(self) -> int:
        return len(self.observations)


def validate_bounds(bounds) -> None:
    if len(bounds) != 4:
        raise ConfigError(f"bounds must have 4 entries, got {len(bounds)}")
    lon0, lat0, lon1, lat1 = (float(x) for x in bounds)
    if not all(math.isfinite(x) for x in (lon0, lat0, lon1, lat1)):
        raise ConfigError(f"bounds must be finite, got {bounds}")
    if not (lon1 > lon0 and lat1 > lat0):
        raise ConfigError(f"degenerate bounds {bounds}: need lon1 > lon0, lat1 > lat0")


# ---------------------------------------------------------------------------
# seeded RNG contract


@dataclass(frozen=True)
class RngContract:
    """Deterministic RNG handle: (seed, stream_id) -> reproducible generator.

    Identical (seed, stream_id) pairs give bit-identical draw sequences;
    distinct stream_ids give independent streams safe for concurrent use.
    substream(*keys) derives further nested independent generators.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.PCG64(ss))

    def stream(self, stream_id: int) -> "RngContract":
        return RngContract(self.seed, stream_id)

    def substream(self, *keys: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *keys)
        )
        return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# domain normalization


def normalize_point(lon, lat, bounds):
    """Affine map lon/lat -> unit square. Accepts scalars or arrays."""
    lon0, lat0, lon1, lat1 = bounds
    return (np.asarray(lon) - lon0) / (lon1 - lon0), (np.asarray(lat) - lat0) / (
        lat1 - lat0
    )


def denormalize_point(s1, s2, bounds):
    """Inverse of normalize_point."""
    lon0, lat0, lon1, lat1 = bounds
    return lon0 + np.asarray(s1) * (lon1 - lon0), lat0 + np.asarray(s2) * (lat1 - lat0)


def normalize_domain(dataset: Dataset) -> Dataset:
    """Return a copy of the dataset with unit-square site coordinates filled in.

    Idempotent; raises ConfigError for degenerate bounds (checked at
    construction) and never moves raw coordinates.
    """
    obs = []
    for o in dataset.observations:
        s1, s2 = normalize_point(o.site.lon, o.site.lat, dataset.bounds)
        obs.append(
            dataclasses.replace(
                o, site=Site(o.site.lon, o.site.lat, float(s1), float(s2))
            )
        )
    return dataclasses.replace(dataset, observations=tuple(obs))


def observation_arrays(dataset: Dataset) -> dict:
    """Columnar view of a dataset as float arrays (copy)."""
    n = dataset.n_obs
    out = {
        "lon": np.empty(n),
        "lat": np.empty(n),
        "s1": np.empty(n),
        "s2": np.empty(n),
        "u": np.empty(n),
        "v": np.empty(n),
        "source": np.empty(n, dtype=np.int64),
    }
    for i, o in enumerate(dataset.observations):
        out["lon"][i] = o.site.lon
        out["lat"][i] = o.site.lat
        out["s1"][i] = o.site.s1
        out["s2"][i] = o.site.s2
        out["u"][i] = o.wind.u
        out["v"][i] = o.wind.v
        out["source"][i] = SOURCES.index(o.source)
    return out


# ---------------------------------------------------------------------------
# file formats
#
# Observations: CSV with header lon,lat,source,u,v; '#'-prefixed lines are
# skipped (used for provenance comments).  Metadata: JSON with keys bounds,
# storm_center, storm_heading_deg.


def save_observations(dataset: Dataset, csv_path, meta_path, header_comment=None):
    lines = []
    if header_comment:
        for hl in str(header_comment).splitlines():
            lines.append(f"# {hl}")
    lines.append("lon,lat,source,u,v")
    for o in dataset.observations:
        lines.append(
            f"{o.site.lon:.17g},{o.site.lat:.17g},{o.source},"
            f"{o.wind.u:.17g},{o.wind.v:.17g}"
        )
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    meta = {
        "bounds": list(dataset.bounds),
        "storm_center": list(dataset.storm_center),
        "storm_heading_deg": dataset.storm_heading_deg,
    }
    if header_comment:
        meta["_provenance"] = str(header_comment)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=1)
        fh.write("\n")


def _parse_float(text, line_no, name):
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"line {line_no}: field {name!r} is not a number: {text!r}")


def load_meta(meta_path) -> dict:
    with open(meta_path) as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"{meta_path}: invalid JSON: {e}")
    for key in ("bounds", "storm_center", "storm_heading_deg"):
        if key not in meta:
            raise SchemaError(f"{meta_path}: missing required key {key!r}")
    if len(meta["bounds"]) != 4:
        raise SchemaError(f"{meta_path}: bounds must have 4 entries")
    if len(meta["storm_center"]) != 2:
        raise SchemaError(f"{meta_path}: storm_center must have 2 entries")
    return meta


def load_observations(csv_path, meta_path) -> Dataset:
    """Read an observation CSV plus metadata JSON into a normalized Dataset.

    Strict: malformed rows, unknown sources, or missing metadata keys raise
    SchemaError naming the offending line.
    """
    meta = load_meta(meta_path)
    observations = []
    header_seen = False
    with open(csv_path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not header_seen:
                cols = [c.strip() for c in line.split(",")]
                if cols != ["lon", "lat", "source", "u", "v"]:
                    raise SchemaError(
                        f"line {line_no}: expected header 'lon,lat,source,u,v', "
                        f"got {line!r}"
                    )
                header_seen = True
                continue
            fields = line.split(",")
            if len(fields) != 5:
                raise SchemaError(
                    f"line {line_no}: expected 5 comma-separated fields, "
                    f"got {len(fields)}"
                )
            lon = _parse_float(fields[0], line_no, "lon")
            lat = _parse_float(fields[1], line_no, "lat")
            source = fields[2].strip()
            if source not in SOURCES:
                raise SchemaError(
                    f"line {line_no}: unknown source {source!r}; "
                    f"expected one of {SOURCES}"
                )
            u = _parse_float(fields[3], line_no, "u")
            v = _parse_float(fields[4], line_no, "v")
            if not (math.isfinite(lon) and math.isfinite(lat)):
                raise SchemaError(f"line {line_no}: non-finite coordinates")
            observations.append(Observation(Site(lon, lat), source, WindVector(u, v)))
    if not header_seen:
        raise SchemaError(f"{csv_path}: no header row found")
    if not observations:
        raise SchemaError(f"{csv_path}: no observation rows found")
    ds = Dataset(
        observations=tuple(observations),
        bounds=tuple(float(x) for x in meta["bounds"]),
        storm_center=tuple(float(x) for x in meta["storm_center"]),
        storm_heading_deg=float(meta["storm_heading_deg"]),
    )
    return normalize_domain(ds)


# ---------------------------------------------------------------------------
# synthetic data generation
#
# Truth = deterministic vortex profile + optional spatial residual field,
# observed through per-source additive bias and noise.  Residual kinds:
#   none        zero residual (observations are pure vortex + noise)
#   gaussian    stationary bivariate Gaussian process, exponential or
#               squared-exponential correlation
#   ssb         draw from the stick-breaking spatial prior (cluster offsets)
#   eye_patches piecewise-constant random offsets on angular-sector x
#               radial-band patches inside r < r_eye_km, zero outside; a
#               deliberately discontinuous, non-Gaussian core
#   composite   sum of the above, each part on an independent stream


@dataclass(frozen=True)
class NoResidual:
    kind: str = "none"


@dataclass(frozen=True)
class GaussianResidual:
    cov: tuple = ((4.0, 1.0), (1.0, 4.0))
    range_lam: float = 0.3
    corr: str = "expo"  # expo or sqexp correlation in normalized coordinates
    kind: str = "gaussian"


@dataclass(frozen=True)
class SsbResidual:
    kernel_family: str = "uniform"
    kernel_bandwidth: str = "expo"
    lam: float = 0.2
    m: int = 25
    a: float = 1.0
    b: float = 1.0
    cov: tuple = ((16.0, 2.0), (2.0, 16.0))
    kind: str = "ssb"


@dataclass(frozen=True)
class EyePatchResidual:
    r_eye_km: float = 110.0
    n_sectors: int = 4
    n_bands: int = 2
    amp_sd: float = 8.0
    kind: str = "eye_patches"


@dataclass(frozen=True)
class CompositeResidual:
    """Sum of independent residual fields, each drawn on its own stream."""

    parts: tuple = ()
    kind: str = "composite"


@dataclass(frozen=True)
class TruthConfig:
    """Synthetic scene description.

    The satellite instrument samples a regular grid_shape = (n_lon, n_lat)
    grid over the bounds; buoys sit at buoy_sites if given, else uniformly
    at random.  holland is a HollandParams instance (vortex profile and
    storm geometry).
    """

    holland: object
    bounds: tuple[float, float, float, float]
    grid_shape: tuple[int, int] = (14, 13)
    n_buoy: int = 7
    buoy_sites: tuple | None = None
    bias: tuple[float, float] = (0.0, 0.0)
    sat_noise_sd: tuple[float, float] = (1.0, 1.0)
    buoy_noise_sd: tuple[float, float] = (0.5, 0.5)
    residual: object = field(default_factory=NoResidual)

    def __post_init__(self):
        validate_bounds(self.bounds)
        nx, ny = self.grid_shape
        if nx < 1 or ny < 1:
            raise ConfigError(f"grid_shape must be >= 1 in each axis, got {self.grid_shape}")
        if self.n_buoy < 0:
            raise ConfigError("n_buoy must be >= 0")
        if min(self.sat_noise_sd) < 0 or min(self.buoy_noise_sd) < 0:
            raise ConfigError("noise standard deviations must be >= 0")


@dataclass(frozen=True)
class TrueField:
    """Generative ground truth aligned with the observation rows."""

    lon: np.ndarray
    lat: np.ndarray
    source: np.ndarray  # 0 = satellite, 1 = buoy
    vortex: np.ndarray  # (n, 2) deterministic profile components
    residual: np.ndarray  # (n, 2)
    latent: np.ndarray  # vortex + residual
    bias: tuple[float, float]
    sat_noise_sd: tuple[float, float]
    buoy_noise_sd: tuple[float, float]
    residual_kind: str
    params: dict

    def to_json_dict(self) -> dict:
        return {
            "sites": [
                {"lon": float(a), "lat": float(b)} for a, b in zip(self.lon, self.lat)
            ],
            "source": [SOURCES[i] for i in self.source],
            "latent_u": [float(x) for x in self.latent[:, 0]],
            "latent_v": [float(x) for x in self.latent[:, 1]],
            "vortex_u": [float(x) for x in self.vortex[:, 0]],
            "vortex_v": [float(x) for x in self.vortex[:, 1]],
            "residual_u": [float(x) for x in self.residual[:, 0]],
            "residual_v": [float(x) for x in self.residual[:, 1]],
            "bias": list(self.bias),
            "sat_noise_sd": list(self.sat_noise_sd),
            "buoy_noise_sd": list(self.buoy_noise_sd),
            "residual_kind": self.residual_kind,
            "params": self.params,
        }


def _draw_residual(cfg: TruthConfig, s_norm: np.ndarray, lon, lat, rng: RngContract):
    """Residual field draw at normalized sites s_norm (n, 2). Returns (n, 2)."""
    res = cfg.residual
    if res.kind == "composite":
        total = np.zeros((s_norm.shape[0], 2))
        infos = []
        for i, part in enumerate(res.parts):
            out, info = _draw_residual_part(part, cfg, s_norm, lon, lat, rng.substream(1, i))
            total += out
            infos.append({"kind": part.kind, **info})
        return total, {"parts": infos}
    return _draw_residual_part(res, cfg, s_norm, lon, lat, rng.substream(1))


def _draw_residual_part(res, cfg: TruthConfig, s_norm: np.ndarray, lon, lat, gen):
    n = s_norm.shape[0]
    if res.kind == "none":
        return np.zeros((n, 2)), {}
    if res.kind == "gaussian":
        d = np.linalg.norm(s_norm[:, None, :] - s_norm[None, :, :], axis=2)
        if res.corr == "sqexp":
            corr = np.exp(-0.5 * (d / res.range_lam) ** 2) + 1e-8 * np.eye(n)
        elif res.corr == "expo":
            corr = np.exp(-d / res.range_lam) + 1e-10 * np.eye(n)
        else:
            raise ConfigError(f"unknown gaussian residual corr {res.corr!r}")
        l_sp = np.linalg.cholesky(corr)
        l_cov = np.linalg.cholesky(np.asarray(res.cov))
        z = gen.standard_normal((n, 2))
        return l_sp @ z @ l_cov.T, {
            "cov": res.cov,
            "range_lam": res.range_lam,
            "corr": res.corr,
        }
    if res.kind == "ssb":
        from .kernels import KernelSpec
        from .ssb import SSBConfig, sample_prior, stick_weights

        spec = KernelSpec(res.kernel_family, res.kernel_bandwidth, res.lam)
        sconf = SSBConfig(m=res.m, kernel=spec, a=res.a, b=res.b)
        sticks = sample_prior(sconf, gen)
        w = stick_weights(sticks, spec, s_norm)
        u01 = gen.random((n, 1))
        labels = np.minimum((w.cumsum(axis=1) < u01).sum(axis=1), res.m - 1)
        l_cov = np.linalg.cholesky(np.asarray(res.cov))
        theta = gen.standard_normal((res.m, 2)) @ l_cov.T
        return theta[labels], {
            "kernel": dataclasses.asdict(spec),
            "m": res.m,
            "a": res.a,
            "b": res.b,
            "cov": res.cov,
            "labels": [int(g) for g in labels],
        }
    if res.kind == "eye_patches":
        from .holland import local_km_offsets

        dx, dy = local_km_offsets(cfg.holland, lon, lat)
        r = np.hypot(dx, dy)
        bearing = np.mod(np.arctan2(dx, dy), 2.0 * np.pi)
        sector = np.minimum(
            (bearing / (2.0 * np.pi / res.n_sectors)).astype(int), res.n_sectors - 1
        )
        band = np.minimum(
            (r / res.r_eye_km * res.n_bands).astype(int), res.n_bands - 1
        )
        pid = band * res.n_sectors + sector
        amp = gen.normal(0.0, res.amp_sd, size=(res.n_bands * res.n_sectors, 2))
        out = np.where((r < res.r_eye_km)[:, None], amp[pid], 0.0)
        return out, {
            "r_eye_km": res.r_eye_km,
            "n_sectors": res.n_sectors,
            "n_bands": res.n_bands,
            "amp_sd": res.amp_sd,
        }
    raise ConfigError(f"unknown residual kind {getattr(res, 'kind', res)!r}")


def generate_synthetic(cfg: TruthConfig, rng: RngContract):
    """Simulate (Dataset, TrueField) from a TruthConfig.

    Deterministic in the RngContract.  Observation order: satellite grid in
    lat-major order, then buoys.
    """
    from .holland import wind_components

    lon0, lat0, lon1, lat1 = cfg.bounds
    nx, ny = cfg.grid_shape
    glon, glat = np.meshgrid(
        np.linspace(lon0, lon1, nx), np.linspace(lat0, lat1, ny)
    )
    lon = glon.ravel()
    lat = glat.ravel()
    if cfg.buoy_sites is not None:
        bl = np.asarray(cfg.buoy_sites, dtype=float).reshape(-1, 2)
    else:
        gen_b = rng.substream(0)
        bl = np.column_stack(
            [gen_b.uniform(lon0, lon1, cfg.n_buoy), gen_b.uniform(lat0, lat1, cfg.n_buoy)]
        )
    lon = np.concatenate([lon, bl[:, 0]])
    lat = np.concatenate([lat, bl[:, 1]])
    n_sat = nx * ny
    source = np.concatenate(
        [np.zeros(n_sat, dtype=np.int64), np.ones(len(bl), dtype=np.int64)]
    )

    vortex = wind_components(cfg.holland, lon, lat)
    s1, s2 = normalize_point(lon, lat, cfg.bounds)
    residual, res_params = _draw_residual(
        cfg, np.column_stack([s1, s2]), lon, lat, rng
    )
    latent = vortex + residual

    gen_noise = rng.substream(3)
    z = gen_noise.standard_normal((len(lon), 2))
    sd = np.where(
        source[:, None] == 0,
        np.asarray(cfg.sat_noise_sd)[None, :],
        np.asarray(cfg.buoy_noise_sd)[None, :],
    )
    bias = np.where(source[:, None] == 0, np.asarray(cfg.bias)[None, :], 0.0)
    y = latent + bias + sd * z

    observations = tuple(
        Observation(
            Site(float(lon[i]), float(lat[i]), float(s1[i]), float(s2[i])),
            SOURCES[source[i]],
            WindVector(float(y[i, 0]), float(y[i, 1])),
        )
        for i in range(len(lon))
    )
    dataset = Dataset(
        observations=observations,
        bounds=tuple(float(x) for x in cfg.bounds),
        storm_center=tuple(float(x) for x in cfg.holland.center),
        storm_heading_deg=float(cfg.holland.heading_deg),
    )
    truth = TrueField(
        lon=lon,
        lat=lat,
        source=source,
        vortex=vortex,
        residual=residual,
        latent=latent,
        bias=cfg.bias,
        sat_noise_sd=cfg.sat_noise_sd,
        buoy_noise_sd=cfg.buoy_noise_sd,
        residual_kind=cfg.residual.kind,
        params={
            "holland": dataclasses.asdict(cfg.holland),
            "residual": res_params,
        },
    )
    return dataset, truth
