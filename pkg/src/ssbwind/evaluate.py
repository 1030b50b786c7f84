"""Scoring and comparison utilities: predictive squared error, holdout
splits at the scalar-component level, interval coverage, residual maps.

The predictive score for a fitted model is the posterior-expected squared
difference between each observed scalar and its posterior predictive
replicate (bias and noise included), averaged over draws; emspe reports
both the total over scalars and the per-scalar mean (scale-free for
comparisons across models on the same data).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from .domain import ConfigError, Dataset, Observation, RngContract, WindVector
from .kernels import as_generator

COMPONENT_NAMES = ("u", "v")


@dataclass(frozen=True)
class EmspeResult:
    total: float
    per_scalar: float
    n_scalars: int


def emspe(y, mask, replicates) -> EmspeResult:
    """Posterior-expected squared prediction error against replicates.

    y (n_obs, d), mask (n_obs, d) marking observed scalars, replicates
    (n_draws, n_obs, d).  Monotone in the replicate noise level: inflating
    predictive noise strictly increases the score on fixed data.
    """
    y = np.asarray(y, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    reps = np.asarray(replicates, dtype=float)
    if reps.ndim != 3 or reps.shape[1:] != y.shape:
        raise ConfigError(
            f"replicates shape {reps.shape} does not match observations {y.shape}"
        )
    n_scalars = int(mask.sum())
    if n_scalars == 0:
        raise ConfigError("no observed scalars to score")
    sq = np.where(mask[None, :, :], (np.where(mask, y, 0.0)[None] - reps) ** 2, 0.0)
    total = float(sq.sum(axis=(1, 2)).mean())
    return EmspeResult(total=total, per_scalar=total / n_scalars, n_scalars=n_scalars)


@dataclass(frozen=True)
class HeldoutScalar:
    obs_index: int
    component: int  # 0 = u, 1 = v
    source: str
    lon: float
    lat: float
    value: float


def holdout_split(dataset: Dataset, fraction: float, rng) -> tuple[Dataset, tuple]:
    """Split out a fraction of the observed scalar components.

    Returns (train, held): train is the dataset with the held components
    replaced by NaN (observations and sites untouched otherwise); held
    records the removed scalars.  The union of train's finite scalars and
    held equals the original finite scalars, and the two are disjoint.
    """
    if not (0.0 < fraction < 1.0):
        raise ConfigError(f"holdout fraction must be in (0, 1), got {fraction}")
    gen = as_generator(rng)
    pairs = []
    for i, obs in enumerate(dataset.observations):
        if np.isfinite(obs.wind.u):
            pairs.append((i, 0))
        if np.isfinite(obs.wind.v):
            pairs.append((i, 1))
    k = int(round(fraction * len(pairs)))
    if k < 1:
        raise ConfigError(
            f"holdout fraction {fraction} selects no scalars out of {len(pairs)}"
        )
    order = gen.permutation(len(pairs))
    chosen = {tuple(pairs[j]) for j in order[:k]}
    held = []
    new_obs = list(dataset.observations)
    for i, c in sorted(chosen):
        obs = new_obs[i]
        value = obs.wind.u if c == 0 else obs.wind.v
        held.append(
            HeldoutScalar(
                obs_index=i,
                component=c,
                source=obs.source,
                lon=obs.site.lon,
                lat=obs.site.lat,
                value=float(value),
            )
        )
        wind = (
            WindVector(float("nan"), obs.wind.v)
            if c == 0
            else WindVector(obs.wind.u, float("nan"))
        )
        new_obs[i] = dataclasses.replace(obs, wind=wind)
    train = dataclasses.replace(dataset, observations=tuple(new_obs))
    return train, tuple(held)


def interval_coverage(held, lo, hi) -> dict:
    """Per-component hit counts of held-out scalars inside [lo, hi].

    lo/hi are aligned with the held tuple.  Returns
    {"u": (hits, total), "v": (hits, total), "overall": (hits, total)}.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if len(lo) != len(held) or len(hi) != len(held):
        raise ConfigError("interval arrays must align with held scalars")
    out = {}
    hits_all = 0
    for c, name in enumerate(COMPONENT_NAMES):
        idx = [k for k, h in enumerate(held) if h.component == c]
        hits = sum(
            1 for k in idx if lo[k] <= held[k].value <= hi[k]
        )
        out[name] = (hits, len(idx))
        hits_all += hits
    out["overall"] = (hits_all, len(held))
    return out


def residual_rows(dataset: Dataset, post_mean) -> list:
    """(lon, lat, component, sq_residual) rows for observed scalars."""
    post_mean = np.asarray(post_mean, dtype=float)
    rows = []
    for i, obs in enumerate(dataset.observations):
        for c, name in enumerate(COMPONENT_NAMES):
            val = obs.wind.u if c == 0 else obs.wind.v
            if np.isfinite(val):
                rows.append(
                    (
                        obs.site.lon,
                        obs.site.lat,
                        name,
                        float((val - post_mean[i, c]) ** 2),
                    )
                )
    return rows


def write_residual_csv(path, rows, provenance: str | None = None):
    with open(path, "w") as fh:
        if provenance:
            fh.write(f"# {provenance}\n")
        fh.write("lon,lat,component,sq_residual\n")
        for lon, lat, comp, sq in rows:
            fh.write(f"{lon:.17g},{lat:.17g},{comp},{sq:.17g}\n")


@dataclass(frozen=True)
class CompareReport:
    """Side-by-side predictive scores (and optional holdout coverage)."""

    emspe: dict  # model name -> EmspeResult
    coverage: dict | None = None
    notes: dict | None = None

    def ranking(self) -> list:
        return sorted(self.emspe, key=lambda k: self.emspe[k].per_scalar)

    def to_json_dict(self) -> dict:
        out = {
            "emspe": {
                k: dataclasses.asdict(v) for k, v in self.emspe.items()
            },
            "ranking": self.ranking(),
        }
        if self.coverage is not None:
            out["coverage"] = self.coverage
        if self.notes is not None:
            out["notes"] = self.notes
        return out

    def save(self, path, provenance: str | None = None):
        doc = self.to_json_dict()
        if provenance:
            doc["_provenance"] = provenance
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
