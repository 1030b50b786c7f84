"""Spatial kernels for the stick-breaking prior and their similarity ratio.

A kernel w(s; psi, eps) in [0, 1] measures closeness of site s to knot psi
with per-axis bandwidths eps = (eps1, eps2):

    uniform  prod_j 1(|s_j - psi_j| < eps_j / 2)
    sqexp    prod_j exp(-(s_j - psi_j)^2 / eps_j^2)

Bandwidths are either fixed functions of a range parameter lam or drawn
per component (independently per axis):

    (uniform, fixed)     eps_j = lam
    (uniform, expo)      eps_j ~ Exponential(mean lam)
    (sqexp,   fixed)     eps_j = lam / sqrt(2)
    (sqexp,   invgamma)  eps_j^2 ~ InvGamma(1.5, lam^2 / 2)

For two sites separated by delta the similarity ratio

    gamma = E[w(s) w(s')] / E[w(s)]

(knots uniform over the plane, bandwidths from their prior) has the closed
forms implemented in gamma_closed_form; gamma_monte_carlo estimates the
same quantity by simulation over a finite knot box, giving an independent
check of the algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .domain import ConfigError, NumericError, RngContract

_VALID = {
    ("uniform", "fixed"),
    ("uniform", "expo"),
    ("sqexp", "fixed"),
    ("sqexp", "invgamma"),
}


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngContract):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise ConfigError(f"expected RngContract or numpy Generator, got {type(rng)!r}")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family ("uniform" | "sqexp"), bandwidth model
    ("fixed" | "expo" | "invgamma"), and range parameter lam > 0."""

    family: str
    bandwidth: str
    lam: float

    def __post_init__(self):
        if (self.family, self.bandwidth) not in _VALID:
            raise ConfigError(
                f"unsupported kernel combination "
                f"({self.family!r}, {self.bandwidth!r}); valid: {sorted(_VALID)}"
            )
        if not (self.lam > 0 and np.isfinite(self.lam)):
            raise ConfigError(f"kernel lam must be positive and finite, got {self.lam}")


def fixed_bandwidth(spec: KernelSpec, lam: float | None = None) -> float:
    """Deterministic per-axis bandwidth for fixed-bandwidth specs."""
    lam = spec.lam if lam is None else lam
    if spec.family == "uniform":
        return lam
    return lam / np.sqrt(2.0)


def draw_bandwidths(spec: KernelSpec, m: int, rng, lam: float | None = None) -> np.ndarray:
    """(m, 2) per-axis bandwidths: constant for fixed specs, sampled otherwise."""
    lam = spec.lam if lam is None else lam
    if spec.bandwidth == "fixed":
        return np.full((m, 2), fixed_bandwidth(spec, lam))
    gen = as_generator(rng)
    if spec.bandwidth == "expo":
        return gen.exponential(scale=lam, size=(m, 2))
    # invgamma on the squared bandwidth: shape 1.5, scale lam^2 / 2
    d = (lam * lam / 2.0) / gen.gamma(1.5, 1.0, size=(m, 2))
    return np.sqrt(d)


def bandwidth_log_prior(spec: KernelSpec, eps: np.ndarray, lam: float) -> float:
    """Log prior density of the sampled bandwidths given lam (0 for fixed)."""
    if spec.bandwidth == "fixed":
        return 0.0
    e = np.asarray(eps, dtype=float)
    if np.any(e <= 0):
        return -np.inf
    if spec.bandwidth == "expo":
        return float(np.sum(-np.log(lam) - e / lam))
    from scipy.special import gammaln

    b = lam * lam / 2.0
    d = e * e
    # density of eps^2 at d: b^1.5 d^-2.5 e^{-b/d} / Gamma(1.5)
    return float(np.sum(1.5 * np.log(b) - 2.5 * np.log(d) - b / d - gammaln(1.5)))


def kernel_values(spec: KernelSpec, knots: np.ndarray, eps: np.ndarray, sites: np.ndarray) -> np.ndarray:
    """Kernel matrix (n_sites, m) for knots (m, 2), bandwidths (m, 2)."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    d = np.abs(sites[:, None, :] - knots[None, :, :])
    if spec.family == "uniform":
        return np.where((d < eps[None, :, :] / 2.0).all(axis=2), 1.0, 0.0)
    return np.exp(-np.sum((d / eps[None, :, :]) ** 2, axis=2))


def gamma_closed_form(spec: KernelSpec, delta) -> float:
    """Similarity ratio gamma for a separation delta = (d1, d2).

    uniform/fixed    prod_j (1 - |d_j| / lam)+
    uniform/expo     exp(-(|d1| + |d2|) / lam)
    sqexp/fixed      0.5 exp(-(d1^2 + d2^2) / lam^2)
    sqexp/invgamma   0.5 prod_j (1 + d_j^2 / lam^2)^-1
    """
    d = np.abs(np.asarray(delta, dtype=float))
    lam = spec.lam
    if spec.family == "uniform":
        if spec.bandwidth == "fixed":
            return float(np.prod(np.clip(1.0 - d / lam, 0.0, None)))
        return float(np.exp(-np.sum(d) / lam))
    if spec.bandwidth == "fixed":
        return float(0.5 * np.exp(-np.sum(d * d) / (lam * lam)))
    return float(0.5 * np.prod(1.0 / (1.0 + (d / lam) ** 2)))


@dataclass(frozen=True)
class GammaEstimate:
    """Monte Carlo estimate of the similarity ratio with standard errors."""

    estimate: float
    std_error: float
    c1: float
    c1_se: float
    c2: float
    c2_se: float
    n_draws: int


def default_knot_box(spec: KernelSpec):
    """Unit square padded by three bandwidth scales per side, so that
    interior-pair kernel mass integrals match their whole-plane values."""
    pad = 3.0 * spec.lam
    return ((-pad, 1.0 + pad), (-pad, 1.0 + pad))


def gamma_monte_carlo(
    spec: KernelSpec,
    site_a,
    site_b,
    n_draws: int,
    rng,
    knot_box=None,
) -> GammaEstimate:
    """Estimate gamma = E[w(s) w(s')] / E[w] by simulating knots/bandwidths.

    Knots are uniform over knot_box (default: padded unit square); the same
    draws evaluate both sites, and the ratio uses the pooled kernel mass so
    the estimator is symmetric in the two sites.  Raises NumericError when
    the kernel mass estimate is zero (no knot draw touched either site).
    """
    if n_draws < 100:
        raise ConfigError(f"n_draws must be >= 100, got {n_draws}")
    gen = as_generator(rng)
    box = default_knot_box(spec) if knot_box is None else knot_box
    (lo1, hi1), (lo2, hi2) = box
    psi = np.column_stack(
        [gen.uniform(lo1, hi1, n_draws), gen.uniform(lo2, hi2, n_draws)]
    )
    eps = draw_bandwidths(spec, n_draws, gen)
    sa = np.asarray(site_a, dtype=float)
    sb = np.asarray(site_b, dtype=float)
    da = np.abs(sa[None, :] - psi)
    db = np.abs(sb[None, :] - psi)
    if spec.family == "uniform":
        w1 = np.where((da < eps / 2.0).all(axis=1), 1.0, 0.0)
        w2 = np.where((db < eps / 2.0).all(axis=1), 1.0, 0.0)
    else:
        w1 = np.exp(-np.sum((da / eps) ** 2, axis=1))
        w2 = np.exp(-np.sum((db / eps) ** 2, axis=1))
    x = w1 * w2
    y = 0.5 * (w1 + w2)
    c2 = float(x.mean())
    c1 = float(y.mean())
    c1_se = float(y.std(ddof=1) / np.sqrt(n_draws))
    c2_se = float(x.std(ddof=1) / np.sqrt(n_draws))
    if c1 <= 0.0:
        raise NumericError(
            "kernel mass estimate is zero: no knot draw produced positive "
            "kernel weight at the sites (bandwidths too small for the box?)"
        )
    g = c2 / c1
    # delta-method SE for the ratio of correlated means
    vx = x.var(ddof=1)
    vy = y.var(ddof=1)
    cxy = np.cov(x, y, ddof=1)[0, 1]
    var_g = (vx - 2.0 * g * cxy + g * g * vy) / (c1 * c1 * n_draws)
    se = float(np.sqrt(max(var_g, 0.0)))
    return GammaEstimate(
        estimate=float(g),
        std_error=se,
        c1=c1,
        c1_se=c1_se,
        c2=c2,
        c2_se=c2_se,
        n_draws=n_draws,
    )
