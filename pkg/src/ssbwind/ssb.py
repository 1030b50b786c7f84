"""Spatial stick-breaking prior: location-dependent mixture probabilities.

Component j has a stick fraction V_j ~ Beta(a, b), a knot psi_j, and
bandwidths eps_j.  At site s the mixture mass of component j is

    p_j(s) = w_j(s) V_j * prod_{k<j} (1 - w_k(s) V_k),

with w_j the kernel of kernels.KernelSpec.  The truncation at m components
pins the terminal stick: V_m = 1 and w_m = 1, so the masses sum to one
exactly and component m absorbs whatever mass the first m-1 components
leave behind.  Site labels are independent draws g(s) ~ Categorical(p(s)),
and the field value at s is the label's location theta_{g(s)}; marginally
the field is centered, with variance tau^2 and a covariance driven by the
probability that two sites share a label.

Closed forms implemented here (and checked by Monte Carlo in the tests):

    E[p-coincidence]   = gamma*vt2 / (2*vt1 - gamma*vt2)   (m -> inf)
    Cov(y(s), y(s'))   = tau^2 * gamma / (2(a+b+1)/(a+1) - gamma)
    Var(y(s))          = sigma^2 + tau^2
    E[terminal mass]   -> choose_m picks the smallest truncation level
                          whose prior-expected terminal mass is below a
                          threshold on a site grid.

with vt1 = E(V) = a/(a+b), vt2 = E(V^2)... = a(a+1)/[(a+b)(a+b+1)], and
gamma the kernel similarity ratio of kernels.gamma_closed_form.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .domain import ConfigError, NumericError, RngContract
from .kernels import KernelSpec, as_generator, draw_bandwidths, kernel_values

KNOT_BETA_SHAPE = 1.5


@dataclass(frozen=True)
class SSBConfig:
    """Truncation level m, kernel spec, stick Beta(a, b) shape, knot prior."""

    m: int
    kernel: KernelSpec
    a: float = 1.0
    b: float = 1.0
    knot_prior: str = "uniform"  # "uniform" | "beta" (Beta(1.5, 1.5) per axis)

    def __post_init__(self):
        if not (isinstance(self.m, (int, np.integer)) and self.m >= 1):
            raise ConfigError(f"truncation level m must be an integer >= 1, got {self.m}")
        for name, val in (("a", self.a), ("b", self.b)):
            if not (0.0 < val <= 10.0):
                raise ConfigError(f"stick shape {name} must be in (0, 10], got {val}")
        if self.knot_prior not in ("uniform", "beta"):
            raise ConfigError(f"knot_prior must be 'uniform' or 'beta', got {self.knot_prior!r}")


@dataclass(frozen=True)
class StickSet:
    """Immutable snapshot of one draw of the prior: sticks (v), knots, and
    per-axis bandwidths (eps).  v[-1] == 1 (pinned terminal component)."""

    v: np.ndarray  # (m,)
    knots: np.ndarray  # (m, 2)
    eps: np.ndarray  # (m, 2)

    @property
    def m(self) -> int:
        return len(self.v)


def draw_knots(config: SSBConfig, m: int, gen, knot_box=None) -> np.ndarray:
    if knot_box is not None:
        (lo1, hi1), (lo2, hi2) = knot_box
        return np.column_stack(
            [gen.uniform(lo1, hi1, m), gen.uniform(lo2, hi2, m)]
        )
    if config.knot_prior == "beta":
        return gen.beta(KNOT_BETA_SHAPE, KNOT_BETA_SHAPE, size=(m, 2))
    return gen.uniform(0.0, 1.0, size=(m, 2))


def sample_prior(config: SSBConfig, rng, knot_box=None) -> StickSet:
    """One prior draw.  Draw order (v, knots, eps) is part of the seeded
    reproducibility contract."""
    gen = as_generator(rng)
    v = gen.beta(config.a, config.b, size=config.m)
    v[-1] = 1.0
    knots = draw_knots(config, config.m, gen, knot_box)
    eps = draw_bandwidths(config.kernel, config.m, gen)
    return StickSet(v=v, knots=knots, eps=eps)


def stick_weights(sticks: StickSet, spec: KernelSpec, sites) -> np.ndarray:
    """Mixture mass matrix (n_sites, m); rows are simplex vectors.

    The terminal column uses kernel value 1 (remainder component), so rows
    sum to one exactly up to rounding.
    """
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    kw = kernel_values(spec, sticks.knots, sticks.eps, sites)
    kw[:, -1] = 1.0
    f = kw * sticks.v[None, :]
    q = np.cumprod(1.0 - f, axis=1)
    p = np.empty_like(f)
    p[:, 0] = f[:, 0]
    p[:, 1:] = f[:, 1:] * q[:, :-1]
    return p


def tessellation_assign(sticks: StickSet, spec: KernelSpec, sites) -> np.ndarray:
    """Deterministic single-surface variant: site -> argmax_j p_j(s),
    ties resolved to the lowest index."""
    return np.argmax(stick_weights(sticks, spec, sites), axis=1)


# ---------------------------------------------------------------------------
# batch prior simulation


def _batch_sticks(config: SSBConfig, gen, n: int, knot_box=None):
    """Vectorized prior draws: v (n, m), knots (n, m, 2), eps (n, m, 2)."""
    m = config.m
    v = gen.beta(config.a, config.b, size=(n, m))
    v[:, -1] = 1.0
    if knot_box is not None:
        (lo1, hi1), (lo2, hi2) = knot_box
        knots = np.stack(
            [gen.uniform(lo1, hi1, (n, m)), gen.uniform(lo2, hi2, (n, m))], axis=2
        )
    elif config.knot_prior == "beta":
        knots = gen.beta(KNOT_BETA_SHAPE, KNOT_BETA_SHAPE, size=(n, m, 2))
    else:
        knots = gen.uniform(0.0, 1.0, size=(n, m, 2))
    spec = config.kernel
    if spec.bandwidth == "fixed":
        from .kernels import fixed_bandwidth

        eps = np.full((n, m, 2), fixed_bandwidth(spec))
    elif spec.bandwidth == "expo":
        eps = gen.exponential(scale=spec.lam, size=(n, m, 2))
    else:
        eps = np.sqrt((spec.lam**2 / 2.0) / gen.gamma(1.5, 1.0, size=(n, m, 2)))
    return v, knots, eps


def _batch_weights(config: SSBConfig, v, knots, eps, sites):
    """Mixture masses (n_draws, n_sites, m) for batch stick draws."""
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    d = np.abs(sites[None, :, None, :] - knots[:, None, :, :])
    if config.kernel.family == "uniform":
        kw = np.where((d < eps[:, None, :, :] / 2.0).all(axis=3), 1.0, 0.0)
    else:
        kw = np.exp(-np.sum((d / eps[:, None, :, :]) ** 2, axis=3))
    kw[:, :, -1] = 1.0
    f = kw * v[:, None, :]
    q = np.cumprod(1.0 - f, axis=2)
    p = np.empty_like(f)
    p[:, :, 0] = f[:, :, 0]
    p[:, :, 1:] = f[:, :, 1:] * q[:, :, :-1]
    return p


def _chunk_size(n_sites: int, m: int, budget: float = 8e6) -> int:
    return max(1, int(budget / max(n_sites * m, 1)))


def truncation_mass(config: SSBConfig, sites, n_draws: int, rng) -> np.ndarray:
    """Prior-expected terminal mass E[p_m(s)] per site, by Monte Carlo."""
    gen = as_generator(rng)
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    n_sites = sites.shape[0]
    total = np.zeros(n_sites)
    done = 0
    chunk = _chunk_size(n_sites, config.m)
    while done < n_draws:
        c = min(chunk, n_draws - done)
        v, knots, eps = _batch_sticks(config, gen, c)
        p = _batch_weights(config, v, knots, eps, sites)
        total += p[:, :, -1].sum(axis=0)
        done += c
    return total / n_draws


def choose_m(
    config_template: SSBConfig,
    sites,
    threshold: float,
    rng: RngContract,
    n_draws: int = 2000,
    m_max: int = 512,
) -> int:
    """Smallest truncation level whose worst-site expected terminal mass is
    <= threshold, found by doubling then bisection.

    Each candidate m is evaluated with its own derived substream so the
    search is deterministic and repeat evaluations agree.  Raises
    ConfigError when even m_max cannot meet the threshold.
    """
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must be in (0, 1], got {threshold}")
    if not isinstance(rng, RngContract):
        raise ConfigError("choose_m requires an RngContract for determinism")

    def worst(m: int) -> float:
        cfg = dataclasses.replace(config_template, m=m)
        mass = truncation_mass(cfg, sites, n_draws, rng.substream(m))
        return float(mass.max())

    if worst(1) <= threshold:
        return 1
    lo = 1
    hi = 2
    while hi <= m_max and worst(hi) > threshold:
        lo = hi
        hi *= 2
    if hi > m_max:
        if worst(m_max) > threshold:
            raise ConfigError(
                f"terminal mass threshold {threshold} not attainable within "
                f"m_max = {m_max}"
            )
        hi = m_max
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if worst(mid) <= threshold:
            hi = mid
        else:
            lo = mid
    return hi


def propriety_check(
    spec: KernelSpec, sites, a: float, b: float, n_draws: int, rng
) -> bool:
    """The prior defines a valid mixing distribution iff E(V) > 0 and the
    expected kernel mass E[w(s)] is positive at every site; the latter is
    estimated by Monte Carlo over (knot, bandwidth) draws."""
    if not (a > 0.0 and np.isfinite(a) and b > 0.0 and np.isfinite(b)):
        return False
    gen = as_generator(rng)
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    psi = gen.uniform(0.0, 1.0, size=(n_draws, 2))
    eps = draw_bandwidths(spec, n_draws, gen)
    d = np.abs(sites[:, None, :] - psi[None, :, :])
    if spec.family == "uniform":
        w = np.where((d < eps[None, :, :] / 2.0).all(axis=2), 1.0, 0.0)
    else:
        w = np.exp(-np.sum((d / eps[None, :, :]) ** 2, axis=2))
    return bool(w.mean(axis=1).min() > 0.0)


# ---------------------------------------------------------------------------
# moments


def stick_moments(a: float, b: float) -> tuple[float, float]:
    """(E[V], E[V^2]) for V ~ Beta(a, b)."""
    vt1 = a / (a + b)
    vt2 = a * (a + 1.0) / ((a + b) * (a + b + 1.0))
    return vt1, vt2


def coincidence_prob(a: float, b: float, gamma: float) -> float:
    """Probability two sites with kernel similarity gamma share a label
    (untruncated prior)."""
    vt1, vt2 = stick_moments(a, b)
    return gamma * vt2 / (2.0 * vt1 - gamma * vt2)


def coincidence_prob_truncated(
    a: float, b: float, c1: float, c2: float, m: int
) -> float:
    """Same-label probability under truncation at m with pinned terminal
    stick, in terms of the kernel mass moments c1 = E[w(s)] and
    c2 = E[w(s) w(s')] (geometric series plus the terminal term)."""
    if m == 1:
        return 1.0
    vt1, vt2 = stick_moments(a, b)
    r = 1.0 - 2.0 * c1 * vt1 + c2 * vt2
    return c2 * vt2 * (1.0 - r ** (m - 1)) / (1.0 - r) + r ** (m - 1)


@dataclass(frozen=True)
class MarginalMoments:
    var: float
    cov: float


def marginal_moments(
    a: float, b: float, tau_sq: float, sigma_sq: float, gamma: float
) -> MarginalMoments:
    """Marginal observation variance and cross-site covariance.

    Var(y) = sigma^2 + tau^2; Cov(y(s), y(s')) = tau^2 * gamma /
    (2(a+b+1)/(a+1) - gamma).  Requires gamma in [0, 1].
    """
    if not (0.0 <= gamma <= 1.0):
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}")
    if tau_sq < 0 or sigma_sq < 0:
        raise ConfigError("variances must be nonnegative")
    cov = tau_sq * gamma / (2.0 * (a + b + 1.0) / (a + 1.0) - gamma)
    return MarginalMoments(var=sigma_sq + tau_sq, cov=cov)


def conditional_covariance(
    sticks: StickSet, spec: KernelSpec, loc_cov, site_a, site_b
) -> np.ndarray:
    """Cov of the field at two sites given the sticks: loc_cov times the
    conditional same-label probability sum_j p_j(s) p_j(s')."""
    pa = stick_weights(sticks, spec, np.atleast_2d(site_a))[0]
    pb = stick_weights(sticks, spec, np.atleast_2d(site_b))[0]
    q = float(np.dot(pa, pb))
    return q * np.atleast_2d(np.asarray(loc_cov, dtype=float))


# ---------------------------------------------------------------------------
# prior predictive simulation


def simulate_prior_field(
    config: SSBConfig,
    sites,
    loc_cov,
    n_draws: int,
    rng,
    knot_box=None,
    noise_vars=None,
) -> np.ndarray:
    """Draws (n_draws, n_sites, d) of the latent field (plus observation
    noise when noise_vars, a length-d vector of variances, is given).

    Each draw: sticks from the prior (knots over knot_box when supplied),
    independent site labels, locations theta_j ~ N(0, loc_cov).
    """
    gen = as_generator(rng)
    sites = np.atleast_2d(np.asarray(sites, dtype=float))
    n_sites = sites.shape[0]
    loc_cov = np.atleast_2d(np.asarray(loc_cov, dtype=float))
    d = loc_cov.shape[0]
    l_cov = np.linalg.cholesky(loc_cov)
    out = np.empty((n_draws, n_sites, d))
    chunk = _chunk_size(n_sites, config.m)
    done = 0
    while done < n_draws:
        c = min(chunk, n_draws - done)
        v, knots, eps = _batch_sticks(config, gen, c, knot_box)
        p = _batch_weights(config, v, knots, eps, sites)
        u01 = gen.random((c, n_sites, 1))
        labels = np.minimum(
            (np.cumsum(p, axis=2) < u01).sum(axis=2), config.m - 1
        )
        theta = gen.standard_normal((c, config.m, d)) @ l_cov.T
        flat = theta.reshape(c * config.m, d)
        idx = labels + config.m * np.arange(c)[:, None]
        vals = flat[idx]
        if noise_vars is not None:
            sd = np.sqrt(np.asarray(noise_vars, dtype=float))
            vals = vals + gen.standard_normal((c, n_sites, d)) * sd[None, None, :]
        out[done : done + c] = vals
        done += c
    return out


def truncation_error_curve(
    spec: KernelSpec, a: float, b: float, site, m_values, n_draws: int, rng
) -> np.ndarray:
    """Monte Carlo E[prod_{i<=m} (1 - w_i(s) V_i)] for each m in m_values:
    the prior mass an unpinned truncation at m fails to allocate at the
    site.  Decays geometrically in m (rate 1 - E[w] E[V])."""
    gen = as_generator(rng)
    site = np.asarray(site, dtype=float)
    m_values = np.asarray(m_values, dtype=int)
    m_max = int(m_values.max())
    rem = np.zeros(len(m_values))
    done = 0
    chunk = max(1, int(4e6 / m_max))
    while done < n_draws:
        c = min(chunk, n_draws - done)
        psi = gen.uniform(0.0, 1.0, size=(c, m_max, 2))
        if spec.bandwidth == "fixed":
            from .kernels import fixed_bandwidth

            eps = np.full((c, m_max, 2), fixed_bandwidth(spec))
        elif spec.bandwidth == "expo":
            eps = gen.exponential(scale=spec.lam, size=(c, m_max, 2))
        else:
            eps = np.sqrt((spec.lam**2 / 2.0) / gen.gamma(1.5, 1.0, size=(c, m_max, 2)))
        dvec = np.abs(site[None, None, :] - psi)
        if spec.family == "uniform":
            w = np.where((dvec < eps / 2.0).all(axis=2), 1.0, 0.0)
        else:
            w = np.exp(-np.sum((dvec / eps) ** 2, axis=2))
        v = gen.beta(a, b, size=(c, m_max))
        g = np.cumprod(1.0 - w * v, axis=1)
        rem += g[:, m_values - 1].sum(axis=0)
        done += c
    return rem / n_draws
