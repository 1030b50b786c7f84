"""Metropolis-within-Gibbs sampler for the stick-breaking wind field model.

Observation model (bivariate mode, d = 2): at observation o with site s(o),

    y[o] = offset[o] + bias * 1(source = satellite) + theta[g(s(o))] + e[o],

where offset is the deterministic vortex field, g(s) is the site's mixture
label under the stick-breaking prior (ssb module), theta_j ~ N(0, loc_cov)
are the cluster locations, and e[o] has independent components with
per-(source, component) variances sigma2.  Missing components (NaN in the
dataset) are masked out of every likelihood term.  Univariate mode (d = 1)
drops the bias and uses a single source.

One sweep updates, in fixed order:

    labels -> theta -> v -> knots/bandwidths -> lam -> (a, b) ->
    error variances -> bias -> loc_cov

theta, variances, bias, and loc_cov are conjugate draws; sticks, knots,
bandwidths, lam, and (a, b) are random-walk Metropolis steps whose scales
adapt toward a target acceptance rate during burn-in only (so the retained
chain is a fixed-kernel Markov chain).  Priors: V_j ~ Beta(a, b) with
a, b ~ U(0, hyper_max); variances ~ InvGamma(shape, rate); loc_cov ~
InvWishart(df, scale * I) (d = 1: InvGamma); bias ~ N(0, bias_sd^2); lam ~
U(0, lam_max); knots uniform or Beta(1.5, 1.5) per axis.
"""

from __future__ import annotations

import dataclasses
import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, expit, logit
from scipy.stats import invgamma, invwishart

from .domain import (
    ConfigError,
    Dataset,
    NumericError,
    RngContract,
    observation_arrays,
)
from .kernels import (
    KernelSpec,
    as_generator,
    bandwidth_log_prior,
    draw_bandwidths,
    fixed_bandwidth,
    kernel_values,
)
from .ssb import SSBConfig, StickSet, draw_knots, stick_weights

ALL_BLOCKS = (
    "labels",
    "theta",
    "v",
    "knots",
    "lam",
    "hyper",
    "variances",
    "bias",
    "loc_cov",
)

KNOT_BETA_SHAPE = 1.5


@dataclass(frozen=True)
class Priors:
    """Hyperparameters of the hierarchical model (see module docstring)."""

    variance_shape: float = 0.01
    variance_rate: float = 0.01
    sigma_df: float = 0.1
    sigma_scale: float = 0.1
    bias_sd: float = 10.0
    hyper_max: float = 10.0
    lam_max: float = 1.0

    def __post_init__(self):
        if min(
            self.variance_shape,
            self.variance_rate,
            self.sigma_df,
            self.sigma_scale,
            self.bias_sd,
            self.hyper_max,
            self.lam_max,
        ) <= 0:
            raise ConfigError("all prior hyperparameters must be positive")


@dataclass(frozen=True)
class McmcConfig:
    """Chain length bookkeeping and Metropolis adaptation settings.

    Retained draws per chain = (n_iter - burn_in) / thin, which must divide
    exactly.  update_blocks restricts the sweep (used by prior-recovery and
    degenerate-case tests).
    """

    n_iter: int = 4000
    burn_in: int = 2000
    thin: int = 2
    n_chains: int = 1
    adapt: bool = True
    target_accept: float = 0.3
    adapt_interval: int = 25
    check_invariants: bool = True
    update_blocks: tuple[str, ...] = ALL_BLOCKS

    def __post_init__(self):
        if self.n_iter <= 0 or self.burn_in < 0 or self.n_iter <= self.burn_in:
            raise ConfigError(
                f"need n_iter > burn_in >= 0, got {self.n_iter}, {self.burn_in}"
            )
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if (self.n_iter - self.burn_in) % self.thin != 0:
            raise ConfigError(
                f"(n_iter - burn_in) = {self.n_iter - self.burn_in} must be "
                f"divisible by thin = {self.thin}"
            )
        if self.n_chains < 1:
            raise ConfigError(f"n_chains must be >= 1, got {self.n_chains}")
        unknown = set(self.update_blocks) - set(ALL_BLOCKS)
        if unknown:
            raise ConfigError(f"unknown update blocks {sorted(unknown)}")

    @property
    def n_keep(self) -> int:
        return (self.n_iter - self.burn_in) // self.thin


# ---------------------------------------------------------------------------
# model data


@dataclass
class ModelData:
    """Columnar observation data with unique-site indexing.

    y and offset are (n_obs, d); mask marks finite components; site_id maps
    each observation to a row of sites (normalized unit-square coords).
    """

    y: np.ndarray
    mask: np.ndarray
    offset: np.ndarray
    source: np.ndarray
    site_id: np.ndarray
    sites: np.ndarray
    sites_raw: np.ndarray
    n_src: int
    d: int
    has_bias: bool

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]


def build_model_data(
    dataset: Dataset, offset_field=None, response_dim: int = 2
) -> ModelData:
    """Assemble ModelData from a normalized Dataset and an offset field
    aligned with its observations ((n_obs, d) array; None means zeros).

    Univariate mode (response_dim = 1) keeps the u component only, treats
    all observations as one unbiased source.
    """
    arr = observation_arrays(dataset)
    if not (np.isfinite(arr["s1"]).all() and np.isfinite(arr["s2"]).all()):
        raise ConfigError(
            "dataset has unnormalized sites; call normalize_domain first"
        )
    if response_dim not in (1, 2):
        raise ConfigError(f"response_dim must be 1 or 2, got {response_dim}")
    n = len(arr["u"])
    if response_dim == 2:
        y = np.column_stack([arr["u"], arr["v"]])
        source = arr["source"].copy()
        n_src, has_bias = 2, True
    else:
        y = arr["u"][:, None].copy()
        source = np.zeros(n, dtype=np.int64)
        n_src, has_bias = 1, False
    if offset_field is None:
        offset = np.zeros_like(y)
    else:
        offset = np.asarray(offset_field, dtype=float).reshape(n, response_dim).copy()
        if not np.isfinite(offset).all():
            raise NumericError("offset field contains non-finite values")
    mask = np.isfinite(y)
    if not mask.any():
        raise ConfigError("dataset has no finite observation components")
    coords = np.column_stack([arr["s1"], arr["s2"]])
    raw = np.column_stack([arr["lon"], arr["lat"]])
    sites, site_id = np.unique(coords, axis=0, return_inverse=True)
    sites_raw = np.empty_like(sites)
    sites_raw[site_id] = raw
    y = np.where(mask, y, 0.0)
    return ModelData(
        y=y,
        mask=mask,
        offset=offset,
        source=source,
        site_id=np.asarray(site_id, dtype=np.int64).ravel(),
        sites=sites,
        sites_raw=sites_raw,
        n_src=n_src,
        d=response_dim,
        has_bias=has_bias,
    )


def empty_model_data(response_dim: int = 2, n_src: int = 2) -> ModelData:
    """Zero-observation ModelData: with no data every full conditional
    collapses to its prior, so a chain on this target samples the prior
    (used by the prior-recovery checks)."""
    d = response_dim
    return ModelData(
        y=np.zeros((0, d)),
        mask=np.zeros((0, d), dtype=bool),
        offset=np.zeros((0, d)),
        source=np.zeros(0, dtype=np.int64),
        site_id=np.zeros(0, dtype=np.int64),
        sites=np.zeros((0, 2)),
        sites_raw=np.zeros((0, 2)),
        n_src=n_src,
        d=d,
        has_bias=d == 2,
    )


# ---------------------------------------------------------------------------
# state


@dataclass
class SsbState:
    """Mutable sampler state (single-writer; snapshots are copied out)."""

    v: np.ndarray
    theta: np.ndarray
    knots: np.ndarray
    eps: np.ndarray
    labels: np.ndarray
    sigma2: np.ndarray
    loc_cov: np.ndarray
    bias: np.ndarray
    a: float
    b: float
    lam: float

    def copy(self) -> "SsbState":
        return SsbState(
            v=self.v.copy(),
            theta=self.theta.copy(),
            knots=self.knots.copy(),
            eps=self.eps.copy(),
            labels=self.labels.copy(),
            sigma2=self.sigma2.copy(),
            loc_cov=self.loc_cov.copy(),
            bias=self.bias.copy(),
            a=self.a,
            b=self.b,
            lam=self.lam,
        )

    def validate(self, data: ModelData, config: SSBConfig, priors: Priors):
        m = config.m
        if self.v.shape != (m,) or not np.all((self.v >= 0) & (self.v <= 1)):
            raise NumericError("stick fractions out of [0, 1]")
        if self.v[-1] != 1.0:
            raise NumericError("terminal stick must be pinned at 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= m):
            raise NumericError("labels out of range")
        if not (np.all(self.sigma2 > 0) and np.isfinite(self.sigma2).all()):
            raise NumericError("error variances must be positive and finite")
        lc = self.loc_cov
        if not np.isfinite(lc).all() or np.any(np.diag(lc) <= 0):
            raise NumericError("location covariance has a bad diagonal")
        if lc.shape[0] == 2 and lc[0, 0] * lc[1, 1] - lc[0, 1] ** 2 <= 0:
            raise NumericError("location covariance not positive definite")
        if not (0 < self.a <= priors.hyper_max and 0 < self.b <= priors.hyper_max):
            raise NumericError("stick shape hyperparameters out of range")
        if not (0 < self.lam <= priors.lam_max):
            raise NumericError("range parameter out of bounds")
        if not np.isfinite(self.knots).all() or np.any(self.eps <= 0):
            raise NumericError("bad knots or bandwidths")
        if not np.isfinite(self.theta).all() or not np.isfinite(self.bias).all():
            raise NumericError("non-finite locations or bias")


# ---------------------------------------------------------------------------
# conjugate conditional parameter algebra (shared with the test oracles)


def theta_conditional_params(loc_cov, resid, mask, sigma2_rows):
    """Posterior (mean, cov) of one cluster location given its members'
    masked residuals: N(0, loc_cov) prior, diagonal Gaussian noise."""
    loc_cov = np.atleast_2d(np.asarray(loc_cov, dtype=float))
    resid = np.atleast_2d(np.asarray(resid, dtype=float))
    mask = np.atleast_2d(np.asarray(mask, dtype=bool))
    sig = np.atleast_2d(np.asarray(sigma2_rows, dtype=float))
    prec_obs = np.where(mask, 1.0 / sig, 0.0)
    s0 = prec_obs.sum(axis=0)
    s1 = (np.where(mask, resid, 0.0) * prec_obs).sum(axis=0)
    prec = np.linalg.inv(loc_cov) + np.diag(s0)
    cov = np.linalg.inv(prec)
    return cov @ s1, cov


def invgamma_posterior_params(shape0, rate0, sq_sum, n):
    """InvGamma(shape0, rate0) prior with n Gaussian squared residuals."""
    return shape0 + 0.5 * n, rate0 + 0.5 * sq_sum


def _invgamma_draw(shape, rate, gen) -> float:
    """Inverse-gamma draw robust to gamma underflow at tiny shapes."""
    for _ in range(100):
        g = gen.gamma(shape, 1.0)
        if g > 0:
            x = rate / g
            if np.isfinite(x):
                return float(x)
    raise NumericError(f"inverse-gamma draw failed for shape {shape}, rate {rate}")


def _slice_draw(logp, x0, width, lo, hi, gen, max_steps=50, max_shrink=100):
    """One slice-sampling draw from a 1-d log density on (lo, hi].

    Stepping-out then shrinkage; returns None (caller keeps the current
    value) only if the evaluations degenerate, which preserves detailed
    balance.
    """
    y0 = logp(x0)
    if not np.isfinite(y0):
        return None
    y = y0 - gen.exponential()
    u = gen.random()
    left = x0 - u * width
    right = left + width
    j = int(gen.integers(0, max_steps))
    k = max_steps - 1 - j
    while j > 0 and left > lo and logp(left) > y:
        left -= width
        j -= 1
    while k > 0 and right < hi and logp(right) > y:
        right += width
        k -= 1
    left = max(left, lo)
    right = min(right, hi)
    for _ in range(max_shrink):
        x1 = gen.uniform(left, right)
        if x1 <= lo or x1 > hi:
            return None
        if logp(x1) > y:
            return float(x1)
        if x1 < x0:
            left = x1
        else:
            right = x1
    return None


def bias_conditional_params(prior_sd, resid, sigma2):
    """Posterior (mean, var) of a scalar additive bias with N(0, prior_sd^2)
    prior and residuals with per-observation variances sigma2."""
    resid = np.asarray(resid, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    prec = 1.0 / prior_sd**2 + np.sum(1.0 / sigma2)
    mean = np.sum(resid / sigma2) / prec
    return mean, 1.0 / prec


def sigma_posterior_params(df0, scale0, theta):
    """InvWishart posterior (df, scale) for the location covariance given
    the m cluster locations."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    return df0 + theta.shape[0], np.atleast_2d(scale0) + theta.T @ theta


def full_conditional_label(
    data: ModelData, state: SsbState, spec: KernelSpec, site_index: int
) -> np.ndarray:
    """Categorical full conditional over component labels at one site.

    With no observations attached to the site this reduces to the stick
    weights p_j(s) themselves.
    """
    sticks = StickSet(v=state.v, knots=state.knots, eps=state.eps)
    w = stick_weights(sticks, spec, data.sites[site_index : site_index + 1])[0]
    sel = data.site_id == site_index
    if not sel.any():
        return w / w.sum()
    r = _residual(data, state)[sel]
    mask = data.mask[sel]
    prec = np.where(mask, 1.0 / state.sigma2[data.source[sel]], 0.0)
    # log lik of each component for the site's observations
    ll = np.zeros(len(state.v))
    for j in range(len(state.v)):
        ll[j] = -0.5 * np.sum(prec * (r - state.theta[j][None, :]) ** 2)
    with np.errstate(divide="ignore"):
        logp = np.log(w) + ll
    logp -= logp.max()
    p = np.exp(logp)
    return p / p.sum()


def _residual(data: ModelData, state: SsbState) -> np.ndarray:
    """y - offset - bias (satellite rows only), zeros at masked components."""
    r = data.y - data.offset
    if data.has_bias:
        sat = (data.source == 0)[:, None]
        r = r - np.where(sat, state.bias[None, :], 0.0)
    return np.where(data.mask, r, 0.0)


# ---------------------------------------------------------------------------
# sampler


class SsbSampler:
    """Single-chain Metropolis-within-Gibbs machinery with a kernel cache.

    Block update methods are public so tests can drive them individually;
    the kernel value cache self.kw (n_sites, m; terminal column pinned at 1)
    is kept consistent by the methods that move knots/bandwidths/lam.
    """

    def __init__(
        self,
        data: ModelData,
        config: SSBConfig,
        mcmc: McmcConfig,
        priors: Priors,
    ):
        if config.kernel.lam > priors.lam_max:
            raise ConfigError(
                f"kernel lam {config.kernel.lam} exceeds lam_max {priors.lam_max}"
            )
        self.data = data
        self.config = config
        self.mcmc = mcmc
        self.priors = priors
        self.scales = {"v": 1.0, "knots": 0.1, "eps": 0.5, "lam": 0.1, "hyper": 0.5}
        # refresh moves propose from the prior (no tunable scale); they let
        # unoccupied components jump instead of diffusing
        counters = tuple(self.scales) + ("v_refresh", "move_refresh")
        self.accepts = {k: 0 for k in counters}
        self.tries = {k: 0 for k in counters}
        self.total_accepts = {k: 0 for k in counters}
        self.total_tries = {k: 0 for k in counters}
        self.kw = None

    # -- initialization ----------------------------------------------------

    def init_state(self, gen) -> SsbState:
        data, config, priors = self.data, self.config, self.priors
        m, d = config.m, data.d
        v = np.clip(gen.beta(config.a, config.b, size=m), 1e-12, 1.0 - 1e-12)
        v[-1] = 1.0
        lam = config.kernel.lam
        knots = draw_knots(config, m, gen)
        eps = draw_bandwidths(config.kernel, m, gen, lam=lam)
        resid = np.where(data.mask, data.y - data.offset, np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pooled = np.nanvar(resid, axis=0)
        pooled = np.where(np.isfinite(pooled) & (pooled > 0), pooled, 1.0)
        loc_cov = np.diag(np.maximum(pooled / 2.0, 1e-4))
        theta = gen.standard_normal((m, d)) @ np.linalg.cholesky(loc_cov).T
        sigma2 = np.tile(np.maximum(pooled / 2.0, 1e-4), (data.n_src, 1))
        state = SsbState(
            v=v,
            theta=theta,
            knots=knots,
            eps=eps,
            labels=np.zeros(data.n_sites, dtype=np.int64),
            sigma2=sigma2,
            loc_cov=loc_cov,
            bias=np.zeros(d),
            a=config.a,
            b=config.b,
            lam=lam,
        )
        self.refresh_kernel_cache(state)
        w = self._weight_matrix(state)
        u01 = gen.random((data.n_sites, 1))
        state.labels = np.minimum(
            (np.cumsum(w, axis=1) < u01).sum(axis=1), m - 1
        ).astype(np.int64)
        return state

    def refresh_kernel_cache(self, state: SsbState):
        kw = kernel_values(self.config.kernel, state.knots, state.eps, self.data.sites)
        kw[:, -1] = 1.0
        self.kw = kw

    def _weight_matrix(self, state: SsbState) -> np.ndarray:
        f = self.kw * state.v[None, :]
        q = np.cumprod(1.0 - f, axis=1)
        p = np.empty_like(f)
        p[:, 0] = f[:, 0]
        p[:, 1:] = f[:, 1:] * q[:, :-1]
        return p

    # -- block updates -----------------------------------------------------

    def update_labels(self, state: SsbState, gen):
        data = self.data
        w = self._weight_matrix(state)
        r = _residual(data, state)
        prec = np.where(data.mask, 1.0 / state.sigma2[data.source], 0.0)
        # per-observation, per-component residual loglik up to a j-free term
        ll_obs = (r * prec) @ state.theta.T - 0.5 * prec @ (state.theta**2).T
        site_ll = np.zeros((data.n_sites, len(state.v)))
        np.add.at(site_ll, data.site_id, ll_obs)
        with np.errstate(divide="ignore"):
            logp = np.log(w) + site_ll
        noise = gen.gumbel(size=logp.shape)
        total = logp + noise
        bad = ~np.isfinite(logp).any(axis=1)
        state.labels = np.where(
            bad, len(state.v) - 1, np.argmax(total, axis=1)
        ).astype(np.int64)

    def update_theta(self, state: SsbState, gen):
        data = self.data
        m, d = self.config.m, data.d
        r = _residual(data, state)
        prec = np.where(data.mask, 1.0 / state.sigma2[data.source], 0.0)
        lab_obs = state.labels[data.site_id]
        s0 = np.zeros((m, d))
        s1 = np.zeros((m, d))
        np.add.at(s0, lab_obs, prec)
        np.add.at(s1, lab_obs, r * prec)
        p = np.linalg.inv(state.loc_cov)
        if d == 2:
            l11 = p[0, 0] + s0[:, 0]
            l22 = p[1, 1] + s0[:, 1]
            l12 = np.full(m, p[0, 1])
            det = l11 * l22 - l12**2
            v11, v22, v12 = l22 / det, l11 / det, -l12 / det
            mu = np.column_stack(
                [v11 * s1[:, 0] + v12 * s1[:, 1], v12 * s1[:, 0] + v22 * s1[:, 1]]
            )
            c11 = np.sqrt(v11)
            c21 = v12 / c11
            c22 = np.sqrt(np.maximum(v22 - c21**2, 1e-300))
            z = gen.standard_normal((m, 2))
            state.theta = mu + np.column_stack(
                [c11 * z[:, 0], c21 * z[:, 0] + c22 * z[:, 1]]
            )
        else:
            lam_post = p[0, 0] + s0[:, 0]
            mu = s1[:, 0] / lam_post
            state.theta = (mu + gen.standard_normal(m) / np.sqrt(lam_post))[:, None]

    def update_v(self, state: SsbState, gen):
        m = self.config.m
        labels = state.labels
        for j in range(m - 1):
            self.tries["v"] += 1
            cur = state.v[j]
            eta = logit(cur) + self.scales["v"] * gen.standard_normal()
            new = float(expit(eta))
            if 0.0 < new < 1.0:
                gt = labels > j
                wj = self.kw[gt, j]
                n_j = int(np.sum(labels == j))
                with np.errstate(divide="ignore"):
                    delta = (
                        (state.a - 1.0) * (np.log(new) - np.log(cur))
                        + (state.b - 1.0) * (np.log1p(-new) - np.log1p(-cur))
                        + n_j * (np.log(new) - np.log(cur))
                        + np.sum(np.log1p(-wj * new) - np.log1p(-wj * cur))
                        + np.log(new * (1.0 - new))
                        - np.log(cur * (1.0 - cur))
                    )
                if np.log(gen.random()) < delta:
                    state.v[j] = new
                    self.accepts["v"] += 1
            # independence refresh from the Beta prior: prior and proposal
            # cancel, leaving the allocation-likelihood ratio
            self.tries["v_refresh"] += 1
            cur = state.v[j]
            new = float(np.clip(gen.beta(state.a, state.b), 1e-12, 1.0 - 1e-12))
            gt = labels > j
            wj = self.kw[gt, j]
            n_j = int(np.sum(labels == j))
            with np.errstate(divide="ignore"):
                delta = n_j * (np.log(new) - np.log(cur)) + np.sum(
                    np.log1p(-wj * new) - np.log1p(-wj * cur)
                )
            if np.isfinite(delta) and np.log(gen.random()) < delta:
                state.v[j] = new
                self.accepts["v_refresh"] += 1

    def _kernel_column(self, state: SsbState, j: int, knot, eps) -> np.ndarray:
        return kernel_values(
            self.config.kernel, np.atleast_2d(knot), np.atleast_2d(eps), self.data.sites
        )[:, 0]

    def _component_move_delta(self, state, j, w_new):
        """Label-likelihood change for replacing kernel column j."""
        labels = state.labels
        w_old = self.kw[:, j]
        vj = state.v[j]
        eq = labels == j
        gt = labels > j
        with np.errstate(divide="ignore"):
            d_eq = np.sum(np.log(w_new[eq] * vj)) - np.sum(np.log(w_old[eq] * vj))
            d_gt = np.sum(np.log1p(-w_new[gt] * vj)) - np.sum(
                np.log1p(-w_old[gt] * vj)
            )
        return d_eq + d_gt

    def update_knots_bandwidths(self, state: SsbState, gen):
        config, priors = self.config, self.priors
        m = config.m
        beta_knots = config.knot_prior == "beta"
        for j in range(m - 1):
            # knot move
            self.tries["knots"] += 1
            prop = state.knots[j] + self.scales["knots"] * gen.standard_normal(2)
            if np.all((prop > 0.0) & (prop < 1.0)):
                lp = 0.0
                if beta_knots:
                    lp = float(
                        np.sum(
                            (KNOT_BETA_SHAPE - 1.0)
                            * (
                                np.log(prop) + np.log1p(-prop)
                                - np.log(state.knots[j])
                                - np.log1p(-state.knots[j])
                            )
                        )
                    )
                w_new = self._kernel_column(state, j, prop, state.eps[j])
                delta = lp + self._component_move_delta(state, j, w_new)
                if np.isfinite(delta) and np.log(gen.random()) < delta:
                    state.knots[j] = prop
                    self.kw[:, j] = w_new
                    self.accepts["knots"] += 1
            # bandwidth move (sampled-bandwidth kernels only)
            if config.kernel.bandwidth == "fixed":
                continue
            self.tries["eps"] += 1
            prop_eps = state.eps[j] * np.exp(
                self.scales["eps"] * gen.standard_normal(2)
            )
            lp = (
                bandwidth_log_prior(config.kernel, prop_eps, state.lam)
                - bandwidth_log_prior(config.kernel, state.eps[j], state.lam)
                + float(np.sum(np.log(prop_eps) - np.log(state.eps[j])))
            )
            w_new = self._kernel_column(state, j, state.knots[j], prop_eps)
            delta = lp + self._component_move_delta(state, j, w_new)
            if np.isfinite(delta) and np.log(gen.random()) < delta:
                state.eps[j] = prop_eps
                self.kw[:, j] = w_new
                self.accepts["eps"] += 1
        # joint independence refresh of (knot, bandwidth) from their priors:
        # prior and proposal cancel, so the acceptance ratio is the
        # allocation likelihood alone and empty components relocate freely
        for j in range(m - 1):
            self.tries["move_refresh"] += 1
            knot_new = draw_knots(config, 1, gen)[0]
            eps_new = draw_bandwidths(config.kernel, 1, gen, lam=state.lam)[0]
            w_new = self._kernel_column(state, j, knot_new, eps_new)
            delta = self._component_move_delta(state, j, w_new)
            if np.isfinite(delta) and np.log(gen.random()) < delta:
                state.knots[j] = knot_new
                state.eps[j] = eps_new
                self.kw[:, j] = w_new
                self.accepts["move_refresh"] += 1

    def _label_loglik(self, state: SsbState, w=None) -> float:
        w = self._weight_matrix(state) if w is None else w
        probs = w[np.arange(self.data.n_sites), state.labels]
        with np.errstate(divide="ignore"):
            return float(np.sum(np.log(probs)))

    def update_lam(self, state: SsbState, gen):
        config, priors = self.config, self.priors
        self.tries["lam"] += 1
        if config.kernel.bandwidth == "fixed":
            prop = state.lam + self.scales["lam"] * gen.standard_normal()
            if not (0.0 < prop <= priors.lam_max):
                return
            eps_new = np.full_like(state.eps, fixed_bandwidth(config.kernel, prop))
            kw_new = kernel_values(config.kernel, state.knots, eps_new, self.data.sites)
            kw_new[:, -1] = 1.0
            old_kw = self.kw
            old_ll = self._label_loglik(state)
            self.kw = kw_new
            new_ll = self._label_loglik(state)
            self.kw = old_kw
            delta = new_ll - old_ll
            if np.isfinite(delta) and np.log(gen.random()) < delta:
                state.lam = prop
                state.eps = eps_new
                self.kw = kw_new
                self.accepts["lam"] += 1
        elif config.kernel.bandwidth == "expo":
            # conjugate: eps_ij ~ Expo(mean lam) iid, lam ~ U(0, lam_max]
            # gives lam | eps ~ InvGamma(n - 1, sum eps) truncated to the prior
            # support; with no live bandwidths the conditional is the prior.
            live = state.eps[: config.m - 1]
            n = live.size
            if n < 2:
                state.lam = priors.lam_max * gen.uniform(
                    np.finfo(float).tiny, 1.0
                )
                self.accepts["lam"] += 1
                return
            post = invgamma(n - 1, scale=float(live.sum()))
            hi = post.cdf(priors.lam_max)
            if not np.isfinite(hi) or hi <= 0.0:
                return
            draw = float(post.ppf(gen.uniform(0.0, hi)))
            if np.isfinite(draw) and 0.0 < draw <= priors.lam_max:
                state.lam = draw
                self.accepts["lam"] += 1
        else:
            prop = state.lam + self.scales["lam"] * gen.standard_normal()
            if not (0.0 < prop <= priors.lam_max):
                return
            live = state.eps[: config.m - 1]
            delta = bandwidth_log_prior(config.kernel, live, prop) - bandwidth_log_prior(
                config.kernel, live, state.lam
            )
            if np.isfinite(delta) and np.log(gen.random()) < delta:
                state.lam = prop
                self.accepts["lam"] += 1

    def update_hyper(self, state: SsbState, gen):
        m = self.config.m
        free = state.v[: m - 1]
        if len(free):
            sum_log_v = float(np.sum(np.log(free)))
            sum_log_1mv = float(np.sum(np.log1p(-free)))
        else:
            sum_log_v = sum_log_1mv = 0.0
        n_free = max(m - 1, 0)
        # slice-sample each shape parameter: the 1-d conditionals are
        # log-concave, so stepping-out plus shrinkage needs no tuning and
        # decorrelates much faster than a random walk here
        def logp_a(x):
            return x * sum_log_v - n_free * betaln(x, state.b)

        def logp_b(x):
            return x * sum_log_1mv - n_free * betaln(state.a, x)

        for name, logp in (("a", logp_a), ("b", logp_b)):
            self.tries["hyper"] += 1
            new = _slice_draw(
                logp, getattr(state, name), 1.0, 0.0, self.priors.hyper_max, gen
            )
            if new is not None:
                setattr(state, name, float(new))
                self.accepts["hyper"] += 1

    def update_variances(self, state: SsbState, gen):
        data, priors = self.data, self.priors
        r = _residual(data, state) - state.theta[state.labels[data.site_id]]
        r = np.where(data.mask, r, 0.0)
        for s in range(data.n_src):
            sel = data.source == s
            for c in range(data.d):
                msk = data.mask[sel, c]
                sq = float(np.sum(r[sel, c][msk] ** 2))
                n = int(msk.sum())
                shape, rate = invgamma_posterior_params(
                    priors.variance_shape, priors.variance_rate, sq, n
                )
                state.sigma2[s, c] = _invgamma_draw(shape, rate, gen)

    def update_bias(self, state: SsbState, gen):
        data, priors = self.data, self.priors
        if not data.has_bias:
            return
        sat = data.source == 0
        r = data.y - data.offset - state.theta[state.labels[data.site_id]]
        for c in range(data.d):
            msk = sat & data.mask[:, c]
            if msk.any():
                mean, var = bias_conditional_params(
                    priors.bias_sd, r[msk, c], np.full(msk.sum(), state.sigma2[0, c])
                )
            else:
                mean, var = 0.0, priors.bias_sd**2
            state.bias[c] = mean + np.sqrt(var) * gen.standard_normal()

    def update_loc_cov(self, state: SsbState, gen):
        priors = self.priors
        d = self.data.d
        if d == 1:
            sq = float(np.sum(state.theta**2))
            shape, rate = invgamma_posterior_params(
                priors.variance_shape, priors.variance_rate, sq, self.config.m
            )
            state.loc_cov = np.array([[_invgamma_draw(shape, rate, gen)]])
        else:
            df, scale = sigma_posterior_params(
                priors.sigma_df, priors.sigma_scale * np.eye(d), state.theta
            )
            state.loc_cov = invwishart.rvs(df=df, scale=scale, random_state=gen)

    # -- sweep and chain ---------------------------------------------------

    def sweep(self, state: SsbState, gen):
        blocks = self.mcmc.update_blocks
        check = self.mcmc.check_invariants
        steps = (
            ("labels", lambda: self.update_labels(state, gen)),
            ("theta", lambda: self.update_theta(state, gen)),
            ("v", lambda: self.update_v(state, gen)),
            ("knots", lambda: self.update_knots_bandwidths(state, gen)),
            ("lam", lambda: self.update_lam(state, gen)),
            ("hyper", lambda: self.update_hyper(state, gen)),
            ("variances", lambda: self.update_variances(state, gen)),
            ("bias", lambda: self.update_bias(state, gen)),
            ("loc_cov", lambda: self.update_loc_cov(state, gen)),
        )
        for name, step in steps:
            if name in blocks:
                step()
                if check:
                    state.validate(self.data, self.config, self.priors)

    def _adapt(self):
        # hyper is slice-sampled, lam is a direct draw under expo
        # bandwidths, and *_refresh moves propose from the prior: none of
        # those has a proposal scale to tune
        skip = {"hyper"}
        if self.config.kernel.bandwidth == "expo":
            skip.add("lam")
        for k in self.tries:
            if k in self.scales and self.tries[k] > 0 and k not in skip:
                rate = self.accepts[k] / self.tries[k]
                self.scales[k] = float(
                    np.clip(
                        self.scales[k]
                        * np.exp(0.66 * (rate - self.mcmc.target_accept)),
                        1e-5,
                        5.0,
                    )
                )
            self.total_accepts[k] += self.accepts[k]
            self.total_tries[k] += self.tries[k]
            self.accepts[k] = 0
            self.tries[k] = 0

    def run(self, gen) -> dict:
        """One chain; returns stacked raw draws keyed by parameter."""
        mcmc = self.mcmc
        state = self.init_state(gen)
        keep = {
            k: []
            for k in (
                "v",
                "theta",
                "knots",
                "eps",
                "labels",
                "sigma2",
                "loc_cov",
                "bias",
                "a",
                "b",
                "lam",
                "pm_site",
            )
        }
        for it in range(mcmc.n_iter):
            self.sweep(state, gen)
            in_burn = it < mcmc.burn_in
            if in_burn and mcmc.adapt and (it + 1) % mcmc.adapt_interval == 0:
                self._adapt()
            if not in_burn and (it - mcmc.burn_in + 1) % mcmc.thin == 0:
                w = self._weight_matrix(state)
                keep["v"].append(state.v.copy())
                keep["theta"].append(state.theta.copy())
                keep["knots"].append(state.knots.copy())
                keep["eps"].append(state.eps.copy())
                keep["labels"].append(state.labels.copy())
                keep["sigma2"].append(state.sigma2.copy())
                keep["loc_cov"].append(np.atleast_2d(state.loc_cov).copy())
                keep["bias"].append(state.bias.copy())
                keep["a"].append(state.a)
                keep["b"].append(state.b)
                keep["lam"].append(state.lam)
                keep["pm_site"].append(w[:, -1].copy())
        for k in self.tries:
            self.total_accepts[k] += self.accepts[k]
            self.total_tries[k] += self.tries[k]
            self.accepts[k] = 0
            self.tries[k] = 0
        return {k: np.asarray(vals) for k, vals in keep.items()}


# ---------------------------------------------------------------------------
# samples container, fit, predict


@dataclass(frozen=True)
class SsbSamples:
    """Posterior draws from fit_ssb, all chains stacked."""

    chain: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    knots: np.ndarray
    eps: np.ndarray
    labels: np.ndarray
    sigma2: np.ndarray
    loc_cov: np.ndarray
    bias: np.ndarray
    a: np.ndarray
    b: np.ndarray
    lam: np.ndarray
    pm_site: np.ndarray
    sites: np.ndarray
    sites_raw: np.ndarray
    acceptance: dict
    config: dict
    kind: str = "ssb"

    @property
    def n_draws(self) -> int:
        return len(self.a)

    @property
    def m(self) -> int:
        return self.v.shape[1]

    @property
    def d(self) -> int:
        return self.theta.shape[2]

    def kernel_spec(self) -> KernelSpec:
        k = self.config["kernel"]
        return KernelSpec(k["family"], k["bandwidth"], k["lam"])


def fit_ssb(
    dataset: Dataset,
    offset_field,
    config: SSBConfig,
    mcmc: McmcConfig,
    priors: Priors,
    rng: RngContract,
    response_dim: int = 2,
    pm_warn: float = 0.01,
) -> SsbSamples:
    """Run the sampler (n_chains independent seeded chains) and stack draws.

    Warns when the posterior-mean terminal mass exceeds pm_warn at any site
    (the truncation level is biting; increase m).
    """
    data = build_model_data(dataset, offset_field, response_dim)
    chains = []
    acc = {}
    for c in range(mcmc.n_chains):
        sampler = SsbSampler(data, config, mcmc, priors)
        draws = sampler.run(rng.substream(c))
        draws["chain"] = np.full(mcmc.n_keep, c, dtype=np.int64)
        chains.append(draws)
        for k in sampler.total_tries:
            if sampler.total_tries[k]:
                acc.setdefault(k, []).append(
                    sampler.total_accepts[k] / sampler.total_tries[k]
                )
    stacked = {
        k: np.concatenate([ch[k] for ch in chains], axis=0) for k in chains[0]
    }
    acceptance = {k: float(np.mean(v)) for k, v in acc.items()}
    samples = SsbSamples(
        chain=stacked["chain"],
        v=stacked["v"],
        theta=stacked["theta"],
        knots=stacked["knots"],
        eps=stacked["eps"],
        labels=stacked["labels"].astype(np.int64),
        sigma2=stacked["sigma2"],
        loc_cov=stacked["loc_cov"],
        bias=stacked["bias"],
        a=stacked["a"],
        b=stacked["b"],
        lam=stacked["lam"],
        pm_site=stacked["pm_site"],
        sites=data.sites,
        sites_raw=data.sites_raw,
        acceptance=acceptance,
        config={
            "kernel": dataclasses.asdict(config.kernel),
            "m": config.m,
            "a": config.a,
            "b": config.b,
            "knot_prior": config.knot_prior,
            "response_dim": response_dim,
            "n_src": data.n_src,
            "mcmc": dataclasses.asdict(mcmc),
            "priors": dataclasses.asdict(priors),
        },
    )
    mean_pm = samples.pm_site.mean(axis=0)
    if float(mean_pm.max()) > pm_warn:
        warnings.warn(
            f"posterior mean terminal mass reaches {mean_pm.max():.3f} "
            f"(> {pm_warn}); the truncation level m = {config.m} is biting",
            stacklevel=2,
        )
    return samples


@dataclass(frozen=True)
class PredictionSummary:
    mean: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    draws: np.ndarray | None = None


def predict_ssb(
    samples: SsbSamples,
    sites_new,
    offset_new,
    rng,
    kind: str = "latent",
    tessellation: bool = False,
    return_draws: bool = False,
) -> PredictionSummary:
    """Posterior predictive field at new (normalized) sites.

    kind: "latent" gives the noise-free field; "satellite" adds the bias
    and satellite noise; "buoy" adds buoy noise.  tessellation=True uses
    the deterministic argmax-label surface instead of sampling labels.
    """
    if kind not in ("latent", "satellite", "buoy"):
        raise ConfigError(f"unknown prediction kind {kind!r}")
    gen = as_generator(rng)
    spec = samples.kernel_spec()
    sites_new = np.atleast_2d(np.asarray(sites_new, dtype=float))
    n_new = sites_new.shape[0]
    d = samples.d
    offset_new = np.zeros((n_new, d)) if offset_new is None else np.asarray(
        offset_new, dtype=float
    ).reshape(n_new, d)
    n_draws = samples.n_draws
    out = np.empty((n_draws, n_new, d))
    for i in range(n_draws):
        sticks = StickSet(v=samples.v[i], knots=samples.knots[i], eps=samples.eps[i])
        w = stick_weights(sticks, spec, sites_new)
        if tessellation:
            labels = np.argmax(w, axis=1)
        else:
            u01 = gen.random((n_new, 1))
            labels = np.minimum(
                (np.cumsum(w, axis=1) < u01).sum(axis=1), samples.m - 1
            )
        vals = offset_new + samples.theta[i][labels]
        if kind == "satellite":
            vals = vals + samples.bias[i][None, :]
            vals = vals + gen.standard_normal((n_new, d)) * np.sqrt(
                samples.sigma2[i, 0]
            )
        elif kind == "buoy":
            src = samples.sigma2.shape[1] - 1
            vals = vals + gen.standard_normal((n_new, d)) * np.sqrt(
                samples.sigma2[i, src]
            )
        out[i] = vals
    return PredictionSummary(
        mean=out.mean(axis=0),
        lo=np.quantile(out, 0.025, axis=0),
        hi=np.quantile(out, 0.975, axis=0),
        draws=out if return_draws else None,
    )


def replicate_ssb(samples: SsbSamples, data: ModelData, rng) -> np.ndarray:
    """Posterior predictive replicates of the observation vector,
    (n_draws, n_obs, d): stored per-draw labels + bias + fresh noise."""
    gen = as_generator(rng)
    n_draws = samples.n_draws
    site_theta = samples.theta[
        np.arange(n_draws)[:, None], samples.labels[:, data.site_id]
    ]
    reps = data.offset[None, :, :] + site_theta
    if data.has_bias:
        sat = (data.source == 0)[None, :, None]
        reps = reps + np.where(sat, samples.bias[:, None, :], 0.0)
    sd = np.sqrt(samples.sigma2[:, data.source, :])
    reps = reps + gen.standard_normal(reps.shape) * sd
    return reps


# ---------------------------------------------------------------------------
# persistence: draws.csv + schema.json (+ acceptance.json, pm_trace.csv)


def _ssb_layout(m, d, n_src, n_sites):
    return [
        ("chain", (1,)),
        ("a", (1,)),
        ("b", (1,)),
        ("lam", (1,)),
        ("bias", (d,)),
        ("sigma2", (n_src, d)),
        ("loc_cov", (d, d)),
        ("v", (m,)),
        ("theta", (m, d)),
        ("knots", (m, 2)),
        ("eps", (m, 2)),
        ("labels", (n_sites,)),
        ("pm_site", (n_sites,)),
    ]


def _krige_layout(d, n_src):
    return [
        ("chain", (1,)),
        ("lam", (1,)),
        ("bias", (d,)),
        ("sigma2", (n_src, d)),
        ("loc_cov", (d, d)),
    ]


def _column_names(layout):
    names = []
    for name, shape in layout:
        if int(np.prod(shape)) == 1:
            names.append(name)
        else:
            for idx in np.ndindex(*shape):
                names.append(name + "_" + "_".join(str(i + 1) for i in idx))
    return names


def save_samples(samples, dirpath, provenance: str | None = None):
    """Write draws.csv (one row per retained draw), schema.json,
    acceptance.json, and (stick-breaking fits) pm_trace.csv."""
    os.makedirs(dirpath, exist_ok=True)
    if samples.kind == "ssb":
        m, d = samples.m, samples.d
        n_src = samples.sigma2.shape[1]
        n_sites = samples.sites.shape[0]
        layout = _ssb_layout(m, d, n_src, n_sites)
        dims = {"m": m, "d": d, "n_src": n_src, "n_sites": n_sites}
    else:
        d = samples.bias.shape[1]
        n_src = samples.sigma2.shape[1]
        layout = _krige_layout(d, n_src)
        dims = {"d": d, "n_src": n_src, "n_sites": samples.sites.shape[0]}
    n = samples.n_draws
    cols = []
    for name, shape in layout:
        arr = np.asarray(getattr(samples, name), dtype=float)
        cols.append(arr.reshape(n, int(np.prod(shape))))
    flat = np.hstack(cols)
    header_lines = []
    if provenance:
        header_lines.append(f"# {provenance}")
    header_lines.append(",".join(_column_names(layout)))
    with open(os.path.join(dirpath, "draws.csv"), "w") as fh:
        fh.write("\n".join(header_lines) + "\n")
        for row in flat:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")
    schema = {
        "kind": samples.kind,
        "dims": dims,
        "columns": _column_names(layout),
        "sites": samples.sites.tolist(),
        "sites_raw": samples.sites_raw.tolist(),
        "config": samples.config,
    }
    if provenance:
        schema["_provenance"] = provenance
    with open(os.path.join(dirpath, "schema.json"), "w") as fh:
        json.dump(schema, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(dirpath, "acceptance.json"), "w") as fh:
        json.dump(samples.acceptance, fh, indent=1)
        fh.write("\n")
    if samples.kind == "ssb":
        with open(os.path.join(dirpath, "pm_trace.csv"), "w") as fh:
            fh.write("draw,mean_terminal_mass,max_terminal_mass\n")
            for i in range(n):
                fh.write(
                    f"{i},{samples.pm_site[i].mean():.17g},"
                    f"{samples.pm_site[i].max():.17g}\n"
                )


def load_samples(dirpath):
    """Inverse of save_samples; returns SsbSamples or krige.KrigeSamples."""
    with open(os.path.join(dirpath, "schema.json")) as fh:
        schema = json.load(fh)
    rows = []
    with open(os.path.join(dirpath, "draws.csv")) as fh:
        header = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = line.split(",")
                continue
            rows.append([float(x) for x in line.split(",")])
    flat = np.asarray(rows)
    with open(os.path.join(dirpath, "acceptance.json")) as fh:
        acceptance = json.load(fh)
    dims = schema["dims"]
    kind = schema["kind"]
    if kind == "ssb":
        layout = _ssb_layout(dims["m"], dims["d"], dims["n_src"], dims["n_sites"])
    else:
        layout = _krige_layout(dims["d"], dims["n_src"])
    n = flat.shape[0]
    fields = {}
    pos = 0
    for name, shape in layout:
        width = int(np.prod(shape))
        block = flat[:, pos : pos + width]
        pos += width
        if width == 1 and shape == (1,):
            fields[name] = block[:, 0]
        else:
            fields[name] = block.reshape((n,) + shape)
    fields["chain"] = fields["chain"].astype(np.int64)
    sites = np.asarray(schema["sites"], dtype=float)
    sites_raw = np.asarray(schema["sites_raw"], dtype=float)
    if kind == "ssb":
        return SsbSamples(
            chain=fields["chain"],
            v=fields["v"],
            theta=fields["theta"],
            knots=fields["knots"],
            eps=fields["eps"],
            labels=fields["labels"].astype(np.int64),
            sigma2=fields["sigma2"],
            loc_cov=fields["loc_cov"],
            bias=fields["bias"],
            a=fields["a"],
            b=fields["b"],
            lam=fields["lam"],
            pm_site=fields["pm_site"],
            sites=sites,
            sites_raw=sites_raw,
            acceptance=acceptance,
            config=schema["config"],
        )
    from .krige import KrigeSamples

    return KrigeSamples(
        chain=fields["chain"],
        lam=fields["lam"],
        bias=fields["bias"],
        sigma2=fields["sigma2"],
        loc_cov=fields["loc_cov"],
        sites=sites,
        sites_raw=sites_raw,
        acceptance=acceptance,
        config=schema["config"],
    )
