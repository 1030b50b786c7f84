"""Stationary Gaussian random field baseline (universal kriging flavor).

Same observation structure as the stick-breaking model (offset field +
satellite bias + noise), but the spatial residual is a mean-zero Gaussian
process with separable covariance

    Cov(R_c(s), R_{c'}(s')) = loc_cov[c, c'] * exp(-||s - s'|| / lam),

marginalized analytically, so the sampler works on the collapsed Gaussian
likelihood of the stacked observed scalars.  Metropolis-within-Gibbs:
lam and the error variances move by (log-)random walks, loc_cov by a
random walk on its Cholesky factor (log-diagonal), and the bias is a
conjugate Gaussian draw under the marginalized covariance.  Priors match
the stick-breaking model: variances ~ InvGamma(shape, rate), loc_cov ~
InvWishart(df, scale * I), bias ~ N(0, bias_sd^2), lam ~ U(0, lam_max).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .domain import ConfigError, Dataset, NumericError, RngContract
from .inference import (
    McmcConfig,
    ModelData,
    PredictionSummary,
    Priors,
    _invgamma_draw,
    build_model_data,
)
from .kernels import as_generator


@dataclass
class KrigeState:
    lam: float
    sigma2: np.ndarray  # (n_src, d)
    loc_cov: np.ndarray  # (d, d)
    bias: np.ndarray  # (d,)

    def copy(self) -> "KrigeState":
        return KrigeState(
            lam=self.lam,
            sigma2=self.sigma2.copy(),
            loc_cov=self.loc_cov.copy(),
            bias=self.bias.copy(),
        )


@dataclass
class _Stack:
    """Observed scalars flattened out of (n_obs, d) with their metadata."""

    y: np.ndarray
    offset: np.ndarray
    comp: np.ndarray
    src: np.ndarray
    site: np.ndarray
    sat: np.ndarray  # bias indicator per scalar
    obs_index: np.ndarray
    site_dist: np.ndarray  # (n_sites, n_sites)

    @property
    def n(self) -> int:
        return len(self.y)


def _stack_scalars(data: ModelData) -> _Stack:
    obs_i, comp = np.nonzero(data.mask)
    diff = data.sites[:, None, :] - data.sites[None, :, :]
    return _Stack(
        y=data.y[obs_i, comp],
        offset=data.offset[obs_i, comp],
        comp=comp,
        src=data.source[obs_i],
        site=data.site_id[obs_i],
        sat=((data.source[obs_i] == 0) & data.has_bias).astype(float),
        obs_index=obs_i,
        site_dist=np.linalg.norm(diff, axis=2),
    )


def _cov_matrix(stack: _Stack, state: KrigeState) -> np.ndarray:
    corr = np.exp(-stack.site_dist / state.lam)
    k = (
        state.loc_cov[stack.comp[:, None], stack.comp[None, :]]
        * corr[stack.site[:, None], stack.site[None, :]]
    )
    k[np.diag_indices_from(k)] += state.sigma2[stack.src, stack.comp]
    return k


def _chol_with_jitter(k: np.ndarray) -> np.ndarray:
    """Cholesky with a single retry adding 1e-10 x mean-diagonal jitter."""
    try:
        return np.linalg.cholesky(k)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * float(np.mean(np.diag(k)))
        try:
            return np.linalg.cholesky(k + jitter * np.eye(k.shape[0]))
        except np.linalg.LinAlgError:
            raise NumericError(
                "covariance factorization failed even after jitter"
            )


def _mean_vector(stack: _Stack, state: KrigeState) -> np.ndarray:
    return stack.offset + state.bias[stack.comp] * stack.sat


def marginal_loglik(data: ModelData, state: KrigeState) -> float:
    """Collapsed Gaussian log likelihood of the observed scalars."""
    stack = _stack_scalars(data)
    return _loglik_stack(stack, state)[0]


def _loglik_stack(stack: _Stack, state: KrigeState):
    if stack.n == 0:
        return 0.0, None
    from scipy.linalg import solve_triangular

    k = _cov_matrix(stack, state)
    el = _chol_with_jitter(k)
    r = stack.y - _mean_vector(stack, state)
    z = solve_triangular(el, r, lower=True)
    ll = -0.5 * (
        stack.n * np.log(2.0 * np.pi)
        + 2.0 * float(np.sum(np.log(np.diag(el))))
        + float(z @ z)
    )
    return ll, el


def _invwish_logkernel(s: np.ndarray, df: float, scale: np.ndarray) -> float:
    d = s.shape[0]
    sign, logdet = np.linalg.slogdet(s)
    if sign <= 0:
        return -np.inf
    return float(
        -(df + d + 1.0) / 2.0 * logdet - 0.5 * np.trace(scale @ np.linalg.inv(s))
    )


def _invgamma_logkernel(x: float, shape: float, rate: float) -> float:
    if x <= 0:
        return -np.inf
    return float(-(shape + 1.0) * np.log(x) - rate / x)


class KrigeSampler:
    """Metropolis-within-Gibbs for the collapsed Gaussian field model."""

    def __init__(self, data: ModelData, mcmc: McmcConfig, priors: Priors):
        self.data = data
        self.mcmc = mcmc
        self.priors = priors
        self.stack = _stack_scalars(data)
        self.scales = {"lam": 0.1, "sigma2": 0.5, "loc_cov": 0.2}
        self.accepts = {k: 0 for k in self.scales}
        self.tries = {k: 0 for k in self.scales}
        self.total_accepts = {k: 0 for k in self.scales}
        self.total_tries = {k: 0 for k in self.scales}
        self._ll = None
        self._chol = None

    def init_state(self, gen) -> KrigeState:
        data = self.data
        resid = np.where(data.mask, data.y - data.offset, np.nan)
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pooled = np.nanvar(resid, axis=0)
        pooled = np.where(np.isfinite(pooled) & (pooled > 0), pooled, 1.0)
        state = KrigeState(
            lam=0.3 * self.priors.lam_max,
            sigma2=np.tile(np.maximum(pooled / 2.0, 1e-4), (data.n_src, 1)),
            loc_cov=np.diag(np.maximum(pooled / 2.0, 1e-4)),
            bias=np.zeros(data.d),
        )
        self._ll, self._chol = _loglik_stack(self.stack, state)
        return state

    def _try_move(self, name, state, cand: KrigeState, extra_logratio, gen) -> bool:
        self.tries[name] += 1
        try:
            ll_new, chol_new = _loglik_stack(self.stack, cand)
        except NumericError:
            return False
        delta = ll_new - self._ll + extra_logratio
        if np.isfinite(delta) and np.log(gen.random()) < delta:
            state.lam = cand.lam
            state.sigma2 = cand.sigma2
            state.loc_cov = cand.loc_cov
            state.bias = cand.bias
            self._ll, self._chol = ll_new, chol_new
            self.accepts[name] += 1
            return True
        return False

    def update_lam(self, state, gen):
        prop = state.lam + self.scales["lam"] * gen.standard_normal()
        if not (0.0 < prop <= self.priors.lam_max):
            self.tries["lam"] += 1
            return
        cand = state.copy()
        cand.lam = float(prop)
        self._try_move("lam", state, cand, 0.0, gen)

    def update_sigma2(self, state, gen):
        pr = self.priors
        for s in range(self.data.n_src):
            for c in range(self.data.d):
                cur = state.sigma2[s, c]
                prop = cur * np.exp(self.scales["sigma2"] * gen.standard_normal())
                cand = state.copy()
                cand.sigma2[s, c] = prop
                logratio = (
                    _invgamma_logkernel(prop, pr.variance_shape, pr.variance_rate)
                    - _invgamma_logkernel(cur, pr.variance_shape, pr.variance_rate)
                    + np.log(prop)
                    - np.log(cur)
                )
                self._try_move("sigma2", state, cand, logratio, gen)

    def update_loc_cov(self, state, gen):
        pr = self.priors
        d = self.data.d
        if d == 1:
            cur = float(state.loc_cov[0, 0])
            prop = cur * np.exp(self.scales["loc_cov"] * gen.standard_normal())
            cand = state.copy()
            cand.loc_cov = np.array([[prop]])
            logratio = (
                _invgamma_logkernel(prop, pr.variance_shape, pr.variance_rate)
                - _invgamma_logkernel(cur, pr.variance_shape, pr.variance_rate)
                + np.log(prop)
                - np.log(cur)
            )
            self._try_move("loc_cov", state, cand, logratio, gen)
            return
        el = np.linalg.cholesky(state.loc_cov)
        # walk on (log L11, L21, log L22); log-Jacobian of Sigma -> params
        # is 3 log L11 + 2 log L22 up to a constant
        z = self.scales["loc_cov"] * gen.standard_normal(3)
        l11 = el[0, 0] * np.exp(z[0])
        l21 = el[1, 0] + z[1]
        l22 = el[1, 1] * np.exp(z[2])
        el_new = np.array([[l11, 0.0], [l21, l22]])
        cand = state.copy()
        cand.loc_cov = el_new @ el_new.T
        prior_scale = pr.sigma_scale * np.eye(2)
        logratio = (
            _invwish_logkernel(cand.loc_cov, pr.sigma_df, prior_scale)
            - _invwish_logkernel(state.loc_cov, pr.sigma_df, prior_scale)
            + 3.0 * (np.log(l11) - np.log(el[0, 0]))
            + 2.0 * (np.log(l22) - np.log(el[1, 1]))
        )
        self._try_move("loc_cov", state, cand, logratio, gen)

    def update_bias(self, state, gen):
        data, pr = self.data, self.priors
        if not data.has_bias:
            return
        stack = self.stack
        d = data.d
        if stack.n == 0 or self._chol is None or stack.sat.sum() == 0:
            state.bias = pr.bias_sd * gen.standard_normal(d)
            self._ll, self._chol = _loglik_stack(stack, state)
            return
        from scipy.linalg import solve_triangular

        a = np.zeros((stack.n, d))
        a[np.arange(stack.n), stack.comp] = stack.sat
        r0 = stack.y - stack.offset
        el = self._chol
        wa = solve_triangular(el, a, lower=True)
        wr = solve_triangular(el, r0, lower=True)
        prec = wa.T @ wa + np.eye(d) / pr.bias_sd**2
        cov = np.linalg.inv(prec)
        mean = cov @ (wa.T @ wr)
        state.bias = mean + np.linalg.cholesky(cov) @ gen.standard_normal(d)
        # mean changed: refresh the cached quadratic form
        r = stack.y - _mean_vector(stack, state)
        z = solve_triangular(el, r, lower=True)
        self._ll = -0.5 * (
            stack.n * np.log(2.0 * np.pi)
            + 2.0 * float(np.sum(np.log(np.diag(el))))
            + float(z @ z)
        )

    def sweep(self, state, gen):
        self.update_lam(state, gen)
        self.update_sigma2(state, gen)
        self.update_loc_cov(state, gen)
        self.update_bias(state, gen)

    def _adapt(self):
        for k in self.scales:
            if self.tries[k] == 0:
                continue
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
        mcmc = self.mcmc
        state = self.init_state(gen)
        keep = {k: [] for k in ("lam", "sigma2", "loc_cov", "bias")}
        for it in range(mcmc.n_iter):
            self.sweep(state, gen)
            in_burn = it < mcmc.burn_in
            if in_burn and mcmc.adapt and (it + 1) % mcmc.adapt_interval == 0:
                self._adapt()
            if not in_burn and (it - mcmc.burn_in + 1) % mcmc.thin == 0:
                keep["lam"].append(state.lam)
                keep["sigma2"].append(state.sigma2.copy())
                keep["loc_cov"].append(np.atleast_2d(state.loc_cov).copy())
                keep["bias"].append(state.bias.copy())
        for k in self.scales:
            self.total_accepts[k] += self.accepts[k]
            self.total_tries[k] += self.tries[k]
            self.accepts[k] = 0
            self.tries[k] = 0
        return {k: np.asarray(v) for k, v in keep.items()}


@dataclass(frozen=True)
class KrigeSamples:
    chain: np.ndarray
    lam: np.ndarray
    bias: np.ndarray
    sigma2: np.ndarray
    loc_cov: np.ndarray
    sites: np.ndarray
    sites_raw: np.ndarray
    acceptance: dict
    config: dict
    kind: str = "krige"

    @property
    def n_draws(self) -> int:
        return len(self.lam)


def fit_krige(
    dataset: Dataset,
    offset_field,
    mcmc: McmcConfig,
    priors: Priors,
    rng: RngContract,
    response_dim: int = 2,
) -> KrigeSamples:
    """Posterior sampling for the Gaussian baseline (chains stacked)."""
    data = build_model_data(dataset, offset_field, response_dim)
    chains = []
    acc = {}
    for c in range(mcmc.n_chains):
        sampler = KrigeSampler(data, mcmc, priors)
        draws = sampler.run(rng.substream(c))
        draws["chain"] = np.full(mcmc.n_keep, c, dtype=np.int64)
        chains.append(draws)
        for k in sampler.total_tries:
            if sampler.total_tries[k]:
                acc.setdefault(k, []).append(
                    sampler.total_accepts[k] / sampler.total_tries[k]
                )
    stacked = {k: np.concatenate([ch[k] for ch in chains]) for k in chains[0]}
    return KrigeSamples(
        chain=stacked["chain"],
        lam=stacked["lam"],
        bias=stacked["bias"],
        sigma2=stacked["sigma2"],
        loc_cov=stacked["loc_cov"],
        sites=data.sites,
        sites_raw=data.sites_raw,
        acceptance={k: float(np.mean(v)) for k, v in acc.items()},
        config={
            "response_dim": response_dim,
            "n_src": data.n_src,
            "mcmc": dataclasses.asdict(mcmc),
            "priors": dataclasses.asdict(priors),
        },
    )


def _state_from_draw(samples: KrigeSamples, i: int) -> KrigeState:
    return KrigeState(
        lam=float(samples.lam[i]),
        sigma2=samples.sigma2[i],
        loc_cov=np.atleast_2d(samples.loc_cov[i]),
        bias=samples.bias[i],
    )


def predict_krige(
    samples: KrigeSamples,
    data: ModelData,
    sites_new,
    offset_new,
    rng,
    kind: str = "latent",
    return_draws: bool = False,
) -> PredictionSummary:
    """Posterior predictive summary at new (normalized) sites.

    Per retained draw the latent field is conditioned on the observed
    scalars; each new scalar gets its marginal conditional mean/variance
    and one sampled value (marginal intervals, which is what the per-site
    summary reports).  kind as in predict_ssb.
    """
    if kind not in ("latent", "satellite", "buoy"):
        raise ConfigError(f"unknown prediction kind {kind!r}")
    from scipy.linalg import solve_triangular

    gen = as_generator(rng)
    stack = _stack_scalars(data)
    sites_new = np.atleast_2d(np.asarray(sites_new, dtype=float))
    n_new = sites_new.shape[0]
    d = data.d
    offset_new = np.zeros((n_new, d)) if offset_new is None else np.asarray(
        offset_new, dtype=float
    ).reshape(n_new, d)
    comp_new = np.tile(np.arange(d), n_new)
    site_rep = np.repeat(np.arange(n_new), d)
    cross_dist = np.linalg.norm(
        sites_new[:, None, :] - data.sites[None, :, :], axis=2
    )
    n_draws = samples.n_draws
    out = np.empty((n_draws, n_new, d))
    for i in range(n_draws):
        state = _state_from_draw(samples, i)
        mu_new = offset_new[site_rep, comp_new]
        if kind == "satellite" and data.has_bias:
            mu_new = mu_new + state.bias[comp_new]
        prior_var = state.loc_cov[comp_new, comp_new]
        if stack.n:
            k_obs = _cov_matrix(stack, state)
            el = _chol_with_jitter(k_obs)
            r = stack.y - _mean_vector(stack, state)
            alpha = solve_triangular(
                el.T, solve_triangular(el, r, lower=True), lower=False
            )
            kx = (
                state.loc_cov[comp_new[:, None], stack.comp[None, :]]
                * np.exp(-cross_dist / state.lam)[site_rep[:, None], stack.site[None, :]]
            )
            mean = mu_new + kx @ alpha
            w = solve_triangular(el, kx.T, lower=True)
            var = np.maximum(prior_var - np.sum(w * w, axis=0), 0.0)
        else:
            mean = mu_new
            var = prior_var
        if kind == "satellite":
            var = var + state.sigma2[0, comp_new]
        elif kind == "buoy":
            var = var + state.sigma2[data.n_src - 1, comp_new]
        draw = mean + np.sqrt(var) * gen.standard_normal(n_new * d)
        out[i] = draw.reshape(n_new, d)
    return PredictionSummary(
        mean=out.mean(axis=0),
        lo=np.quantile(out, 0.025, axis=0),
        hi=np.quantile(out, 0.975, axis=0),
        draws=out if return_draws else None,
    )


def replicate_krige(samples: KrigeSamples, data: ModelData, rng) -> np.ndarray:
    """Posterior predictive replicates at the observation scalars,
    (n_draws, n_obs, d) with zeros at masked components.

    Per draw: joint conditional draw of the latent residual field at the
    observed scalars, plus bias and fresh noise.
    """
    from scipy.linalg import solve_triangular

    gen = as_generator(rng)
    stack = _stack_scalars(data)
    n_draws = samples.n_draws
    out = np.zeros((n_draws, data.n_obs, data.d))
    corr_idx = (stack.site[:, None], stack.site[None, :])
    comp_idx = (stack.comp[:, None], stack.comp[None, :])
    for i in range(n_draws):
        state = _state_from_draw(samples, i)
        corr = np.exp(-stack.site_dist / state.lam)
        k_lat = state.loc_cov[comp_idx] * corr[corr_idx]
        k_obs = k_lat + np.diag(state.sigma2[stack.src, stack.comp])
        el = _chol_with_jitter(k_obs)
        r = stack.y - _mean_vector(stack, state)
        alpha = solve_triangular(
            el.T, solve_triangular(el, r, lower=True), lower=False
        )
        cond_mean = k_lat @ alpha
        w = solve_triangular(el, k_lat, lower=True)
        cond_cov = k_lat - w.T @ w
        el_c = _chol_with_jitter(cond_cov + 1e-12 * np.eye(stack.n))
        lat = cond_mean + el_c @ gen.standard_normal(stack.n)
        noise = np.sqrt(state.sigma2[stack.src, stack.comp]) * gen.standard_normal(
            stack.n
        )
        out[i, stack.obs_index, stack.comp] = _mean_vector(stack, state) + lat + noise
    return out
