"""Mixture-model sampler: conjugate conditionals against numerical
posteriors, block updates, fitting, prediction, persistence."""

import numpy as np
import pytest
from scipy import stats

from ssbwind.domain import (
    ConfigError,
    NoResidual,
    RngContract,
    TruthConfig,
    generate_synthetic,
    observation_arrays,
)
from ssbwind.holland import HollandParams, field_at
from ssbwind.inference import (
    McmcConfig,
    Priors,
    SsbSampler,
    SsbState,
    bias_conditional_params,
    build_model_data,
    empty_model_data,
    fit_ssb,
    full_conditional_label,
    invgamma_posterior_params,
    load_samples,
    predict_ssb,
    replicate_ssb,
    save_samples,
    sigma_posterior_params,
    theta_conditional_params,
)
from ssbwind.kernels import KernelSpec
from ssbwind.ssb import SSBConfig, StickSet, stick_weights

from conftest import BOUNDS, CENTER, make_dataset

UNIF = KernelSpec("uniform", "fixed", 0.4)


def tiny_scene(seed=0, grid=(6, 5), n_buoy=4, residual=None, **kw):
    hp = HollandParams(center=CENTER)
    cfg = TruthConfig(
        holland=hp,
        bounds=BOUNDS,
        grid_shape=grid,
        n_buoy=n_buoy,
        residual=residual or NoResidual(),
        **kw,
    )
    ds, truth = generate_synthetic(cfg, RngContract(seed))
    arr = observation_arrays(ds)
    offs = field_at(hp, arr["lon"], arr["lat"])
    return ds, truth, offs


# ---------------------------------------------------------------------------
# model data assembly


def test_build_model_data_shapes(small_dataset):
    data = build_model_data(small_dataset)
    assert data.y.shape == (9, 2)
    assert data.mask.all()
    assert data.n_src == 2 and data.has_bias
    assert data.sites.shape[0] == len(np.unique(data.site_id))
    np.testing.assert_array_equal(
        data.sites[data.site_id],
        np.column_stack(
            [observation_arrays(small_dataset)["s1"], observation_arrays(small_dataset)["s2"]]
        ),
    )


def test_build_model_data_univariate(small_dataset):
    data = build_model_data(small_dataset, response_dim=1)
    assert data.y.shape == (9, 1)
    assert data.n_src == 1 and not data.has_bias
    assert (data.source == 0).all()


def test_build_model_data_rejects_bad_offset(small_dataset):
    from ssbwind.domain import NumericError

    bad = np.full((9, 2), np.nan)
    with pytest.raises(NumericError):
        build_model_data(small_dataset, bad)


# ---------------------------------------------------------------------------
# conjugate conditionals against grid quadrature (independent oracles)


def numeric_moments_1d(logpost, grid):
    lp = logpost(grid)
    lp -= lp.max()
    w = np.exp(lp)
    z = np.trapezoid(w, grid)
    mean = np.trapezoid(grid * w, grid) / z
    var = np.trapezoid((grid - mean) ** 2 * w, grid) / z
    return mean, var


def test_theta_conditional_univariate_matches_grid():
    loc_cov = np.array([[2.3]])
    resid = np.array([[1.2], [-0.4], [0.7]])
    mask = np.ones((3, 1), dtype=bool)
    sig = np.array([[0.5], [0.8], [0.3]])
    mean, cov = theta_conditional_params(loc_cov, resid, mask, sig)

    def logpost(th):
        lp = -0.5 * th**2 / 2.3
        for i in range(3):
            lp = lp - 0.5 * (resid[i, 0] - th) ** 2 / sig[i, 0]
        return lp

    grid = np.linspace(-8, 8, 20001)
    gmean, gvar = numeric_moments_1d(logpost, grid)
    assert mean[0] == pytest.approx(gmean, abs=1e-6)
    assert cov[0, 0] == pytest.approx(gvar, abs=1e-6)


def test_theta_conditional_bivariate_masked_matches_grid():
    loc_cov = np.array([[2.0, 0.6], [0.6, 1.5]])
    resid = np.array([[1.0, -0.5], [0.3, 2.0], [-1.2, 0.4]])
    mask = np.array([[True, True], [True, False], [False, True]])
    sig = np.array([[0.5, 0.7], [0.4, 0.9], [0.6, 0.8]])
    mean, cov = theta_conditional_params(loc_cov, resid, mask, sig)

    g = np.linspace(-7, 7, 1401)
    t1, t2 = np.meshgrid(g, g, indexing="ij")
    prec0 = np.linalg.inv(loc_cov)
    lp = -0.5 * (
        prec0[0, 0] * t1**2 + 2 * prec0[0, 1] * t1 * t2 + prec0[1, 1] * t2**2
    )
    for i in range(3):
        if mask[i, 0]:
            lp = lp - 0.5 * (resid[i, 0] - t1) ** 2 / sig[i, 0]
        if mask[i, 1]:
            lp = lp - 0.5 * (resid[i, 1] - t2) ** 2 / sig[i, 1]
    w = np.exp(lp - lp.max())
    z = np.trapezoid(np.trapezoid(w, g, axis=1), g)
    m1 = np.trapezoid(np.trapezoid(w * t1, g, axis=1), g) / z
    m2 = np.trapezoid(np.trapezoid(w * t2, g, axis=1), g) / z
    v11 = np.trapezoid(np.trapezoid(w * (t1 - m1) ** 2, g, axis=1), g) / z
    v22 = np.trapezoid(np.trapezoid(w * (t2 - m2) ** 2, g, axis=1), g) / z
    v12 = np.trapezoid(np.trapezoid(w * (t1 - m1) * (t2 - m2), g, axis=1), g) / z
    assert mean[0] == pytest.approx(m1, abs=1e-6)
    assert mean[1] == pytest.approx(m2, abs=1e-6)
    assert cov[0, 0] == pytest.approx(v11, abs=1e-6)
    assert cov[1, 1] == pytest.approx(v22, abs=1e-6)
    assert cov[0, 1] == pytest.approx(v12, abs=1e-6)


def test_variance_posterior_matches_grid():
    shape0, rate0 = 0.01, 0.01
    resid = np.array([0.9, -1.4, 0.3])
    a1, b1 = invgamma_posterior_params(shape0, rate0, np.sum(resid**2), len(resid))
    assert a1 == pytest.approx(1.51) and b1 == pytest.approx(0.01 + 0.5 * np.sum(resid**2))

    def logpost(x):
        return stats.invgamma.logpdf(x, a=shape0, scale=rate0) + np.sum(
            stats.norm.logpdf(resid[:, None], 0.0, np.sqrt(x[None, :])), axis=0
        )

    # compare normalized density and distribution function at probe points
    # (the posterior tail is heavy, x^{-a1-1} with a1 = 1.51, so bounded
    # functionals are the honest quadrature targets)
    u = np.linspace(np.log(1e-6), np.log(1e8), 400001)
    x = np.exp(u)
    lp = logpost(x) + u  # Jacobian of the log transform
    w = np.exp(lp - lp.max())
    z = np.trapezoid(w, u)
    probes = np.array([0.2, 0.7, 1.5, 4.0])
    numeric = np.exp(
        np.interp(np.log(probes), u, lp - lp.max())
    ) / z / probes  # back to density in x
    analytic = stats.invgamma.pdf(probes, a=a1, scale=b1)
    np.testing.assert_allclose(numeric, analytic, rtol=1e-6)
    h = u[1] - u[0]
    cdf_grid = np.concatenate([[0.0], np.cumsum((w[1:] + w[:-1]) * 0.5 * h)]) / z
    num_cdf = np.interp(np.log(probes), u, cdf_grid)
    np.testing.assert_allclose(
        num_cdf, stats.invgamma.cdf(probes, a=a1, scale=b1), atol=1e-6
    )


def test_bias_conditional_matches_grid():
    resid = np.array([2.1, 1.7, 2.6])
    sig = np.array([0.5, 0.9, 0.4])
    mean, var = bias_conditional_params(10.0, resid, sig)

    def logpost(a):
        lp = -0.5 * a**2 / 100.0
        for r, s in zip(resid, sig):
            lp = lp - 0.5 * (r - a) ** 2 / s
        return lp

    grid = np.linspace(-10, 14, 40001)
    gmean, gvar = numeric_moments_1d(logpost, grid)
    assert mean == pytest.approx(gmean, abs=1e-6)
    assert var == pytest.approx(gvar, abs=1e-6)


def test_loc_cov_posterior_params():
    theta = np.array([[0.5, -1.0], [1.2, 0.3], [-0.7, 0.9]])
    df, scale = sigma_posterior_params(0.1, 0.1 * np.eye(2), theta)
    assert df == pytest.approx(3.1)
    np.testing.assert_allclose(scale, 0.1 * np.eye(2) + theta.T @ theta, atol=1e-14)


def test_label_conditional_brute_force(small_dataset):
    data = build_model_data(small_dataset)
    m = 4
    gen = RngContract(8).generator()
    state = SsbState(
        v=np.append(gen.uniform(0.2, 0.8, m - 1), 1.0),
        theta=gen.normal(0, 5, (m, 2)),
        knots=gen.uniform(0, 1, (m, 2)),
        eps=np.full((m, 2), 0.4),
        labels=np.zeros(data.n_sites, dtype=np.int64),
        sigma2=np.array([[0.5, 0.8], [0.3, 0.6]]),
        loc_cov=np.eye(2) * 4.0,
        bias=np.array([-2.0, 1.0]),
        a=1.0,
        b=1.0,
        lam=0.4,
    )
    site = int(data.site_id[0])
    got = full_conditional_label(data, state, UNIF, site)

    # independent recomputation with explicit loops
    sticks = StickSet(v=state.v, knots=state.knots, eps=state.eps)
    w = stick_weights(sticks, UNIF, data.sites[site : site + 1])[0]
    rows = np.where(data.site_id == site)[0]
    post = np.zeros(m)
    for j in range(m):
        ll = 0.0
        for i in rows:
            for c in range(2):
                if data.mask[i, c]:
                    r = data.y[i, c] - data.offset[i, c]
                    if data.source[i] == 0:
                        r -= state.bias[c]
                    s2 = state.sigma2[data.source[i], c]
                    ll += -0.5 * (r - state.theta[j, c]) ** 2 / s2
        post[j] = w[j] * np.exp(ll)
    post /= post.sum()
    np.testing.assert_allclose(got, post, atol=1e-12)
    assert got.sum() == pytest.approx(1.0, abs=1e-12)


def test_label_conditional_no_observations_is_stick_weights():
    data = empty_model_data()
    data = data.__class__(**{**data.__dict__, "sites": np.array([[0.5, 0.5]]),
                             "sites_raw": np.array([[0.0, 0.0]])})
    gen = RngContract(9).generator()
    m = 5
    state = SsbState(
        v=np.append(gen.uniform(0.2, 0.8, m - 1), 1.0),
        theta=gen.normal(0, 1, (m, 2)),
        knots=gen.uniform(0, 1, (m, 2)),
        eps=np.full((m, 2), 0.4),
        labels=np.zeros(1, dtype=np.int64),
        sigma2=np.ones((2, 2)),
        loc_cov=np.eye(2),
        bias=np.zeros(2),
        a=1.0,
        b=1.0,
        lam=0.4,
    )
    got = full_conditional_label(data, state, UNIF, 0)
    sticks = StickSet(v=state.v, knots=state.knots, eps=state.eps)
    w = stick_weights(sticks, UNIF, data.sites[:1])[0]
    np.testing.assert_allclose(got, w / w.sum(), atol=1e-14)


# ---------------------------------------------------------------------------
# block updates drawn repeatedly match their conditionals (Monte Carlo)


def test_update_theta_matches_conditional_moments(small_dataset):
    data = build_model_data(small_dataset)
    cfg = SSBConfig(m=3, kernel=UNIF)
    sampler = SsbSampler(data, cfg, McmcConfig(n_iter=4, burn_in=2, thin=1), Priors())
    gen = RngContract(10).generator()
    state = sampler.init_state(gen)
    state.labels[:] = np.arange(data.n_sites) % 3
    draws = np.empty((20_000, 3, 2))
    for k in range(draws.shape[0]):
        sampler.update_theta(state, gen)
        draws[k] = state.theta
    resid = data.y - data.offset
    sat = (data.source == 0)[:, None]
    resid = resid - np.where(sat, state.bias[None, :], 0.0)
    for j in range(3):
        members = state.labels[data.site_id] == j
        mean, cov = theta_conditional_params(
            state.loc_cov,
            resid[members],
            data.mask[members],
            state.sigma2[data.source[members]],
        )
        n = draws.shape[0]
        se = np.sqrt(np.diag(cov) / n)
        err = np.abs(draws[:, j].mean(axis=0) - mean)
        assert (err <= 4 * se + 1e-3).all(), (j, err, se)
        emp = np.cov(draws[:, j].T)
        cov_se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / n)
        assert (np.abs(emp - cov) <= 5 * cov_se).all(), (j, emp, cov)


# ---------------------------------------------------------------------------
# end-to-end fitting


def test_fit_runs_and_validates():
    ds, _, offs = tiny_scene(seed=1, sat_noise_sd=(1.0, 1.0), buoy_noise_sd=(0.5, 0.5))
    cfg = SSBConfig(m=10, kernel=KernelSpec("uniform", "expo", 0.3))
    mcmc = McmcConfig(n_iter=120, burn_in=60, thin=2, check_invariants=True)
    with pytest.warns(UserWarning):
        samples = fit_ssb(ds, offs, cfg, mcmc, Priors(), RngContract(2))
    assert samples.n_draws == 30
    assert samples.theta.shape == (30, 10, 2)
    assert samples.v.shape == (30, 10)
    assert (samples.v[:, -1] == 1.0).all()
    assert samples.sigma2.shape == (30, 2, 2)
    assert (samples.sigma2 > 0).all()
    assert samples.pm_site.shape[0] == 30
    for v in samples.acceptance.values():
        assert 0.0 <= v <= 1.0


def test_fit_univariate_mode():
    ds, _, offs = tiny_scene(seed=3)
    cfg = SSBConfig(m=8, kernel=UNIF)
    mcmc = McmcConfig(n_iter=80, burn_in=40, thin=2)
    samples = fit_ssb(
        ds, offs[:, :1], cfg, mcmc, Priors(), RngContract(4), response_dim=1,
        pm_warn=1.0,
    )
    assert samples.theta.shape == (20, 8, 1)
    assert samples.loc_cov.shape == (20, 1, 1)
    # single-source mode has no bias block: the stored value never moves
    assert np.all(samples.bias == samples.bias[0])


def test_mcmc_config_validation():
    with pytest.raises(ConfigError):
        McmcConfig(n_iter=100, burn_in=150, thin=1)
    with pytest.raises(ConfigError):
        McmcConfig(n_iter=100, burn_in=50, thin=7)  # (100-50) % 7 != 0
    with pytest.raises(ConfigError):
        McmcConfig(n_iter=100, burn_in=50, thin=1, update_blocks=("labels", "bogus"))


def test_multiple_chains_concatenate():
    ds, _, offs = tiny_scene(seed=5)
    cfg = SSBConfig(m=6, kernel=UNIF)
    mcmc = McmcConfig(n_iter=60, burn_in=30, thin=3, n_chains=2)
    samples = fit_ssb(ds, offs, cfg, mcmc, Priors(), RngContract(6), pm_warn=1.0)
    assert samples.n_draws == 20
    np.testing.assert_array_equal(np.unique(samples.chain), [0, 1])
    assert (samples.chain == 0).sum() == 10


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip(tmp_path):
    ds, _, offs = tiny_scene(seed=7)
    cfg = SSBConfig(m=5, kernel=KernelSpec("sqexp", "invgamma", 0.4), a=2.0, b=1.5)
    mcmc = McmcConfig(n_iter=40, burn_in=20, thin=2)
    samples = fit_ssb(ds, offs, cfg, mcmc, Priors(), RngContract(8), pm_warn=1.0)
    save_samples(samples, tmp_path / "post", provenance="round trip")
    loaded = load_samples(tmp_path / "post")
    assert loaded.kind == "ssb"
    for field in ("v", "theta", "knots", "eps", "labels", "sigma2", "loc_cov",
                  "bias", "a", "b", "lam", "chain", "pm_site"):
        np.testing.assert_array_equal(
            getattr(samples, field), getattr(loaded, field), err_msg=field
        )
    np.testing.assert_array_equal(samples.sites, loaded.sites)
    assert loaded.config["kernel"]["family"] == "sqexp"
    assert (tmp_path / "post" / "pm_trace.csv").exists()


# ---------------------------------------------------------------------------
# prediction and replication


def test_predict_shapes_and_interval_order():
    ds, _, offs = tiny_scene(seed=9)
    cfg = SSBConfig(m=6, kernel=UNIF)
    samples = fit_ssb(
        ds, offs, cfg, McmcConfig(n_iter=60, burn_in=30, thin=2), Priors(),
        RngContract(10), pm_warn=1.0,
    )
    sites_new = np.array([[0.5, 0.5], [0.1, 0.9], [0.8, 0.2]])
    offn = np.zeros((3, 2))
    for kind in ("latent", "satellite", "buoy"):
        summary = predict_ssb(samples, sites_new, offn, RngContract(11), kind=kind)
        assert summary.mean.shape == (3, 2)
        assert (summary.lo <= summary.mean + 1e-12).all()
        assert (summary.hi >= summary.mean - 1e-12).all()


def test_predict_satellite_kind_shifts_by_bias():
    ds, _, offs = tiny_scene(seed=12, bias=(-6.0, 3.0), grid=(7, 6))
    cfg = SSBConfig(m=8, kernel=UNIF)
    samples = fit_ssb(
        ds, offs, cfg, McmcConfig(n_iter=400, burn_in=200, thin=1), Priors(),
        RngContract(13), pm_warn=1.0,
    )
    sites_new = np.array([[0.5, 0.5]])
    offn = np.zeros((1, 2))
    lat = predict_ssb(samples, sites_new, offn, RngContract(14), kind="latent")
    sat = predict_ssb(samples, sites_new, offn, RngContract(14), kind="satellite")
    shift = sat.mean - lat.mean
    post_bias = samples.bias.mean(axis=0)
    np.testing.assert_allclose(shift[0], post_bias, atol=0.5)


def test_predict_tessellation_runs():
    ds, _, offs = tiny_scene(seed=15)
    cfg = SSBConfig(m=6, kernel=UNIF)
    samples = fit_ssb(
        ds, offs, cfg, McmcConfig(n_iter=40, burn_in=20, thin=2), Priors(),
        RngContract(16), pm_warn=1.0,
    )
    summary = predict_ssb(
        samples, np.array([[0.4, 0.6]]), np.zeros((1, 2)), RngContract(17),
        tessellation=True,
    )
    assert np.isfinite(summary.mean).all()


def test_replicate_shapes_and_masking(small_dataset):
    data = build_model_data(small_dataset)
    cfg = SSBConfig(m=5, kernel=UNIF)
    samples = fit_ssb(
        small_dataset, None, cfg, McmcConfig(n_iter=40, burn_in=20, thin=2),
        Priors(), RngContract(18), pm_warn=1.0,
    )
    reps = replicate_ssb(samples, data, RngContract(19))
    assert reps.shape == (samples.n_draws, 9, 2)
    assert np.isfinite(reps).all()


def test_terminal_mass_warning_fires():
    ds, _, offs = tiny_scene(seed=20)
    # one free component with a tiny kernel leaves most sites on the
    # terminal remainder, which the fit should flag
    cfg = SSBConfig(m=2, kernel=KernelSpec("uniform", "fixed", 0.05))
    with pytest.warns(UserWarning, match="terminal"):
        fit_ssb(
            ds, offs, cfg, McmcConfig(n_iter=40, burn_in=20, thin=2), Priors(),
            RngContract(21),
        )
