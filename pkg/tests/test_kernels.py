"""Kernel evaluation, bandwidth priors, and proximity closed forms."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssbwind.domain import ConfigError, NumericError, RngContract
from ssbwind.kernels import (
    KernelSpec,
    bandwidth_log_prior,
    default_knot_box,
    draw_bandwidths,
    fixed_bandwidth,
    gamma_closed_form,
    gamma_monte_carlo,
    kernel_values,
)

ALL_SPECS = [
    KernelSpec("uniform", "fixed", 0.4),
    KernelSpec("uniform", "expo", 0.4),
    KernelSpec("sqexp", "fixed", 0.4),
    KernelSpec("sqexp", "invgamma", 0.4),
]


# ---------------------------------------------------------------------------
# spec validation


@pytest.mark.parametrize(
    "family,bandwidth,lam",
    [
        ("triangle", "fixed", 0.4),
        ("uniform", "invgamma", 0.4),
        ("sqexp", "expo", 0.4),
        ("uniform", "fixed", 0.0),
        ("uniform", "fixed", -0.1),
    ],
)
def test_invalid_specs_rejected(family, bandwidth, lam):
    with pytest.raises(ConfigError):
        KernelSpec(family, bandwidth, lam)


def test_fixed_bandwidth_conventions():
    assert fixed_bandwidth(KernelSpec("uniform", "fixed", 0.4)) == pytest.approx(0.4)
    assert fixed_bandwidth(KernelSpec("sqexp", "fixed", 0.4)) == pytest.approx(
        0.4 / np.sqrt(2.0)
    )


# ---------------------------------------------------------------------------
# kernel evaluation


def test_uniform_kernel_indicator():
    spec = KernelSpec("uniform", "fixed", 0.5)
    knots = np.array([[0.5, 0.5]])
    eps = np.array([[0.5, 0.5]])
    sites = np.array(
        [
            [0.5, 0.5],  # at the knot
            [0.74, 0.5],  # inside: |d| = 0.24 < 0.25
            [0.76, 0.5],  # outside on axis 1
            [0.5, 0.125],  # outside on axis 2
            [0.75, 0.5],  # |d| = 0.25 = eps/2 exactly (representable): strict <
        ]
    )
    w = kernel_values(spec, knots, eps, sites)
    np.testing.assert_array_equal(w[:, 0], [1.0, 1.0, 0.0, 0.0, 0.0])


def test_uniform_kernel_outside_support_example():
    # |s1 - psi1| = 0.3 with eps1 = 0.2 lands outside the half-width
    spec = KernelSpec("uniform", "fixed", 0.2)
    w = kernel_values(
        spec,
        np.array([[0.2, 0.5]]),
        np.array([[0.2, 0.2]]),
        np.array([[0.5, 0.5]]),
    )
    assert w[0, 0] == 0.0


def test_sqexp_kernel_formula():
    spec = KernelSpec("sqexp", "fixed", 0.4)
    knots = np.array([[0.3, 0.7]])
    eps = np.array([[0.25, 0.5]])
    sites = np.array([[0.45, 0.55]])
    w = kernel_values(spec, knots, eps, sites)
    expected = np.exp(-((0.15 / 0.25) ** 2) - (0.15 / 0.5) ** 2)
    assert w[0, 0] == pytest.approx(expected, rel=1e-14)


def test_kernel_equals_one_at_knot():
    for spec in ALL_SPECS:
        w = kernel_values(
            spec, np.array([[0.3, 0.3]]), np.array([[0.2, 0.7]]), np.array([[0.3, 0.3]])
        )
        assert w[0, 0] == 1.0


# ---------------------------------------------------------------------------
# bandwidth priors


def test_draw_bandwidths_shapes_and_positivity():
    rng = RngContract(0)
    for spec in ALL_SPECS:
        eps = draw_bandwidths(spec, 50, rng.substream(1))
        assert eps.shape == (50, 2)
        assert (eps > 0).all()


def test_expo_bandwidth_mean():
    spec = KernelSpec("uniform", "expo", 0.4)
    eps = draw_bandwidths(spec, 200_000, RngContract(1).generator())
    assert eps.mean() == pytest.approx(0.4, rel=0.02)


def test_invgamma_bandwidth_precision_mean():
    # eps^2 ~ InvGamma(1.5, lam^2/2) so E[1/eps^2] = 1.5 / (lam^2/2) = 3/lam^2
    spec = KernelSpec("sqexp", "invgamma", 0.5)
    eps = draw_bandwidths(spec, 200_000, RngContract(2).generator())
    assert (1.0 / eps**2).mean() == pytest.approx(3.0 / 0.25, rel=0.02)


def test_fixed_bandwidth_draws_are_constant():
    spec = KernelSpec("sqexp", "fixed", 0.4)
    eps = draw_bandwidths(spec, 5, RngContract(3).generator())
    np.testing.assert_allclose(eps, 0.4 / np.sqrt(2.0))


def test_bandwidth_log_prior_expo_matches_density():
    spec = KernelSpec("uniform", "expo", 0.4)
    eps = np.array([[0.1, 0.3], [0.2, 0.05]])
    lp = bandwidth_log_prior(spec, eps, 0.4)
    expected = np.sum(-np.log(0.4) - eps / 0.4)
    assert lp == pytest.approx(expected, rel=1e-12)


def test_bandwidth_log_prior_invgamma_matches_scipy():
    from scipy import stats

    spec = KernelSpec("sqexp", "invgamma", 0.5)
    eps = np.array([[0.2, 0.4]])
    lp = bandwidth_log_prior(spec, eps, 0.5)
    d = eps**2
    # density of d = eps^2 under InvGamma(1.5, lam^2/2), not of eps itself
    expected = stats.invgamma.logpdf(d, a=1.5, scale=0.5**2 / 2.0).sum()
    assert lp == pytest.approx(expected, rel=1e-10)


def test_fixed_bandwidth_log_prior_is_zero():
    spec = KernelSpec("uniform", "fixed", 0.4)
    assert bandwidth_log_prior(spec, np.full((3, 2), 0.4), 0.4) == 0.0


# ---------------------------------------------------------------------------
# proximity closed forms (frozen oracles at lam = 0.4, delta = (0.15, 0.22))


@pytest.mark.parametrize(
    "spec,expected",
    [
        (ALL_SPECS[0], 0.28125000000000006),
        (ALL_SPECS[1], 0.3965314190749929),
        (ALL_SPECS[2], 0.32101347435158145),
        (ALL_SPECS[3], 0.33654983829831986),
    ],
)
def test_gamma_closed_form_frozen(spec, expected):
    got = gamma_closed_form(spec, np.array([0.15, 0.22]))
    assert got == pytest.approx(expected, rel=1e-12)


def test_gamma_at_zero_separation():
    assert gamma_closed_form(ALL_SPECS[0], np.zeros(2)) == 1.0
    assert gamma_closed_form(ALL_SPECS[1], np.zeros(2)) == 1.0
    assert gamma_closed_form(ALL_SPECS[2], np.zeros(2)) == 0.5
    assert gamma_closed_form(ALL_SPECS[3], np.zeros(2)) == 0.5


def test_gamma_uniform_fixed_compact_support():
    spec = KernelSpec("uniform", "fixed", 0.4)
    assert gamma_closed_form(spec, np.array([0.45, 0.0])) == 0.0
    assert gamma_closed_form(spec, np.array([0.39, 0.0])) > 0.0


@given(
    d1=st.floats(min_value=-0.8, max_value=0.8),
    d2=st.floats(min_value=-0.8, max_value=0.8),
    idx=st.integers(min_value=0, max_value=3),
)
@settings(max_examples=200)
def test_gamma_bounds_and_symmetry(d1, d2, idx):
    spec = ALL_SPECS[idx]
    delta = np.array([d1, d2])
    g = gamma_closed_form(spec, delta)
    assert 0.0 <= g <= 1.0
    assert gamma_closed_form(spec, -delta) == pytest.approx(g, rel=1e-12)


def test_gamma_decreases_with_distance():
    for spec in ALL_SPECS:
        ds = np.linspace(0.0, 0.35, 8)
        vals = [gamma_closed_form(spec, np.array([d, d])) for d in ds]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------------------------
# Monte Carlo estimator


def test_gamma_monte_carlo_matches_closed_form():
    rng = RngContract(17)
    pairs = [
        (np.array([0.40, 0.50]), np.array([0.55, 0.62])),
        (np.array([0.30, 0.30]), np.array([0.38, 0.55])),
    ]
    for k, spec in enumerate(ALL_SPECS):
        for j, (sa, sb) in enumerate(pairs):
            est = gamma_monte_carlo(spec, sa, sb, 50_000, rng.substream(k, j))
            cf = gamma_closed_form(spec, sa - sb)
            assert abs(est.estimate - cf) < 4.0 * est.std_error, (spec, sa, sb)
            assert est.std_error > 0.0


def test_gamma_monte_carlo_se_shrinks():
    spec = KernelSpec("sqexp", "fixed", 0.4)
    sa, sb = np.array([0.4, 0.4]), np.array([0.6, 0.5])
    rng = RngContract(5)
    small = gamma_monte_carlo(spec, sa, sb, 10_000, rng.substream(0))
    large = gamma_monte_carlo(spec, sa, sb, 160_000, rng.substream(1))
    assert large.std_error < small.std_error / 2.0


def test_gamma_monte_carlo_rejects_tiny_draw_count():
    with pytest.raises(ConfigError):
        gamma_monte_carlo(
            ALL_SPECS[0], np.array([0.4, 0.4]), np.array([0.5, 0.5]), 50, RngContract(0)
        )


def test_default_knot_box_pads_three_scales():
    spec = KernelSpec("uniform", "fixed", 0.4)
    box = default_knot_box(spec)
    assert box[0] == pytest.approx((-1.2, 2.2))
    assert box[1] == pytest.approx((-1.2, 2.2))
