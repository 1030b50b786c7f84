#!/usr/bin/env python3
"""Diagnostics for the spatial stick-breaking prior.

Three quick studies, all prior-side (no data, no MCMC):

  1. truncation: how fast the unallocated mass E[1 - sum_j p_j(s)] decays
     with the number of components, for several Beta(a, b) stick settings
     and both kernel families; prints the fitted log-linear slope and R^2.
  2. similarity: Monte Carlo estimate of the between-site similarity ratio
     against its closed form, for each kernel family x bandwidth prior.
  3. moments: simulated prior variance/covariance at site pairs against the
     closed-form identities, reporting z-scores.

Example:
    python3 scripts/prior_truncation_study.py --draws 20000 --out prior.csv
"""

import argparse
import csv

import numpy as np
from scipy import stats

from ssbwind.domain import RngContract
from ssbwind.kernels import KernelSpec, gamma_closed_form, gamma_monte_carlo
from ssbwind.ssb import SSBConfig, marginal_moments, simulate_prior_field, truncation_error_curve


def truncation_table(draws, rng):
    rows = []
    m_values = np.arange(2, 21)
    for fam_i, family in enumerate(("uniform", "sqexp")):
        spec = KernelSpec(family, "fixed", 0.5)
        for ab_i, (a, b) in enumerate([(1.0, 1.0), (1.0, 5.0), (5.0, 1.0)]):
            rem = truncation_error_curve(
                spec, a, b, (0.5, 0.5), m_values, draws, rng.substream(fam_i, ab_i)
            )
            fit = stats.linregress(m_values, np.log(rem))
            rows.append(
                {
                    "family": family,
                    "a": a,
                    "b": b,
                    "slope": fit.slope,
                    "r2": fit.rvalue**2,
                    "mass_at_m20": rem[-1],
                }
            )
    return rows


def similarity_table(draws, rng):
    table = [
        (KernelSpec("uniform", "fixed", 0.5), 1.5),
        (KernelSpec("uniform", "expo", 0.5), 3.0),
        (KernelSpec("sqexp", "fixed", 0.5), 1.5),
        (KernelSpec("sqexp", "invgamma", 0.5), 6.0),
    ]
    sa = np.array([0.45, 0.55])
    sb = np.array([0.62, 0.40])
    rows = []
    for i, (spec, pad) in enumerate(table):
        box = ((-pad, 1 + pad), (-pad, 1 + pad))
        est = gamma_monte_carlo(spec, sa, sb, draws, rng.substream(i), knot_box=box)
        target = gamma_closed_form(spec, sb - sa)
        rows.append(
            {
                "family": spec.family,
                "bandwidth": spec.bandwidth,
                "mc": est.estimate,
                "closed": target,
                "z": (est.estimate - target) / est.std_error,
            }
        )
    return rows


def moment_check(draws, rng):
    spec = KernelSpec("uniform", "fixed", 0.5)
    config = SSBConfig(m=150, a=1.0, b=1.0, kernel=spec)
    sa = np.array([0.40, 0.50])
    sb = np.array([0.55, 0.45])
    sims = simulate_prior_field(
        config,
        np.vstack([sa, sb]),
        loc_cov=[[1.0]],
        n_draws=draws,
        rng=rng.stream(3),
        knot_box=((-0.75, 1.75), (-0.75, 1.75)),
        noise_vars=[0.25],
    )[:, :, 0]
    centered = sims - sims.mean(axis=0)
    var_hat = (centered[:, 0] ** 2).mean()
    cov_hat = (centered[:, 0] * centered[:, 1]).mean()
    gamma = gamma_closed_form(spec, sb - sa)
    mm = marginal_moments(1.0, 1.0, 1.0, 0.25, gamma)
    return {
        "var_sim": var_hat,
        "var_closed": 1.25,
        "cov_sim": cov_hat,
        "cov_closed": mm.cov,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--draws", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=None, help="optional CSV for the truncation table")
    args = ap.parse_args()
    rng = RngContract(args.seed)

    print("truncation decay, E[unallocated mass] vs number of components")
    print(f"{'family':>8} {'a':>4} {'b':>4} {'slope':>8} {'R^2':>7} {'mass@20':>9}")
    trows = truncation_table(args.draws, rng.stream(1))
    for r in trows:
        print(
            f"{r['family']:>8} {r['a']:4.1f} {r['b']:4.1f} "
            f"{r['slope']:8.4f} {r['r2']:7.4f} {r['mass_at_m20']:9.2e}"
        )

    print("\nsimilarity ratio, Monte Carlo vs closed form")
    print(f"{'family':>8} {'bandwidth':>10} {'mc':>8} {'closed':>8} {'z':>6}")
    for r in similarity_table(args.draws, rng.stream(2)):
        print(
            f"{r['family']:>8} {r['bandwidth']:>10} "
            f"{r['mc']:8.4f} {r['closed']:8.4f} {r['z']:6.2f}"
        )

    print("\nprior moments at a site pair (sigma^2 = 1, tau^2 = 0.25)")
    mm = moment_check(args.draws, rng)
    print(
        f"  Var: simulated {mm['var_sim']:.4f} vs closed {mm['var_closed']:.4f}\n"
        f"  Cov: simulated {mm['cov_sim']:.4f} vs closed {mm['cov_closed']:.4f}"
    )

    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(trows[0]))
            w.writeheader()
            w.writerows(trows)
        print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
