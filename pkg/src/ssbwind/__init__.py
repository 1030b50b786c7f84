"""Bayesian reconstruction of two-component storm wind fields.

A deterministic parametric vortex supplies the large-scale structure;
departures from it are modeled either with a spatial stick-breaking
prior (nonstationary, discontinuity-friendly) or a stationary Gaussian
process baseline, fit to satellite and buoy observations by MCMC.
"""

from .domain import (
    CompositeResidual,
    ConfigError,
    Dataset,
    EyePatchResidual,
    GaussianResidual,
    NoResidual,
    NumericError,
    Observation,
    RngContract,
    SchemaError,
    Site,
    SsbResidual,
    TruthConfig,
    WindVector,
    generate_synthetic,
    load_observations,
    normalize_domain,
    normalize_point,
    observation_arrays,
    save_observations,
)
from .evaluate import CompareReport, emspe, holdout_split, interval_coverage
from .holland import HollandParams, field_at, speed_at_radius, vmax
from .inference import (
    McmcConfig,
    Priors,
    SsbSamples,
    build_model_data,
    fit_ssb,
    load_samples,
    predict_ssb,
    replicate_ssb,
    save_samples,
)
from .kernels import (
    KernelSpec,
    gamma_closed_form,
    gamma_monte_carlo,
    kernel_values,
)
from .krige import KrigeSamples, fit_krige, predict_krige, replicate_krige
from .ssb import (
    SSBConfig,
    choose_m,
    coincidence_prob,
    coincidence_prob_truncated,
    marginal_moments,
    propriety_check,
    sample_prior,
    simulate_prior_field,
    stick_weights,
    truncation_mass,
)

__version__ = "0.1.0"

__all__ = [
    "CompareReport",
    "CompositeResidual",
    "ConfigError",
    "Dataset",
    "EyePatchResidual",
    "GaussianResidual",
    "HollandParams",
    "KernelSpec",
    "KrigeSamples",
    "McmcConfig",
    "NoResidual",
    "NumericError",
    "Observation",
    "Priors",
    "RngContract",
    "SSBConfig",
    "SchemaError",
    "Site",
    "SsbResidual",
    "SsbSamples",
    "TruthConfig",
    "WindVector",
    "build_model_data",
    "choose_m",
    "coincidence_prob",
    "coincidence_prob_truncated",
    "emspe",
    "field_at",
    "fit_krige",
    "fit_ssb",
    "gamma_closed_form",
    "gamma_monte_carlo",
    "generate_synthetic",
    "holdout_split",
    "interval_coverage",
    "kernel_values",
    "load_observations",
    "load_samples",
    "marginal_moments",
    "normalize_domain",
    "normalize_point",
    "observation_arrays",
    "predict_krige",
    "predict_ssb",
    "propriety_check",
    "replicate_krige",
    "replicate_ssb",
    "sample_prior",
    "save_observations",
    "save_samples",
    "simulate_prior_field",
    "speed_at_radius",
    "stick_weights",
    "truncation_mass",
    "vmax",
]
