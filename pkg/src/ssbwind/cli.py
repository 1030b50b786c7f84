"""Command line interface: simulate / diagnose / fit / predict / compare.

All commands read one JSON config (--config), optionally overridden by
repeatable --set key.path=value flags (values parsed as JSON when
possible), plus --seed and --out.  Every output file carries a provenance
line naming the command, a hash of the merged config, and the seed.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O or data format error.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import evaluate, holland, inference, krige, ssb
from .domain import (
    CompositeResidual,
    ConfigError,
    Dataset,
    EyePatchResidual,
    GaussianResidual,
    NoResidual,
    NumericError,
    RngContract,
    SchemaError,
    SsbResidual,
    TruthConfig,
    denormalize_point,
    generate_synthetic,
    load_observations,
    normalize_point,
    observation_arrays,
    save_observations,
)
from .kernels import KernelSpec


# ---------------------------------------------------------------------------
# config plumbing


def load_config(path) -> dict:
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}")


def apply_overrides(cfg: dict, pairs) -> dict:
    cfg = copy.deepcopy(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key.path=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object value")
        node[parts[-1]] = value
    return cfg


def config_hash(cfg: dict, seed: int) -> str:
    blob = json.dumps(cfg, sort_keys=True) + f"|seed={seed}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def provenance_line(command: str, cfg: dict, seed: int) -> str:
    return f"provenance: command={command} config_sha256={config_hash(cfg, seed)} seed={seed}"


def _require(cfg: dict, key: str, context: str) -> dict:
    if key not in cfg:
        raise ConfigError(f"config is missing the {key!r} section ({context})")
    return cfg[key]


def holland_from_cfg(cfg: dict) -> holland.HollandParams:
    block = _require(cfg, "holland", "vortex profile parameters")
    known = {
        "Pn_mb",
        "Pc_mb",
        "rho",
        "Rmax_km",
        "B",
        "center",
        "heading_deg",
        "inflow_offset_deg",
    }
    unknown = set(block) - known
    if unknown:
        raise ConfigError(f"unknown holland keys {sorted(unknown)}")
    if "center" not in block:
        raise ConfigError("holland config requires 'center': [lon, lat]")
    kwargs = dict(block)
    kwargs["center"] = tuple(float(x) for x in kwargs["center"])
    return holland.HollandParams(**kwargs)


def kernel_from_cfg(block: dict) -> KernelSpec:
    for key in ("family", "bandwidth", "lambda"):
        if key not in block:
            raise ConfigError(f"kernel config requires {key!r}")
    return KernelSpec(block["family"], block["bandwidth"], float(block["lambda"]))


def ssb_from_cfg(cfg: dict, kernel: KernelSpec) -> ssb.SSBConfig:
    block = cfg.get("ssb", {})
    return ssb.SSBConfig(
        m=int(block.get("m", 30)),
        kernel=kernel,
        a=float(block.get("a", 1.0)),
        b=float(block.get("b", 1.0)),
        knot_prior=block.get("knot_prior", "uniform"),
    )


def mcmc_from_cfg(cfg: dict) -> inference.McmcConfig:
    block = dict(cfg.get("mcmc", {}))
    if "update_blocks" in block:
        block["update_blocks"] = tuple(block["update_blocks"])
    try:
        return inference.McmcConfig(**block)
    except TypeError as e:
        raise ConfigError(f"bad mcmc config: {e}")


def priors_from_cfg(cfg: dict) -> inference.Priors:
    try:
        return inference.Priors(**cfg.get("priors", {}))
    except TypeError as e:
        raise ConfigError(f"bad priors config: {e}")


def residual_from_cfg(block) -> object:
    if block is None:
        return NoResidual()
    kind = block.get("kind", "none")
    params = {k: v for k, v in block.items() if k != "kind"}
    try:
        if kind == "none":
            return NoResidual()
        if kind == "gaussian":
            if "cov" in params:
                params["cov"] = tuple(tuple(row) for row in params["cov"])
            return GaussianResidual(**params)
        if kind == "ssb":
            if "cov" in params:
                params["cov"] = tuple(tuple(row) for row in params["cov"])
            return SsbResidual(**params)
        if kind == "eye_patches":
            return EyePatchResidual(**params)
        if kind == "composite":
            parts = params.pop("parts", None)
            if not parts:
                raise ConfigError("composite residual requires a non-empty 'parts' list")
            return CompositeResidual(
                parts=tuple(residual_from_cfg(p) for p in parts), **params
            )
    except TypeError as e:
        raise ConfigError(f"bad residual config for kind {kind!r}: {e}")
    raise ConfigError(f"unknown residual kind {kind!r}")


def truth_from_cfg(cfg: dict) -> TruthConfig:
    block = _require(cfg, "simulate", "synthetic scene")
    hp = holland_from_cfg(cfg)
    if "bounds" not in block:
        raise ConfigError("simulate config requires 'bounds': [lon0, lat0, lon1, lat1]")
    kwargs = {
        "holland": hp,
        "bounds": tuple(float(x) for x in block["bounds"]),
        "residual": residual_from_cfg(block.get("residual")),
    }
    for key in ("grid_shape", "n_buoy", "bias", "sat_noise_sd", "buoy_noise_sd"):
        if key in block:
            val = block[key]
            kwargs[key] = tuple(val) if isinstance(val, list) else val
    if block.get("buoy_sites") is not None:
        kwargs["buoy_sites"] = tuple(tuple(s) for s in block["buoy_sites"])
    return TruthConfig(**kwargs)


def load_dataset_from_cfg(cfg: dict) -> Dataset:
    block = _require(cfg, "dataset", "observation file paths")
    for key in ("observations", "meta"):
        if key not in block:
            raise ConfigError(f"dataset config requires {key!r} path")
    return load_observations(block["observations"], block["meta"])


def offset_for(dataset: Dataset, hp: holland.HollandParams, response_dim: int):
    arr = observation_arrays(dataset)
    field = holland.field_at(hp, arr["lon"], arr["lat"])
    return field if response_dim == 2 else field[:, :1]


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, seed: int, out: str) -> int:
    rng = RngContract(seed)
    tc = truth_from_cfg(cfg)
    dataset, truth = generate_synthetic(tc, rng)
    os.makedirs(out, exist_ok=True)
    prov = provenance_line("simulate", cfg, seed)
    save_observations(
        dataset,
        os.path.join(out, "dataset.csv"),
        os.path.join(out, "dataset_meta.json"),
        header_comment=prov,
    )
    doc = truth.to_json_dict()
    doc["_provenance"] = prov
    with open(os.path.join(out, "truth.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    n_sat = int(np.sum(truth.source == 0))
    n_buoy = int(np.sum(truth.source == 1))
    print(f"simulated {n_sat} satellite + {n_buoy} buoy observations")
    print(f"residual kind: {truth.residual_kind}")
    print(f"wrote dataset.csv, dataset_meta.json, truth.json to {out}")
    return 0


def cmd_diagnose(cfg: dict, seed: int, out: str) -> int:
    rng = RngContract(seed)
    block = cfg.get("diagnose", {})
    kernel = kernel_from_cfg(_require(cfg, "kernel", "kernel for diagnosis"))
    sconf = ssb_from_cfg(cfg, kernel)
    threshold = float(block.get("threshold", 0.01))
    grid_n = int(block.get("grid", 10))
    n_draws = int(block.get("n_draws", 2000))
    g = np.linspace(0.0, 1.0, grid_n)
    sites = np.column_stack([a.ravel() for a in np.meshgrid(g, g)])
    m_star = ssb.choose_m(sconf, sites, threshold, rng, n_draws=n_draws)
    proper = ssb.propriety_check(
        kernel, sites, sconf.a, sconf.b, n_draws, rng.substream(901)
    )
    m_curve = list(range(2, 21))
    remainder = ssb.truncation_error_curve(
        kernel, sconf.a, sconf.b, (0.5, 0.5), m_curve, 20000, rng.substream(902)
    )
    doc = {
        "chosen_m": int(m_star),
        "threshold": threshold,
        "prior_is_proper": bool(proper),
        "remainder_curve": {
            "m": m_curve,
            "unallocated_mass": [float(x) for x in remainder],
        },
        "_provenance": provenance_line("diagnose", cfg, seed),
    }
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "diagnose.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    print(f"prior proper: {proper}")
    print(f"chosen truncation level m = {m_star} (terminal mass <= {threshold})")
    print(f"wrote diagnose.json to {out}")
    return 0


def _fit_one(model, dataset, hp, cfg, seed_rng, response_dim):
    mcmc = mcmc_from_cfg(cfg)
    priors = priors_from_cfg(cfg)
    offs = offset_for(dataset, hp, response_dim)
    if model == "krige":
        return krige.fit_krige(dataset, offs, mcmc, priors, seed_rng, response_dim)
    kernel = kernel_from_cfg(_require(cfg, "kernel", "stick-breaking kernel"))
    sconf = ssb_from_cfg(cfg, kernel)
    if cfg.get("ssb", {}).get("auto_m"):
        arr = observation_arrays(dataset)
        sites = np.unique(np.column_stack([arr["s1"], arr["s2"]]), axis=0)
        thr = float(cfg.get("ssb", {}).get("auto_m_threshold", 0.01))
        m_star = ssb.choose_m(sconf, sites, thr, seed_rng.stream(999))
        sconf = dataclasses.replace(sconf, m=m_star)
        print(f"auto-selected truncation level m = {m_star}")
    return inference.fit_ssb(
        dataset, offs, sconf, mcmc, priors, seed_rng, response_dim
    )


def cmd_fit(cfg: dict, seed: int, out: str) -> int:
    t0 = time.time()
    rng = RngContract(seed)
    dataset = load_dataset_from_cfg(cfg)
    hp = holland_from_cfg(cfg)
    model = cfg.get("model", "ssb")
    if model not in ("ssb", "krige"):
        raise ConfigError(f"model must be 'ssb' or 'krige', got {model!r}")
    response_dim = int(cfg.get("ssb", {}).get("response_dim", 2))
    samples = _fit_one(model, dataset, hp, cfg, rng.stream(1), response_dim)
    pdir = os.path.join(out, "posterior")
    inference.save_samples(samples, pdir, provenance_line("fit", cfg, seed))
    print(f"model: {model}, draws: {samples.n_draws}")
    for k, v in sorted(samples.acceptance.items()):
        print(f"acceptance[{k}] = {v:.3f}")
    print(f"fit completed in {time.time() - t0:.1f}s; posterior in {pdir}")
    return 0


def _prediction_grid(cfg: dict, dataset: Dataset):
    block = cfg.get("predict", {})
    nx, ny = block.get("grid", [25, 25])
    lon0, lat0, lon1, lat1 = dataset.bounds
    glon, glat = np.meshgrid(
        np.linspace(lon0, lon1, int(nx)), np.linspace(lat0, lat1, int(ny))
    )
    return glon.ravel(), glat.ravel()


def cmd_predict(cfg: dict, seed: int, out: str) -> int:
    rng = RngContract(seed)
    dataset = load_dataset_from_cfg(cfg)
    hp = holland_from_cfg(cfg)
    block = cfg.get("predict", {})
    pdir = block.get("posterior", os.path.join(out, "posterior"))
    samples = inference.load_samples(pdir)
    response_dim = int(samples.config.get("response_dim", 2))
    lon, lat = _prediction_grid(cfg, dataset)
    s1, s2 = normalize_point(lon, lat, dataset.bounds)
    sites_new = np.column_stack([s1, s2])
    field = holland.field_at(hp, lon, lat)
    offs = field if response_dim == 2 else field[:, :1]
    kind = block.get("kind", "latent")
    if samples.kind == "ssb":
        summary = inference.predict_ssb(
            samples,
            sites_new,
            offs,
            rng.stream(2),
            kind=kind,
            tessellation=bool(block.get("tessellation", False)),
        )
    else:
        data = inference.build_model_data(
            dataset, offset_for(dataset, hp, response_dim), response_dim
        )
        summary = krige.predict_krige(
            samples, data, sites_new, offs, rng.stream(2), kind=kind
        )
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "predictions.csv")
    with open(path, "w") as fh:
        fh.write(f"# {provenance_line('predict', cfg, seed)}\n")
        if response_dim == 2:
            fh.write("lon,lat,u_mean,u_lo95,u_hi95,v_mean,v_lo95,v_hi95\n")
            for i in range(len(lon)):
                fh.write(
                    f"{lon[i]:.17g},{lat[i]:.17g},"
                    f"{summary.mean[i, 0]:.17g},{summary.lo[i, 0]:.17g},{summary.hi[i, 0]:.17g},"
                    f"{summary.mean[i, 1]:.17g},{summary.lo[i, 1]:.17g},{summary.hi[i, 1]:.17g}\n"
                )
        else:
            fh.write("lon,lat,u_mean,u_lo95,u_hi95\n")
            for i in range(len(lon)):
                fh.write(
                    f"{lon[i]:.17g},{lat[i]:.17g},"
                    f"{summary.mean[i, 0]:.17g},{summary.lo[i, 0]:.17g},{summary.hi[i, 0]:.17g}\n"
                )
    print(f"wrote {len(lon)} prediction rows to {path}")
    return 0


DEFAULT_COMPARE_KERNELS = {
    "ssb-uniform": {"family": "uniform", "bandwidth": "expo", "lambda": 0.3},
    "ssb-sqexp": {"family": "sqexp", "bandwidth": "invgamma", "lambda": 0.3},
}


def _coverage_for_model(samples, data, held, dataset, hp, response_dim, rng):
    """95% predictive intervals for held-out scalars, per component."""
    lo = np.empty(len(held))
    hi = np.empty(len(held))
    for src_name in ("satellite", "buoy"):
        idx = [k for k, h in enumerate(held) if h.source == src_name]
        if not idx:
            continue
        lons = np.array([held[k].lon for k in idx])
        lats = np.array([held[k].lat for k in idx])
        s1, s2 = normalize_point(lons, lats, dataset.bounds)
        sites_new = np.column_stack([s1, s2])
        field = holland.field_at(hp, lons, lats)
        offs = field if response_dim == 2 else field[:, :1]
        if samples.kind == "ssb":
            summary = inference.predict_ssb(
                samples, sites_new, offs, rng, kind=src_name
            )
        else:
            summary = krige.predict_krige(
                samples, data, sites_new, offs, rng, kind=src_name
            )
        for row, k in enumerate(idx):
            c = held[k].component
            lo[k] = summary.lo[row, c]
            hi[k] = summary.hi[row, c]
    return lo, hi


def run_compare(cfg: dict, seed: int, out: str | None = None, verbose: bool = True):
    """Shared compare pipeline; returns (CompareReport, extras)."""
    rng = RngContract(seed)
    dataset = load_dataset_from_cfg(cfg)
    hp = holland_from_cfg(cfg)
    block = cfg.get("compare", {})
    response_dim = int(cfg.get("ssb", {}).get("response_dim", 2))
    frac = block.get("holdout_fraction")
    held = ()
    train = dataset
    if frac:
        train, held = evaluate.holdout_split(dataset, float(frac), rng.stream(5))
    kernels = dict(DEFAULT_COMPARE_KERNELS)
    kernels.update(block.get("kernels", {}))
    models = block.get("models", ["ssb-uniform", "ssb-sqexp", "krige"])
    offs = offset_for(train, hp, response_dim)
    data = inference.build_model_data(train, offs, response_dim)
    scores = {}
    coverage = {}
    residual_files = {}
    residual_tables = {}
    fits = {}
    for k, name in enumerate(models):
        model_rng = rng.stream(10 + k)
        sub_cfg = copy.deepcopy(cfg)
        if name != "krige":
            sub_cfg["kernel"] = kernels[name]
        samples = _fit_one(
            "krige" if name == "krige" else "ssb",
            train,
            hp,
            sub_cfg,
            model_rng,
            response_dim,
        )
        fits[name] = samples
        if samples.kind == "ssb":
            reps = inference.replicate_ssb(samples, data, model_rng.substream(501))
        else:
            reps = krige.replicate_krige(samples, data, model_rng.substream(501))
        scores[name] = evaluate.emspe(data.y, data.mask, reps)
        post_mean = reps.mean(axis=0)
        rows = evaluate.residual_rows(train, post_mean)
        residual_tables[name] = rows
        if out is not None:
            os.makedirs(out, exist_ok=True)
            path = os.path.join(out, f"residuals_{name}.csv")
            evaluate.write_residual_csv(
                path, rows, provenance_line("compare", cfg, seed)
            )
            residual_files[name] = path
        if held:
            lo, hi = _coverage_for_model(
                samples, data, held, dataset, hp, response_dim,
                model_rng.substream(502),
            )
            coverage[name] = {
                comp: list(hits)
                for comp, hits in evaluate.interval_coverage(held, lo, hi).items()
            }
        if verbose:
            print(
                f"{name}: emspe per scalar = {scores[name].per_scalar:.4f} "
                f"(total {scores[name].total:.2f} over {scores[name].n_scalars})"
            )
    report = evaluate.CompareReport(
        emspe=scores,
        coverage=coverage or None,
        notes={"models": models, "holdout_fraction": frac},
    )
    if out is not None:
        report.save(
            os.path.join(out, "compare_report.json"),
            provenance_line("compare", cfg, seed),
        )
    if verbose:
        print("ranking (best first): " + " < ".join(report.ranking()))
    return report, {
        "fits": fits,
        "held": held,
        "train": train,
        "data": data,
        "residuals": residual_tables,
    }


def cmd_compare(cfg: dict, seed: int, out: str) -> int:
    run_compare(cfg, seed, out, verbose=True)
    print(f"wrote compare_report.json to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ssb-field",
        description="Bayesian wind field reconstruction around a storm center",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=fn.__doc__)
        sp.add_argument("--config", required=True, help="JSON config path")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument(
            "--set",
            action="append",
            dest="overrides",
            metavar="KEY=VALUE",
            help="override a config entry (dot-separated path, JSON value)",
        )
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "diagnose": cmd_diagnose,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "compare": cmd_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.overrides)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = args.out if args.out is not None else cfg.get("out", "out")
        return COMMANDS[args.command](cfg, seed, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except (SchemaError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
