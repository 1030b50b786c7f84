"""Command line interface: commands, overrides, determinism, exit codes."""

import json

import numpy as np
import pytest

from ssbwind.cli import apply_overrides, config_hash, main

BASE_CONFIG = {
    "seed": 11,
    "holland": {
        "Pn_mb": 1010.0,
        "Pc_mb": 939.0,
        "rho": 1.2,
        "Rmax_km": 49.0,
        "B": 1.9,
        "center": [-72.0, 26.0],
    },
    "kernel": {"family": "uniform", "bandwidth": "expo", "lambda": 0.3},
    "ssb": {"m": 8, "a": 1.0, "b": 1.0},
    "mcmc": {"n_iter": 60, "burn_in": 30, "thin": 3},
    "model": "ssb",
    "simulate": {
        "bounds": [-74.0, 24.0, -70.0, 28.0],
        "grid_shape": [6, 5],
        "n_buoy": 4,
        "bias": [-4.0, 2.0],
        "residual": {"kind": "eye_patches", "amp_sd": 6.0},
    },
    "predict": {"grid": [4, 3], "kind": "latent"},
    "compare": {"holdout_fraction": 0.2, "models": ["ssb-uniform", "krige"]},
}


@pytest.fixture
def workdir(tmp_path):
    out = tmp_path / "out"
    cfg = dict(BASE_CONFIG)
    cfg["out"] = str(out)
    cfg["dataset"] = {
        "observations": str(out / "dataset.csv"),
        "meta": str(out / "dataset_meta.json"),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path, out


def run(path, command, *extra):
    return main([command, "--config", str(path), *extra])


# ---------------------------------------------------------------------------
# config plumbing


def test_apply_overrides_paths_and_json_values():
    cfg = {"a": {"b": 1}, "flat": "x"}
    got = apply_overrides(cfg, ["a.b=2", "a.c.d=[1,2]", "flat=text", "q=0.5"])
    assert got["a"]["b"] == 2
    assert got["a"]["c"]["d"] == [1, 2]
    assert got["flat"] == "text"
    assert got["q"] == 0.5
    assert cfg["a"]["b"] == 1  # original untouched


def test_apply_overrides_rejects_malformed():
    from ssbwind.domain import ConfigError

    with pytest.raises(ConfigError):
        apply_overrides({}, ["no-equals-sign"])


def test_config_hash_sensitive_to_content_and_seed():
    h1 = config_hash({"a": 1}, 0)
    assert h1 == config_hash({"a": 1}, 0)
    assert h1 != config_hash({"a": 2}, 0)
    assert h1 != config_hash({"a": 1}, 1)
    assert len(h1) == 16


# ---------------------------------------------------------------------------
# commands end to end


def test_simulate_fit_predict_pipeline(workdir, capsys):
    tmp, cfg_path, out = workdir
    assert run(cfg_path, "simulate") == 0
    assert (out / "dataset.csv").exists()
    assert (out / "dataset_meta.json").exists()
    truth = json.loads((out / "truth.json").read_text())
    assert truth["residual_kind"] == "eye_patches"
    assert "_provenance" in truth
    first = (out / "dataset.csv").read_text().splitlines()[0]
    assert first.startswith("# provenance: command=simulate")

    with pytest.warns(UserWarning):
        assert run(cfg_path, "fit") == 0
    assert (out / "posterior" / "draws.csv").exists()
    schema = json.loads((out / "posterior" / "schema.json").read_text())
    assert schema["kind"] == "ssb"

    assert run(cfg_path, "predict") == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[1] == "lon,lat,u_mean,u_lo95,u_hi95,v_mean,v_lo95,v_hi95"
    assert len(lines) == 2 + 4 * 3
    row = lines[2].split(",")
    assert float(row[3]) <= float(row[2]) <= float(row[4])


def test_predict_deterministic(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    with pytest.warns(UserWarning):
        run(cfg_path, "fit")
    run(cfg_path, "predict")
    first = (out / "predictions.csv").read_text()
    run(cfg_path, "predict")
    assert (out / "predictions.csv").read_text() == first


def test_seed_override_changes_simulation(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    first = (out / "dataset.csv").read_text()
    run(cfg_path, "simulate", "--seed", "99")
    second = (out / "dataset.csv").read_text()
    assert first != second


def test_set_override_changes_grid(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    with pytest.warns(UserWarning):
        run(cfg_path, "fit")
    run(cfg_path, "predict", "--set", "predict.grid=[2,2]")
    lines = (out / "predictions.csv").read_text().splitlines()
    assert len(lines) == 2 + 4


def test_simulate_composite_residual(workdir):
    tmp, cfg_path, out = workdir
    parts = json.dumps(
        {
            "kind": "composite",
            "parts": [
                {"kind": "gaussian", "cov": [[4.0, 0.0], [0.0, 4.0]], "corr": "sqexp"},
                {"kind": "eye_patches", "amp_sd": 6.0},
            ],
        }
    )
    assert run(cfg_path, "simulate", "--set", f"simulate.residual={parts}") == 0
    truth = json.loads((out / "truth.json").read_text())
    assert truth["residual_kind"] == "composite"
    resid = np.column_stack([truth["residual_u"], truth["residual_v"]])
    assert np.isfinite(resid).all()
    assert resid.std() > 0.0


def test_composite_residual_requires_parts():
    from ssbwind.cli import residual_from_cfg
    from ssbwind.domain import ConfigError

    with pytest.raises(ConfigError):
        residual_from_cfg({"kind": "composite", "parts": []})


def test_krige_fit_and_predict(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    assert run(cfg_path, "fit", "--set", "model=krige") == 0
    schema = json.loads((out / "posterior" / "schema.json").read_text())
    assert schema["kind"] == "krige"
    assert run(cfg_path, "predict") == 0
    assert (out / "predictions.csv").exists()


def test_compare_writes_report(workdir, capsys):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    with pytest.warns(UserWarning):
        assert run(cfg_path, "compare") == 0
    report = json.loads((out / "compare_report.json").read_text())
    assert set(report["emspe"]) == {"ssb-uniform", "krige"}
    assert report["ranking"]
    assert (out / "residuals_ssb-uniform.csv").exists()
    assert (out / "residuals_krige.csv").exists()
    assert report["coverage"] is not None
    text = capsys.readouterr().out
    assert "ranking" in text


def test_diagnose_runs(workdir):
    tmp, cfg_path, out = workdir
    code = run(
        cfg_path,
        "diagnose",
        "--set", "kernel={\"family\":\"sqexp\",\"bandwidth\":\"fixed\",\"lambda\":0.3}",
        "--set", "diagnose={\"grid\":4,\"n_draws\":400,\"threshold\":0.35}",
    )
    assert code == 0
    doc = json.loads((out / "diagnose.json").read_text())
    assert doc["prior_is_proper"] is True
    assert doc["chosen_m"] >= 1
    assert len(doc["remainder_curve"]["m"]) == len(
        doc["remainder_curve"]["unallocated_mass"]
    )


def test_univariate_pipeline(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    with pytest.warns(UserWarning):
        assert run(cfg_path, "fit", "--set", "ssb.response_dim=1") == 0
    assert run(cfg_path, "predict") == 0
    lines = (out / "predictions.csv").read_text().splitlines()
    assert lines[1] == "lon,lat,u_mean,u_lo95,u_hi95"


# ---------------------------------------------------------------------------
# failure modes


def test_missing_config_exits_4(tmp_path, capsys):
    assert main(["fit", "--config", str(tmp_path / "nope.json")]) == 4
    assert "I/O error" in capsys.readouterr().err


def test_invalid_json_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["simulate", "--config", str(p)]) == 2
    assert "config error" in capsys.readouterr().err


def test_degenerate_bounds_exit_2(workdir, capsys):
    tmp, cfg_path, out = workdir
    code = run(cfg_path, "simulate", "--set", "simulate.bounds=[1,2,1,4]")
    assert code == 2


def test_unknown_model_exits_2(workdir, capsys):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    assert run(cfg_path, "fit", "--set", "model=spline") == 2


def test_missing_dataset_files_exit_4(workdir, capsys):
    tmp, cfg_path, out = workdir
    assert run(cfg_path, "fit") == 4  # simulate never ran


def test_corrupt_dataset_exits_4(workdir):
    tmp, cfg_path, out = workdir
    run(cfg_path, "simulate")
    csv = out / "dataset.csv"
    lines = csv.read_text().splitlines()
    lines[3] = "oops"
    csv.write_text("\n".join(lines) + "\n")
    assert run(cfg_path, "fit") == 4
