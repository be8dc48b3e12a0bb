import json
import math

import numpy as np
import pytest

from dualreject.cli import main
from dualreject.config import OUTPUT_DIR_ENV, RunConfig, load_config
from dualreject.errors import ConfigError
from dualreject.stats import t_quantile
from dualreject.synthetic import generate_benchmark, write_csv

SMALL = {"L": 16, "S": 8, "synthetic_steps": 2000, "vae_epochs": 5, "vae_latent_dim": 4, "vae_hidden_dim": 16}


def config_file(tmp_path, name="cfg.json", **extra):
    data = dict(SMALL, output_dir=str(tmp_path / "out"), **extra)
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = config_file(tmp)
    assert run("prepare", "-c", cfg) == 0
    assert run("train", "-c", cfg) == 0
    return tmp, cfg


def read(path):
    return path.read_bytes()


def test_prepare_is_idempotent(tmp_path):
    cfg = config_file(tmp_path)
    assert run("prepare", "-c", cfg) == 0
    prepared = tmp_path / "out" / "prepared"
    first = {p.name: read(p) for p in prepared.iterdir()}
    assert run("prepare", "-c", cfg) == 0
    assert {p.name: read(p) for p in prepared.iterdir()} == first
    manifest = json.loads(first["manifest.json"])
    assert manifest["counts"]["validation"] > 0
    assert len(manifest["config_hash"]) == 64


def test_model_seed_does_not_change_prepared_data(tmp_path):
    a = config_file(tmp_path, "a.json")
    assert run("prepare", "-c", a) == 0
    before = read(tmp_path / "out" / "prepared" / "manifest.json")
    assert run("prepare", "-c", a, "--seed", 7) == 0
    assert read(tmp_path / "out" / "prepared" / "manifest.json") == before


def test_train_is_byte_identical(trained, tmp_path):
    tmp, _ = trained
    cfg = config_file(tmp_path)
    assert run("prepare", "-c", cfg) == 0
    assert run("train", "-c", cfg) == 0
    for name in ("forecaster.json", "vae.json", "latent_summary.json", "error_model.json"):
        assert read(tmp_path / "out" / "models" / name) == read(tmp / "out" / "models" / name)
    log = json.loads((tmp / "out" / "models" / "train_log.json").read_text())
    assert log["vae_epoch_loss"][-1] <= log["vae_epoch_loss"][0]


def test_variance_error_metric_changes_error_model(tmp_path):
    cfg = config_file(tmp_path)
    assert run("prepare", "-c", cfg) == 0
    models = {}
    for centered in ("false", "true"):
        assert run("train", "-c", cfg, "--set", "error_metric=variance", "--set", f"centered_variance={centered}") == 0
        models[centered] = read(tmp_path / "out" / "models" / "error_model.json")
    assert models["false"] != models["true"]


def test_missing_artifact(tmp_path, capsys):
    cfg = config_file(tmp_path)
    assert run("train", "-c", cfg) == 3
    assert "run the earlier pipeline stage" in capsys.readouterr().err


def test_calibrate_rate_within_one_over_n(trained):
    tmp, cfg = trained
    for rate in (0.05, 0.10):
        for mode in ("novelty_only", "ambiguity_only", "dual"):
            assert run("calibrate", "-c", cfg, "--target-rate", rate, "--mode", mode) == 0
            rej = json.loads((tmp / "out" / "rejector.json").read_text())
            assert abs(rej["validation_rate"] - rate) <= 1.0 / rej["n_validation"]
            assert rej["mode"] == mode


def test_ambiguity_only_disables_novelty(trained):
    tmp, cfg = trained
    assert run("calibrate", "-c", cfg, "--mode", "ambiguity_only") == 0
    rej = json.loads((tmp / "out" / "rejector.json").read_text())
    assert rej["novelty"]["d_threshold"] is None


def rej_n_validation(tmp):
    return len(json.loads((tmp / "out" / "prepared" / "split.json").read_text())["validation"])


def test_interval_calibration(trained):
    tmp, cfg = trained
    assert run("calibrate", "-c", cfg, "--set", "calibration=interval", "--set", "interval_width=1.0",
               "--mode", "ambiguity_only") == 0
    rej = json.loads((tmp / "out" / "rejector.json").read_text())
    amb = rej["ambiguity"]
    assert amb["calibration"] == "interval"
    assert amb["width"] == 1.0
    assert amb["dof"] == rej_n_validation(tmp) - 1
    assert amb["var_threshold"] == pytest.approx((1.0 / (2 * t_quantile(0.05, amb["dof"]))) ** 2, rel=1e-12)


def test_evaluate_mode_none_is_plain_forecaster(trained, capsys):
    tmp, cfg = trained
    assert run("calibrate", "-c", cfg, "--mode", "none") == 0
    capsys.readouterr()
    assert run("evaluate", "-c", cfg, "--mode", "none") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["epsilon"] == 0.0
    assert summary["mse_accepted"] == summary["mse_all"]
    rows = (tmp / "out" / "reports" / "evaluate_per_window.csv").read_text().splitlines()
    assert rows[0] == "origin_index,decision,loss,variance_score,novelty_score"


def test_evaluate_dual_report(trained):
    tmp, cfg = trained
    assert run("calibrate", "-c", cfg) == 0
    assert run("evaluate", "-c", cfg) == 0
    summary = json.loads((tmp / "out" / "reports" / "evaluate_summary.json").read_text())
    assert summary["bound_ideal"] <= summary["bound_random"]
    assert summary["mode"] == "dual"
    assert (tmp / "out" / "reports" / "novelty_scores.csv").exists()


def test_sweep_default_grid(trained, capsys):
    tmp, cfg = trained
    capsys.readouterr()
    assert run("sweep", "-c", cfg) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("target_rate,realized_rate,var_threshold,d_threshold,mae_accepted")
    assert [float(line.split(",")[0]) for line in lines[1:]] == [0.0, 0.02, 0.06, 0.10, 0.12, 0.16]
    assert lines[1].split(",")[2:4] == ["inf", "inf"]


def test_ablate_rows(trained):
    tmp, cfg = trained
    assert run("ablate", "-c", cfg) == 0
    lines = (tmp / "out" / "reports" / "ablation.csv").read_text().splitlines()
    assert [line.split(",")[0] for line in lines[1:]] == ["Base", "NRO", "ARO", "DRM"]


def test_predict_json(trained, capsys, tmp_path):
    tmp, cfg = trained
    assert run("calibrate", "-c", cfg) == 0
    capsys.readouterr()
    assert run("predict", "-c", cfg, "--origin", 0) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["decision"] in (0, 1)
    assert out["novelty_score"] >= 0
    if out["decision"] == 0:
        assert np.asarray(out["forecast"]).shape == (8, 3)
    # a raw window read from disk gives the same answer as the origin index
    series = generate_benchmark(2000, seed=0)
    lines = ["date,sig0,sig1,vol"] + [f"{t}," + ",".join(repr(float(v)) for v in row)
                                      for t, row in zip(series.timestamps[:16], series.values[:16])]
    p = tmp_path / "window.csv"
    p.write_text("\n".join(lines) + "\n")
    assert run("predict", "-c", cfg, "--input", p) == 0
    out2 = json.loads(capsys.readouterr().out)
    assert out2["decision"] == out["decision"]
    assert out2["novelty_score"] == pytest.approx(out["novelty_score"], rel=1e-9)
    assert run("predict", "-c", cfg) == 2


def test_exit_codes(tmp_path, capsys):
    assert run("prepare", "-c", tmp_path / "nope.json") == 2
    bad = config_file(tmp_path, "bad.json", L=10 ** 6)
    assert run("prepare", "-c", bad) == 3
    assert run("prepare", "-c", config_file(tmp_path, "c.json"), "--set", "wibble=1") == 2
    assert run("prepare", "-c", config_file(tmp_path, "d.json"), "--set", "split_ratios=[0.5,0.5,0.5]") == 2


def test_external_csv_dataset(tmp_path):
    csv_path = tmp_path / "series.csv"
    write_csv(generate_benchmark(1500, seed=2), csv_path)
    cfg = config_file(tmp_path, dataset=str(csv_path))
    assert run("run", "-c", cfg) == 0
    manifest = json.loads((tmp_path / "out" / "prepared" / "manifest.json").read_text())
    assert len(manifest["data_sha256"]) == 64
    assert (tmp_path / "out" / "run_manifest.json").exists()


def test_env_overrides_file_but_not_flags(tmp_path):
    p = config_file(tmp_path)
    assert load_config(p, env={OUTPUT_DIR_ENV: "envdir"}).output_dir == "envdir"
    assert load_config(p, {"output_dir": "flagdir"}, env={OUTPUT_DIR_ENV: "envdir"}).output_dir == "flagdir"
    assert load_config(p, env={}).output_dir == str(tmp_path / "out")


def test_config_validation():
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(None, {"lookback": 3}, env={})
    with pytest.raises(ConfigError):
        load_config(None, {"rejection_mode": "triple"}, env={})
    with pytest.raises(ConfigError):
        load_config(None, {"calibration": "interval"}, env={})
    with pytest.raises(ConfigError):
        load_config(None, {"L": 2.5}, env={})
    cfg = load_config(None, {"L": "24", "sweep_rates": "[0, 0.1]"}, env={})
    assert cfg.L == 24 and cfg.sweep_rates == [0.0, 0.1]
    assert RunConfig().sweep_rates == [0.0, 0.02, 0.06, 0.10, 0.12, 0.16]
    assert math.isclose(sum(RunConfig().split_ratios), 1.0)


def test_run_manifest_reloads_as_config(trained):
    tmp, cfg = trained
    manifest = tmp / "out" / "run_manifest.json"
    assert load_config(manifest, env={}).to_dict() == load_config(cfg, env={}).to_dict()
