"""Command-line driver.

Stages hand off through files under ``output_dir``::

    prepared/   manifest.json, norm_stats.json, split.json, series_normalized.csv
    models/     forecaster.json, vae.json, latent_summary.json, error_model.json, train_log.json
    rejector.json
    reports/    evaluate_summary.json, evaluate_per_window.csv, sweep.csv, ablation.csv,
                novelty_scores.csv
    run_manifest.json

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .ambiguity import ErrorVarianceEstimator, fit_error_model
from .config import RunConfig, config_hash, load_config
from .errors import ConfigError, DataError, DualRejectError
from .forecaster import (MLPHyperparams, collect_residuals, fit_mlp, fit_ridge, forecaster_from_dict,
                         load_predictions_csv)
from .novelty import fit_latent_summary
from .pipeline import (ABLATION_LABELS, SWEEP_COLUMNS, DualRejector, RejectorFamily, decide_total, featurize,
                       rows_to_csv, score_windows, report_from_scores, sweep_table)
from .stats import GaussianSummary
from .synthetic import generate_benchmark
from .tsio import (DatasetSplit, NormalizationStats, RawSeries, build_dataset, load_csv, make_windows)
from .vae import TrainLog, VAEHyperparams, VAEParams, train_vae

log = logging.getLogger("dualreject")


# ---------------------------------------------------------------------------
# file helpers


def _dump_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    if not path.exists():
        raise DataError(f"missing artifact {path}; run the earlier pipeline stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_series_csv(series: RawSeries, path: Path) -> None:
    lines = [",".join(("date",) + series.variable_names)]
    lines += [stamp + "," + ",".join(repr(float(v)) for v in row) for stamp, row in zip(series.timestamps, series.values)]
    _write_text(path, "\n".join(lines) + "\n")


def _out(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir)


def _load_raw(cfg: RunConfig) -> RawSeries:
    if cfg.dataset == "synthetic":
        return generate_benchmark(cfg.synthetic_steps, seed=cfg.synthetic_seed)
    return load_csv(cfg.dataset, cfg.has_header)


# ---------------------------------------------------------------------------
# prepared data


def cmd_prepare(cfg: RunConfig) -> dict:
    series = _load_raw(cfg)
    split, normed = build_dataset(series, cfg.L, cfg.S, cfg.stride, cfg.split_ratios)
    out = _out(cfg) / "prepared"
    subset = cfg.prepare_subset()
    data_hash = None if cfg.dataset == "synthetic" else _sha256(Path(cfg.dataset))
    manifest = {
        "config": subset,
        "data_sha256": data_hash,
        "config_hash": config_hash({"config": subset, "data_sha256": data_hash}),
        "n_steps": series.n_steps,
        "n_vars": series.n_vars,
        "variable_names": list(series.variable_names),
        "counts": {"train": len(split.train), "validation": len(split.validation), "test": len(split.test)},
    }
    _write_series_csv(normed, out / "series_normalized.csv")
    _dump_json(out / "norm_stats.json", split.norm_stats.to_dict())
    _dump_json(out / "split.json", {
        "L": cfg.L, "S": cfg.S, "stride": cfg.stride,
        "train": [w.origin_index for w in split.train],
        "validation": [w.origin_index for w in split.validation],
        "test": [w.origin_index for w in split.test],
    })
    _dump_json(out / "manifest.json", manifest)
    log.info("prepared %d/%d/%d windows in %s", len(split.train), len(split.validation), len(split.test), out)
    return manifest


def load_prepared(cfg: RunConfig):
    out = _out(cfg) / "prepared"
    meta = _read_json(out / "split.json")
    stats = NormalizationStats.from_dict(_read_json(out / "norm_stats.json"))
    if not (out / "series_normalized.csv").exists():
        raise DataError(f"missing artifact {out / 'series_normalized.csv'}; run prepare first")
    normed = load_csv(out / "series_normalized.csv", True)
    if (meta["L"], meta["S"], meta["stride"]) != (cfg.L, cfg.S, cfg.stride):
        raise ConfigError("prepared windows do not match L/S/stride in the config; rerun prepare")
    by_origin = {w.origin_index: w for w in make_windows(normed, meta["L"], meta["S"], meta["stride"])}
    split = DatasetSplit(*[[by_origin[o] for o in meta[k]] for k in ("train", "validation", "test")], stats)
    return split, normed


# ---------------------------------------------------------------------------
# training


def _external_predictions(cfg: RunConfig, n_vars: int):
    if not cfg.predictions_file:
        return None
    return load_predictions_csv(cfg.predictions_file, cfg.S, n_vars)


def cmd_train(cfg: RunConfig) -> None:
    split, normed = load_prepared(cfg)
    out = _out(cfg) / "models"
    preds = _external_predictions(cfg, normed.n_vars)
    if cfg.forecaster == "ridge":
        model = fit_ridge(split.train, cfg.ridge_lambda, cfg.seed)
    elif cfg.forecaster == "mlp":
        model = fit_mlp(split.train, MLPHyperparams(cfg.mlp_hidden, cfg.mlp_epochs, cfg.mlp_lr, cfg.mlp_batch_size),
                        cfg.seed)
    else:
        model = None
    train_x = np.stack([w.input.ravel() for w in split.train])
    vae_log = TrainLog()
    vae_hp = VAEHyperparams(cfg.vae_latent_dim, cfg.vae_hidden_dim, cfg.vae_epochs, cfg.vae_lr, cfg.vae_batch_size)
    vae_params = train_vae(train_x, vae_hp, cfg.seed, train_log=vae_log)
    summary = fit_latent_summary(vae_params, train_x)
    records = collect_residuals(model, split.validation, cfg.error_metric, predictions=preds,
                                centered=cfg.centered_variance)
    feats = featurize(np.stack([w.input for w in split.validation]), cfg.feature_mode, vae_params)
    estimator = fit_error_model(records, cfg.feature_mode, cfg.seed, features=feats, ridge=cfg.error_ridge)

    _dump_json(out / "forecaster.json", model.to_dict() if model is not None else {"kind": "external"})
    _dump_json(out / "vae.json", vae_params.to_dict())
    _dump_json(out / "latent_summary.json", summary.to_dict())
    _dump_json(out / "error_model.json", estimator.to_dict())
    train_log = {"vae_epoch_loss": vae_log.epoch_losses, "vae_epoch_recon": vae_log.epoch_recon,
                 "vae_epoch_kl": vae_log.epoch_kl}
    if cfg.forecaster == "mlp":
        train_log["mlp_epoch_mse"] = model.loss_history
    _dump_json(out / "train_log.json", train_log)


def load_models(cfg: RunConfig):
    out = _out(cfg) / "models"
    fdict = _read_json(out / "forecaster.json")
    model = None if fdict.get("kind") == "external" else forecaster_from_dict(fdict)
    vae_params = VAEParams.from_dict(_read_json(out / "vae.json"))
    summary = GaussianSummary.from_dict(_read_json(out / "latent_summary.json"))
    estimator = ErrorVarianceEstimator.from_dict(_read_json(out / "error_model.json"))
    return model, vae_params, summary, estimator


def _family(cfg: RunConfig, split: DatasetSplit):
    model, vae_params, summary, estimator = load_models(cfg)
    width = cfg.interval_width if cfg.calibration == "interval" else None
    fam = RejectorFamily.from_validation(estimator, vae_params, summary, split.validation, cfg.alpha, width)
    return fam, model


# ---------------------------------------------------------------------------
# calibration and evaluation


def cmd_calibrate(cfg: RunConfig) -> dict:
    split, _ = load_prepared(cfg)
    fam, _ = _family(cfg, split)
    rej = fam.calibrate(cfg.target_rate, cfg.rejection_mode)
    data = rej.to_dict()
    data["validation_rate"] = fam.validation_rate(rej)
    data["n_validation"] = len(split.validation)
    _dump_json(_out(cfg) / "rejector.json", data)
    return data


def load_rejector(cfg: RunConfig) -> DualRejector:
    _, vae_params, _, _ = load_models(cfg)
    return DualRejector.from_dict(_read_json(_out(cfg) / "rejector.json"), vae_params)


def cmd_evaluate(cfg: RunConfig):
    split, normed = load_prepared(cfg)
    model, vae_params, summary, estimator = load_models(cfg)
    rej = load_rejector(cfg)
    preds = _external_predictions(cfg, normed.n_vars)
    scored = score_windows(split.test, model, estimator, vae_params, summary, preds)
    report = report_from_scores(rej, scored, cfg.risk_lambda, cfg.loss)
    out = _out(cfg) / "reports"
    summary_d = report.summary_dict()
    summary_d["rejection_cost"] = cfg.rejection_cost
    summary_d["sequence_loss"] = _mean_sequence_loss(report, cfg.rejection_cost)
    _dump_json(out / "evaluate_summary.json", summary_d)
    _write_text(out / "evaluate_per_window.csv", report.per_window_csv())
    nov_lines = ["origin_index,score,decision"] + [
        f"{o},{'' if math.isnan(s) else repr(s)},{d}" for o, d, _, _, s in report.per_window]
    _write_text(out / "novelty_scores.csv", "\n".join(nov_lines) + "\n")
    return report


def _mean_sequence_loss(report, c: float) -> float:
    # mean of (c if rejected else window loss) over the test windows
    return float(np.mean([c if d else l for _, d, l, _, _ in report.per_window]))


def cmd_sweep(cfg: RunConfig):
    split, normed = load_prepared(cfg)
    fam, model = _family(cfg, split)
    preds = _external_predictions(cfg, normed.n_vars)
    scored = score_windows(split.test, model, fam.estimator, fam.vae_params, fam.summary, preds)
    reports = [report_from_scores(fam.calibrate(r, cfg.rejection_mode if r > 0 else "none"), scored,
                                  cfg.risk_lambda, cfg.loss) for r in cfg.sweep_rates]
    rows = sweep_table(cfg.sweep_rates, reports)
    _write_text(_out(cfg) / "reports" / "sweep.csv", rows_to_csv(rows, SWEEP_COLUMNS))
    return rows


ABLATION_COLUMNS = ("variant", "mode", "target_rate", "realized_rate", "mae_accepted", "mse_accepted", "risk",
                    "var_threshold", "d_threshold", "bound_ideal", "bound_random")


def cmd_ablate(cfg: RunConfig):
    split, normed = load_prepared(cfg)
    fam, model = _family(cfg, split)
    preds = _external_predictions(cfg, normed.n_vars)
    scored = score_windows(split.test, model, fam.estimator, fam.vae_params, fam.summary, preds)
    rows = []
    for label, mode in ABLATION_LABELS:
        rep = report_from_scores(fam.calibrate(cfg.target_rate, mode), scored, cfg.risk_lambda, cfg.loss)
        rows.append({"variant": label, "mode": mode, "target_rate": cfg.target_rate, "realized_rate": rep.epsilon,
                     "mae_accepted": rep.mae_accepted, "mse_accepted": rep.mse_accepted, "risk": rep.risk,
                     "var_threshold": rep.var_threshold, "d_threshold": rep.d_threshold,
                     "bound_ideal": rep.bound_ideal, "bound_random": rep.bound_random})
    _write_text(_out(cfg) / "reports" / "ablation.csv", rows_to_csv(rows, ABLATION_COLUMNS))
    return rows


def cmd_predict(cfg: RunConfig, origin: Optional[int] = None, input_path: Optional[str] = None) -> dict:
    split, normed = load_prepared(cfg)
    model, _, _, _ = load_models(cfg)
    rej = load_rejector(cfg)
    stats = split.norm_stats
    if (origin is None) == (input_path is None):
        raise ConfigError("predict needs exactly one of --origin or --input")
    if origin is not None:
        if not 0 <= origin <= normed.n_steps - cfg.L:
            raise DataError(f"origin {origin} out of range")
        x = normed.values[origin:origin + cfg.L]
    else:
        raw = load_csv(input_path, cfg.has_header)
        if raw.values.shape != (cfg.L, normed.n_vars):
            raise DataError(f"input window must be {cfg.L} x {normed.n_vars}, got {raw.values.shape}")
        x = stats.normalize(raw.values)
    td = decide_total(rej, x)
    out = {"origin_index": origin, "decision": td.decision, "novelty_score": td.novelty_score,
           "variance_score": td.variance_score, "mode": rej.mode, "forecast": None}
    if td.decision == 0 and model is not None:
        out["forecast"] = stats.denormalize(model.predict(x)).tolist()
    return out


# ---------------------------------------------------------------------------
# entry point


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualreject", description="Selective time-series forecasting with dual rejection.")
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file (or a run_manifest.json)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--mode", dest="rejection_mode", choices=("none", "novelty_only", "ambiguity_only", "dual"))
    common.add_argument("--target-rate", type=float)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("prepare", "load, normalize, window and split the dataset"),
        ("train", "fit forecaster, VAE and error-variance model"),
        ("calibrate", "set rejection thresholds on validation data"),
        ("evaluate", "risk report on the test split"),
        ("sweep", "recalibrate across target rates and report each"),
        ("ablate", "compare Base / NRO / ARO / DRM at one target rate"),
        ("run", "prepare, train, calibrate, evaluate, sweep and ablate in order"),
    ):
        sub.add_parser(name, parents=[common], help=helptext)
    pr = sub.add_parser("predict", parents=[common], help="decision and scores for one window, as JSON")
    pr.add_argument("--origin", type=int)
    pr.add_argument("--input", dest="input_path")
    return p


def resolve_config(args) -> RunConfig:
    overrides = _parse_set(args.set)
    for key in ("seed", "output_dir", "rejection_mode", "target_rate"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return load_config(args.config, overrides)


def _write_run_manifest(cfg: RunConfig) -> None:
    d = cfg.to_dict()
    _dump_json(_out(cfg) / "run_manifest.json", {"config": d, "config_hash": config_hash(d), "version": __version__})


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _write_run_manifest(cfg)
        cmd = args.command
        if cmd == "predict":
            print(json.dumps(cmd_predict(cfg, args.origin, args.input_path), indent=1))
        elif cmd == "run":
            cmd_prepare(cfg)
            cmd_train(cfg)
            cmd_calibrate(cfg)
            cmd_evaluate(cfg)
            cmd_sweep(cfg)
            cmd_ablate(cfg)
        else:
            result = {"prepare": cmd_prepare, "train": cmd_train, "calibrate": cmd_calibrate,
                      "evaluate": cmd_evaluate, "sweep": cmd_sweep, "ablate": cmd_ablate}[cmd](cfg)
            if cmd == "evaluate":
                print(result.to_json())
            elif cmd in ("sweep", "ablate"):
                print(rows_to_csv(result, SWEEP_COLUMNS if cmd == "sweep" else ABLATION_COLUMNS), end="")
            elif cmd == "calibrate":
                print(json.dumps({"mode": result["mode"], "validation_rate": result["validation_rate"]}))
    except DualRejectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
