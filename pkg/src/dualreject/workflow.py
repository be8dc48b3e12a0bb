"""Fit every component of the selective forecaster from a prepared split."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .ambiguity import ErrorVarianceEstimator, fit_error_model
from .forecaster import MLPHyperparams, collect_residuals, fit_mlp, fit_ridge
from .novelty import fit_latent_summary
from .pipeline import RejectorFamily, featurize
from .stats import GaussianSummary
from .tsio import DatasetSplit
from .vae import TrainLog, VAEHyperparams, VAEParams, train_vae


@dataclass(eq=False)
class FittedComponents:
    model: object
    vae_params: VAEParams
    summary: GaussianSummary
    estimator: ErrorVarianceEstimator
    vae_log: TrainLog = field(default_factory=TrainLog)


def fit_components(
    split: DatasetSplit,
    *,
    forecaster: str = "ridge",
    ridge_lambda: float = 1.0,
    mlp: Optional[MLPHyperparams] = None,
    vae: Optional[VAEHyperparams] = None,
    feature_mode: str = "input",
    error_metric: str = "squared",
    centered_variance: bool = False,
    error_ridge: float = 10.0,
    seed: int = 0,
) -> FittedComponents:
    """Forecaster and VAE on train windows; error-variance model on validation residuals."""
    if forecaster == "ridge":
        model = fit_ridge(split.train, ridge_lambda, seed)
    elif forecaster == "mlp":
        model = fit_mlp(split.train, mlp, seed)
    else:
        raise ValueError(f"unknown forecaster {forecaster!r}")
    train_x = np.stack([w.input.ravel() for w in split.train])
    log = TrainLog()
    vae_params = train_vae(train_x, vae, seed, train_log=log)
    summary = fit_latent_summary(vae_params, train_x)
    records = collect_residuals(model, split.validation, error_metric, centered=centered_variance)
    feats = featurize(np.stack([w.input for w in split.validation]), feature_mode, vae_params)
    estimator = fit_error_model(records, feature_mode, seed, features=feats, ridge=error_ridge)
    return FittedComponents(model, vae_params, summary, estimator, log)


def build_family(fitted: FittedComponents, split: DatasetSplit, alpha: float = 0.05,
                 interval_width: Optional[float] = None) -> RejectorFamily:
    return RejectorFamily.from_validation(fitted.estimator, fitted.vae_params, fitted.summary,
                                          split.validation, alpha, interval_width)
