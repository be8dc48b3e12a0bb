"""Ambiguity rejection from an estimated per-window error variance.

Ground truth is unavailable at test time, so the error variance of a window is
predicted from its features by a log-linear regressor fitted on validation
residuals. A window is rejected when that estimate strictly exceeds
``(W / (2 t_{alpha/2, n-1}))**2``; the threshold can be set from an interval
width W directly, or from a target rejection rate (W is then back-solved so
both parameterizations stay interchangeable).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .forecaster import ResidualRecord, window_errors
from .stats import ConfidenceSpec, rate_threshold, variance_threshold, width_for_threshold

FEATURE_MODES = ("input", "latent")
EPS_FLOOR = 1e-8
MIN_RECORDS = 10


@dataclass(eq=False)
class ErrorVarianceEstimator:
    """``exp(a + b . phi(f))`` with ``phi`` = standardized features (and their squares)."""

    coef: np.ndarray
    intercept: float
    feat_mean: np.ndarray
    feat_scale: np.ndarray
    feature_mode: str = "input"
    quadratic: bool = False
    ridge: float = 10.0

    def _design(self, features) -> np.ndarray:
        F = np.atleast_2d(np.asarray(features, dtype=float))
        if F.shape[1] != self.feat_mean.shape[0]:
            raise ValueError(f"expected {self.feat_mean.shape[0]} features, got {F.shape[1]}")
        Z = (F - self.feat_mean) / self.feat_scale
        return np.hstack([Z, Z**2]) if self.quadratic else Z

    def log_predict(self, features) -> np.ndarray:
        return self.intercept + self._design(features) @ self.coef

    def predict(self, features):
        out = np.exp(self.log_predict(features))
        return float(out[0]) if np.ndim(features) == 1 else out

    def to_dict(self) -> dict:
        return {
            "feature_mode": self.feature_mode,
            "quadratic": self.quadratic,
            "ridge": self.ridge,
            "intercept": self.intercept,
            "coef": self.coef.tolist(),
            "feat_mean": self.feat_mean.tolist(),
            "feat_scale": self.feat_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorVarianceEstimator":
        return cls(np.array(d["coef"], dtype=float), float(d["intercept"]),
                   np.array(d["feat_mean"], dtype=float), np.array(d["feat_scale"], dtype=float),
                   d["feature_mode"], bool(d["quadratic"]), float(d["ridge"]))


def fit_error_model(
    records: Sequence[ResidualRecord],
    feature_mode: str = "input",
    seed: int = 0,
    *,
    features: Optional[np.ndarray] = None,
    quadratic: bool = False,
    ridge: float = 10.0,
) -> ErrorVarianceEstimator:
    """Ridge least squares of ``log(e_i + 1e-8)`` on the window features.

    Fit this on validation residuals: training residuals understate the error
    a deployed forecaster makes. ``features`` overrides the records' own
    features (used for latent-mode features). ``seed`` is unused; the fit is
    closed form.
    """
    if feature_mode not in FEATURE_MODES:
        raise ValueError(f"feature_mode must be one of {FEATURE_MODES}")
    if len(records) < MIN_RECORDS:
        raise DataError(f"need at least {MIN_RECORDS} residual records, got {len(records)}")
    F = np.stack([r.features for r in records]) if features is None else np.asarray(features, dtype=float)
    if len(F) != len(records):
        raise ValueError("features and records differ in length")
    if np.all(F == F[0]):
        raise DataError("degenerate features: every record has identical features")
    y = np.log(np.array([r.error for r in records]) + EPS_FLOOR)
    mean = F.mean(axis=0)
    scale = F.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    est = ErrorVarianceEstimator(np.zeros(0), 0.0, mean, scale, feature_mode, quadratic, ridge)
    Z = est._design(F)
    z_mean = Z.mean(axis=0)
    Zc = Z - z_mean
    gram = Zc.T @ Zc
    gram[np.diag_indices_from(gram)] += ridge
    coef = np.linalg.solve(gram, Zc.T @ (y - y.mean()))
    est.coef = coef
    est.intercept = float(y.mean() - z_mean @ coef)
    return est


def decide_variance(var_estimate, var_threshold: float):
    """1 where the estimate strictly exceeds the threshold; equality accepts."""
    out = (np.asarray(var_estimate) > var_threshold).astype(int)
    return int(out) if out.ndim == 0 else out


@dataclass(eq=False)
class AmbiguityRejector:
    estimator: Optional[ErrorVarianceEstimator]
    var_threshold: float
    spec: ConfidenceSpec
    width: float
    calibration: str = "rate"
    target_rate: Optional[float] = None
    realized_rate: Optional[float] = None

    def scores(self, features) -> np.ndarray:
        if self.estimator is None:
            raise ValueError("ambiguity rejector has no error-variance estimator")
        return self.estimator.predict(features)

    def to_dict(self) -> dict:
        return {
            "var_threshold": self.var_threshold,
            "alpha": self.spec.alpha,
            "dof": self.spec.dof,
            "width": self.width,
            "calibration": self.calibration,
            "target_rate": self.target_rate,
            "realized_rate": self.realized_rate,
            "estimator": None if self.estimator is None else self.estimator.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AmbiguityRejector":
        est = None if d.get("estimator") is None else ErrorVarianceEstimator.from_dict(d["estimator"])
        return cls(est, float(d["var_threshold"]), ConfidenceSpec(d["alpha"], d["dof"]), float(d["width"]),
                   d.get("calibration", "rate"), d.get("target_rate"), d.get("realized_rate"))


def decide_ambiguity(rejector: AmbiguityRejector, window_features):
    return decide_variance(rejector.scores(window_features), rejector.var_threshold)


def calibrate_ambiguity(
    val_scores,
    target_rate: Optional[float] = None,
    *,
    spec: Optional[ConfidenceSpec] = None,
    width: Optional[float] = None,
    alpha: float = 0.05,
    estimator: Optional[ErrorVarianceEstimator] = None,
) -> AmbiguityRejector:
    """Rate mode (``target_rate``) or interval mode (``width``).

    The t interval's degrees of freedom default to ``len(val_scores) - 1``.
    Whichever mode is used, the rejector records both the variance threshold
    and the equivalent width.
    """
    scores = np.asarray(val_scores, dtype=float).ravel()
    if scores.size == 0:
        raise DataError("no validation scores to calibrate on")
    if spec is None:
        spec = ConfidenceSpec.from_sample_size(alpha, max(scores.size, 2))
    if (target_rate is None) == (width is None):
        raise ValueError("give exactly one of target_rate or width")
    if target_rate is not None:
        thr = rate_threshold(scores, target_rate)
        w = width_for_threshold(thr, spec)
        mode = "rate"
    else:
        thr = variance_threshold(width, spec)
        w = float(width)
        mode = "interval"
    realized = float(np.mean(scores > thr))
    return AmbiguityRejector(estimator, thr, spec, w, mode, target_rate, realized)


def sequence_rejection_loss(prediction, truth, decision: int, c: float, loss: str = "mse") -> float:
    """Rejection cost ``c`` when rejected, else the window loss."""
    if c < 0:
        raise ValueError("rejection cost must be >= 0")
    if decision:
        return float(c)
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape:
        raise ValueError(f"shape mismatch: prediction {prediction.shape} vs truth {truth.shape}")
    metric = {"mse": "squared", "mae": "absolute"}[loss]
    return float(window_errors(prediction[None], truth[None], metric)[0])
