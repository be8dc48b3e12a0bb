"""Novelty rejection: Mahalanobis distance of a window's VAE latent mean from
the moment-matched latent distribution of the training windows."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats as sps

from .errors import DataError
from .stats import GaussianSummary, fit_gaussian_summary, mahalanobis, rate_threshold
from .vae import VAEParams, encode


def _flatten(windows) -> np.ndarray:
    if isinstance(windows, np.ndarray):
        return windows.reshape(len(windows), -1) if windows.ndim > 2 else windows
    return np.stack([np.asarray(getattr(w, "input", w), dtype=float).ravel() for w in windows])


def fit_latent_summary(vae_params: VAEParams, train_windows, reg_scale: float = 1e-6) -> GaussianSummary:
    """Encode every training window and moment-match the posterior mixture."""
    X = _flatten(train_windows)
    if len(X) < 2:
        raise DataError("need at least 2 training windows")
    enc = encode(vae_params, X)
    return fit_gaussian_summary(enc.mu, enc.var, reg_scale=reg_scale)


@dataclass(eq=False)
class NoveltyRejector:
    vae_params: VAEParams
    summary: GaussianSummary
    d_threshold: float = math.inf
    target_rate: Optional[float] = None
    realized_rate: Optional[float] = None

    def __post_init__(self) -> None:
        if self.summary.dim != self.vae_params.latent_dim:
            raise ValueError("summary dimension differs from the VAE latent dimension")
        if not self.d_threshold >= 0:
            raise ValueError("d_threshold must be >= 0")

    def scores(self, windows) -> np.ndarray:
        return np.atleast_1d(mahalanobis(encode(self.vae_params, _flatten(windows)).mu, self.summary))

    def to_dict(self) -> dict:
        # the VAE itself is stored in its own file
        return {
            "d_threshold": None if math.isinf(self.d_threshold) else self.d_threshold,
            "target_rate": self.target_rate,
            "realized_rate": self.realized_rate,
            "summary": self.summary.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, vae_params: VAEParams) -> "NoveltyRejector":
        thr = math.inf if d.get("d_threshold") is None else float(d["d_threshold"])
        return cls(vae_params, GaussianSummary.from_dict(d["summary"]), thr,
                   d.get("target_rate"), d.get("realized_rate"))


def novelty_score(rejector: NoveltyRejector, window) -> float:
    x = np.asarray(getattr(window, "input", window), dtype=float).ravel()
    return float(mahalanobis(encode(rejector.vae_params, x).mu, rejector.summary))


def decide_novelty(rejector_or_threshold, score):
    """1 where the score strictly exceeds the threshold; an infinite threshold never fires."""
    thr = getattr(rejector_or_threshold, "d_threshold", rejector_or_threshold)
    out = (np.asarray(score) > thr).astype(int)
    return int(out) if out.ndim == 0 else out


def calibrate_novelty(val_scores, target_rate: float) -> float:
    """Empirical ``1 - target_rate`` quantile of in-distribution validation scores."""
    scores = np.asarray(val_scores, dtype=float).ravel()
    if scores.size == 0:
        raise DataError("no validation scores to calibrate on")
    return rate_threshold(scores, target_rate)


def chi_threshold(latent_dim: int, target_rate: float) -> float:
    """Heuristic threshold assuming latent means are exactly Gaussian.

    Under that assumption the distance follows a chi distribution with
    ``latent_dim`` degrees of freedom. Real latents are not Gaussian, so the
    realized rate drifts; prefer :func:`calibrate_novelty` when validation data
    exist.
    """
    if not 0.0 < target_rate < 1.0:
        raise ValueError("target_rate must lie in (0, 1)")
    return float(sps.chi.isf(target_rate, latent_dim))
