"""Dual rejection, risk evaluation, reference bounds, sweeps and ablations.

A window is rejected when its novelty score exceeds ``d_threshold`` or its
estimated error variance exceeds ``var_threshold``. Novelty is checked first
and the variance estimate is skipped for windows it already rejects.

Empirical risk with hard decisions::

    R = (1 - eps) * L_accepted + lam * eps

The ideal reference drops the eps highest-loss windows; the random
reference keeps the full-set mean loss.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from .ambiguity import AmbiguityRejector, ErrorVarianceEstimator, calibrate_ambiguity
from .errors import ConfigError
from .forecaster import collect_residuals, predict_windows, window_errors
from .novelty import NoveltyRejector, calibrate_novelty
from .stats import ConfidenceSpec, GaussianSummary, mahalanobis, threshold_for_count, width_for_threshold
from .tsio import WindowPair
from .vae import VAEParams, encode

MODES = ("none", "novelty_only", "ambiguity_only", "dual")
ABLATION_LABELS = (("Base", "none"), ("NRO", "novelty_only"), ("ARO", "ambiguity_only"), ("DRM", "dual"))
TABLE3_RATES = (0.0, 0.02, 0.06, 0.10, 0.12, 0.16)
LOSSES = {"mse": "squared", "mae": "absolute"}
SWEEP_COLUMNS = ("target_rate", "realized_rate", "var_threshold", "d_threshold", "mae_accepted",
                 "mse_accepted", "risk", "bound_ideal", "bound_random")


def featurize(inputs: np.ndarray, feature_mode: str, vae_params: Optional[VAEParams] = None) -> np.ndarray:
    """Ambiguity features: the flattened input window, or its VAE latent mean."""
    X = np.asarray(inputs, dtype=float).reshape(len(inputs), -1)
    if feature_mode == "input":
        return X
    if feature_mode == "latent":
        if vae_params is None:
            raise ConfigError("latent feature mode needs trained VAE parameters")
        return encode(vae_params, X).mu
    raise ConfigError(f"unknown feature mode {feature_mode!r}")


@dataclass(eq=False)
class DualRejector:
    ambiguity: Optional[AmbiguityRejector]
    novelty: Optional[NoveltyRejector]
    mode: str = "dual"

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_novelty(self) -> bool:
        return self.mode in ("dual", "novelty_only")

    @property
    def uses_ambiguity(self) -> bool:
        return self.mode in ("dual", "ambiguity_only")

    @property
    def var_threshold(self) -> float:
        return self.ambiguity.var_threshold if self.uses_ambiguity and self.ambiguity else math.inf

    @property
    def d_threshold(self) -> float:
        return self.novelty.d_threshold if self.uses_novelty and self.novelty else math.inf

    def check(self) -> None:
        if self.uses_novelty and self.novelty is None:
            raise ConfigError(f"mode {self.mode!r} needs a calibrated novelty rejector")
        if self.uses_ambiguity and (self.ambiguity is None or self.ambiguity.estimator is None):
            raise ConfigError(f"mode {self.mode!r} needs a calibrated ambiguity rejector")

    def _vae(self) -> Optional[VAEParams]:
        return self.novelty.vae_params if self.novelty is not None else None

    def variance_scores(self, inputs) -> np.ndarray:
        est = self.ambiguity.estimator
        return np.atleast_1d(est.predict(featurize(inputs, est.feature_mode, self._vae())))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "ambiguity": None if self.ambiguity is None else self.ambiguity.to_dict(),
            "novelty": None if self.novelty is None else self.novelty.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, vae_params: Optional[VAEParams] = None) -> "DualRejector":
        amb = None if d.get("ambiguity") is None else AmbiguityRejector.from_dict(d["ambiguity"])
        nov = None
        if d.get("novelty") is not None:
            if vae_params is None:
                raise ConfigError("novelty rejector needs the trained VAE parameters")
            nov = NoveltyRejector.from_dict(d["novelty"], vae_params)
        return cls(amb, nov, d["mode"])


class TotalDecision(NamedTuple):
    decision: int
    novelty_score: Optional[float]
    variance_score: Optional[float]  # None when skipped or inactive


def decide_batch(rejector: DualRejector, inputs):
    """Decisions, novelty scores and variance scores for a batch of input windows.

    Inactive scores are NaN; so are variance scores of windows the novelty
    check already rejected (those are never computed).
    """
    rejector.check()
    X = np.asarray(inputs, dtype=float)
    n = len(X)
    nov = np.full(n, np.nan)
    var = np.full(n, np.nan)
    reject = np.zeros(n, dtype=bool)
    if rejector.uses_novelty:
        nov = rejector.novelty.scores(X)
        reject |= nov > rejector.novelty.d_threshold
    if rejector.uses_ambiguity:
        todo = ~reject
        if np.any(todo):
            var[todo] = rejector.variance_scores(X[todo])
            reject[todo] = var[todo] > rejector.ambiguity.var_threshold
    return reject.astype(int), nov, var


def decide_total(rejector: DualRejector, window) -> TotalDecision:
    x = np.asarray(getattr(window, "input", window), dtype=float)
    dec, nov, var = decide_batch(rejector, x[None])

    def opt(v):
        return None if np.isnan(v) else float(v)

    return TotalDecision(int(dec[0]), opt(nov[0]), opt(var[0]))


# ---------------------------------------------------------------------------
# bounds


def _check_bound_args(losses, epsilon, lam):
    l = np.asarray(losses, dtype=float).ravel()
    if l.size == 0:
        raise ValueError("empty loss vector")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return l


def ideal_rejection_order(losses, origins=None) -> np.ndarray:
    """Indices by descending loss, ties by ascending origin index."""
    l = np.asarray(losses, dtype=float)
    o = np.arange(len(l)) if origins is None else np.asarray(origins)
    return np.lexsort((o, -l))


def bound_ideal(losses, epsilon: float, lam: float = 0.0, origins=None) -> float:
    """Risk of rejecting exactly an ``epsilon`` mass of the highest losses.

    When ``epsilon * n`` is not an integer the boundary window counts as
    partially rejected, so the value is the ideal risk at the same ``epsilon``
    as :func:`bound_random` rather than at a rounded-up rate.
    """
    l = _check_bound_args(losses, epsilon, lam)
    n = l.size
    ordered = l[ideal_rejection_order(l, origins)]
    drop = epsilon * n
    k = int(math.floor(drop + 1e-9))
    frac = max(drop - k, 0.0) if k < n else 0.0
    kept = ordered[k:].sum()
    if frac > 1e-9 and k < n:
        kept -= frac * ordered[k]
    ideal = float(kept / n + lam * epsilon)
    # never above the random reference; when they tie (n=1, equal losses) summation order can differ by an ulp
    return min(ideal, bound_random(l, epsilon, lam))


def bound_random(losses, epsilon: float, lam: float = 0.0) -> float:
    """Expected risk of rejecting an ``epsilon`` fraction uniformly at random."""
    l = _check_bound_args(losses, epsilon, lam)
    return float((1.0 - epsilon) * l.mean() + lam * epsilon)


# ---------------------------------------------------------------------------
# evaluation


@dataclass(eq=False)
class ScoredWindows:
    """Everything needed to evaluate a rejector on a fixed window set."""

    origins: np.ndarray
    mse: np.ndarray
    mae: np.ndarray
    novelty: np.ndarray
    variance: np.ndarray


def score_windows(
    windows: Sequence[WindowPair],
    model,
    estimator: Optional[ErrorVarianceEstimator] = None,
    vae_params: Optional[VAEParams] = None,
    summary: Optional[GaussianSummary] = None,
    predictions=None,
) -> ScoredWindows:
    origins = np.array([w.origin_index for w in windows])
    if predictions is not None:
        mse = np.array([r.error for r in collect_residuals(None, windows, "squared", predictions)])
        mae = np.array([r.error for r in collect_residuals(None, windows, "absolute", predictions)])
    else:
        pred = predict_windows(model, windows)
        truth = np.stack([w.target for w in windows])
        mse = window_errors(pred, truth, "squared")
        mae = window_errors(pred, truth, "absolute")
    inputs = np.stack([w.input for w in windows])
    nov = np.full(len(windows), np.nan)
    var = np.full(len(windows), np.nan)
    if vae_params is not None and summary is not None:
        nov = np.atleast_1d(mahalanobis(encode(vae_params, inputs.reshape(len(inputs), -1)).mu, summary))
    if estimator is not None:
        var = np.atleast_1d(estimator.predict(featurize(inputs, estimator.feature_mode, vae_params)))
    return ScoredWindows(origins, mse, mae, nov, var)


@dataclass
class RiskReport:
    epsilon: float
    L_accepted: Optional[float]
    L_all: float
    risk: float
    lam: float
    loss: str
    mae_accepted: Optional[float]
    mse_accepted: Optional[float]
    mae_all: float
    mse_all: float
    bound_ideal: float
    bound_random: float
    n_windows: int
    n_rejected: int
    mode: str
    var_threshold: float
    d_threshold: float
    per_window: List[tuple] = field(default_factory=list, repr=False)

    def summary_dict(self) -> dict:
        out = {k: v for k, v in vars(self).items() if k != "per_window"}
        for k in ("var_threshold", "d_threshold"):
            if math.isinf(out[k]):
                out[k] = None
        out["lambda"] = out.pop("lam")
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary_dict(), indent=2, sort_keys=True)

    def per_window_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["origin_index", "decision", "loss", "variance_score", "novelty_score"])
        for row in self.per_window:
            w.writerow([row[0], row[1], _fmt(row[2]), _fmt(row[3]), _fmt(row[4])])
        return buf.getvalue()


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def report_from_scores(rejector: DualRejector, scored: ScoredWindows, lam: float = 0.0,
                       loss: str = "mse") -> RiskReport:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if loss not in LOSSES:
        raise ConfigError(f"loss must be one of {tuple(LOSSES)}")
    n = len(scored.origins)
    reject = np.zeros(n, dtype=bool)
    nov = np.full(n, np.nan)
    var = np.full(n, np.nan)
    if rejector.uses_novelty:
        rejector.check()
        nov = scored.novelty
        reject |= nov > rejector.d_threshold
    if rejector.uses_ambiguity:
        rejector.check()
        var = np.where(reject, np.nan, scored.variance)
        reject |= ~reject & (scored.variance > rejector.var_threshold)
    losses = scored.mse if loss == "mse" else scored.mae
    accepted = ~reject
    eps = float(reject.mean())
    if accepted.any():
        L_acc = float(losses[accepted].mean())
        mae_acc = float(scored.mae[accepted].mean())
        mse_acc = float(scored.mse[accepted].mean())
        risk = (1.0 - eps) * L_acc + lam * eps
        b_ideal = bound_ideal(losses, eps, lam, scored.origins)
        b_rand = bound_random(losses, eps, lam)
    else:
        L_acc = mae_acc = mse_acc = None
        risk = b_ideal = b_rand = lam
    per_window = [
        (int(o), int(r), float(l), float(v), float(s))
        for o, r, l, v, s in zip(scored.origins, reject, losses, var, nov)
    ]
    return RiskReport(
        epsilon=eps, L_accepted=L_acc, L_all=float(losses.mean()), risk=float(risk), lam=float(lam),
        loss=loss, mae_accepted=mae_acc, mse_accepted=mse_acc,
        mae_all=float(scored.mae.mean()), mse_all=float(scored.mse.mean()),
        bound_ideal=float(b_ideal), bound_random=float(b_rand), n_windows=n, n_rejected=int(reject.sum()),
        mode=rejector.mode, var_threshold=rejector.var_threshold, d_threshold=rejector.d_threshold,
        per_window=per_window,
    )


def evaluate(rejector: DualRejector, test: Sequence[WindowPair], model, lam: float = 0.0,
             loss: str = "mse", predictions=None) -> RiskReport:
    """Apply the rejector to every test window and assemble the risk report."""
    rejector.check()
    est = rejector.ambiguity.estimator if rejector.uses_ambiguity else None
    nov = rejector.novelty if rejector.uses_novelty else None
    vae = rejector.novelty.vae_params if rejector.novelty is not None else None
    scored = score_windows(test, model, est, vae, nov.summary if nov else None, predictions)
    return report_from_scores(rejector, scored, lam, loss)


# ---------------------------------------------------------------------------
# calibration families, sweeps, ablations


@dataclass(eq=False)
class RejectorFamily:
    """Fitted components plus validation scores; yields a calibrated rejector per target rate."""

    estimator: ErrorVarianceEstimator
    vae_params: VAEParams
    summary: GaussianSummary
    val_variance: np.ndarray
    val_novelty: np.ndarray
    alpha: float = 0.05
    interval_width: Optional[float] = None

    @classmethod
    def from_validation(cls, estimator, vae_params, summary, validation: Sequence[WindowPair],
                        alpha: float = 0.05, interval_width: Optional[float] = None) -> "RejectorFamily":
        inputs = np.stack([w.input for w in validation])
        flat = inputs.reshape(len(inputs), -1)
        val_nov = np.atleast_1d(mahalanobis(encode(vae_params, flat).mu, summary))
        val_var = np.atleast_1d(estimator.predict(featurize(inputs, estimator.feature_mode, vae_params)))
        return cls(estimator, vae_params, summary, val_var, val_nov, alpha, interval_width)

    def calibrate(self, target_rate: float, mode: str = "dual") -> DualRejector:
        """Rate-calibrate the thresholds on validation scores.

        ``dual`` gives novelty half the budget, then sets the variance
        threshold so the combined validation rate is ``target_rate``.
        Interval mode (``interval_width`` set) fixes the variance threshold
        from the t interval instead.
        """
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0.0 <= target_rate < 1.0:
            raise ConfigError(f"target_rate must lie in [0, 1), got {target_rate}")
        n = len(self.val_variance)
        spec = ConfidenceSpec.from_sample_size(self.alpha, max(n, 2))
        nov_rate = target_rate / 2 if mode == "dual" else target_rate
        d_thr = math.inf
        if mode in ("dual", "novelty_only"):
            d_thr = calibrate_novelty(self.val_novelty, nov_rate)
        novelty = NoveltyRejector(self.vae_params, self.summary, d_thr, nov_rate if mode != "ambiguity_only" else None,
                                  float(np.mean(self.val_novelty > d_thr)))
        if mode in ("dual", "ambiguity_only"):
            if self.interval_width is not None:
                amb = calibrate_ambiguity(self.val_variance, width=self.interval_width, spec=spec,
                                          estimator=self.estimator)
            else:
                keep = self.val_novelty <= d_thr
                k_total = int(math.floor(target_rate * n + 1e-9))
                k_amb = max(0, k_total - int(n - keep.sum()))
                remaining = self.val_variance[keep]
                thr = threshold_for_count(remaining, k_amb) if remaining.size else math.inf
                width = width_for_threshold(thr, spec) if math.isfinite(thr) else math.inf
                amb = AmbiguityRejector(self.estimator, thr, spec, width, "rate",
                                        target_rate - nov_rate if mode == "dual" else target_rate,
                                        float(np.mean(self.val_variance > thr)))
        else:
            amb = AmbiguityRejector(self.estimator, math.inf, spec, math.inf, "disabled")
        return DualRejector(amb, novelty, mode)

    def validation_rate(self, rejector: DualRejector) -> float:
        reject = np.zeros(len(self.val_variance), dtype=bool)
        if rejector.uses_novelty:
            reject |= self.val_novelty > rejector.d_threshold
        if rejector.uses_ambiguity:
            reject |= self.val_variance > rejector.var_threshold
        return float(reject.mean())


def sweep(family: RejectorFamily, test: Sequence[WindowPair], model, lam: float = 0.0,
          rates: Sequence[float] = TABLE3_RATES, loss: str = "mse", mode: str = "dual",
          predictions=None) -> List[RiskReport]:
    """One report per target rate; rate 0 means no rejection at all."""
    if list(rates) != sorted(rates):
        raise ConfigError("sweep rates must be sorted ascending")
    scored = score_windows(test, model, family.estimator, family.vae_params, family.summary, predictions)
    reports = []
    for r in rates:
        rej = family.calibrate(r, mode if r > 0 else "none")
        reports.append(report_from_scores(rej, scored, lam, loss))
    return reports


def sweep_table(rates: Sequence[float], reports: Sequence[RiskReport]) -> List[dict]:
    rows = []
    for r, rep in zip(rates, reports):
        rows.append({
            "target_rate": r,
            "realized_rate": rep.epsilon,
            "var_threshold": rep.var_threshold,
            "d_threshold": rep.d_threshold,
            "mae_accepted": rep.mae_accepted,
            "mse_accepted": rep.mse_accepted,
            "risk": rep.risk,
            "bound_ideal": rep.bound_ideal,
            "bound_random": rep.bound_random,
        })
    return rows


def ablate(family: RejectorFamily, test: Sequence[WindowPair], model, lam: float = 0.0,
           target_rate: float = 0.10, loss: str = "mse", predictions=None) -> List[tuple]:
    """(label, report) for Base, NRO, ARO and DRM at one target rate."""
    scored = score_windows(test, model, family.estimator, family.vae_params, family.summary, predictions)
    return [(label, report_from_scores(family.calibrate(target_rate, mode), scored, lam, loss))
            for label, mode in ABLATION_LABELS]


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row[c]) for c in columns])
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)
