"""Statistical primitives shared by the ambiguity and novelty rejectors.

Contents
--------
error_variance
    Uncentered residual second moment with an ``N - 1`` divisor.
t_quantile
    Upper ``alpha/2`` critical value of Student's t, obtained by inverting the
    regularized incomplete beta function.
variance_threshold
    Largest error variance compatible with a two-sided t interval of width W:
    ``(W / (2 * t))**2``.
fit_gaussian_summary / mahalanobis
    Latent mixture moments (per-sample posterior variance plus spread of the
    posterior means) and the covariance-scaled distance from their mean.
rate_threshold
    Order-statistic threshold that lets a fixed fraction of scores exceed it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

__all__ = [
    "ConfidenceSpec",
    "GaussianSummary",
    "betainc",
    "error_variance",
    "fit_gaussian_summary",
    "mahalanobis",
    "rate_threshold",
    "student_t_sf",
    "t_quantile",
    "threshold_for_count",
    "variance_threshold",
    "width_for_threshold",
]

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAXITER = 20000


def error_variance(errors: Sequence[float], centered: bool = False) -> float:
    """Residual variance ``sum(e**2) / (N - 1)``.

    The default is the uncentered form; ``centered=True`` subtracts the
    residual mean first (ordinary sample variance).
    """
    e = np.asarray(errors, dtype=float).ravel()
    if e.size < 2:
        raise ValueError(f"need at least 2 residuals, got {e.size}")
    if centered:
        e = e - e.mean()
    return float(np.dot(e, e) / (e.size - 1))


@dataclass(frozen=True)
class ConfidenceSpec:
    """Significance level and degrees of freedom of a t interval."""

    alpha: float
    dof: int

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if int(self.dof) != self.dof or self.dof < 1:
            raise ValueError(f"dof must be a positive integer, got {self.dof}")

    @classmethod
    def from_sample_size(cls, alpha: float, n: int) -> "ConfidenceSpec":
        return cls(alpha=alpha, dof=n - 1)

    @property
    def t_critical(self) -> float:
        return t_quantile(self.alpha, self.dof)


def _betacf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, xc: Optional[float] = None) -> float:
    """Regularized incomplete beta ``I_x(a, b)``.

    ``xc`` may carry ``1 - x`` computed without cancellation; it matters when
    x sits within a few ulps of 1 (large degrees of freedom).
    """
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if xc is None:
        xc = 1.0 - x
    if x <= 0.0:
        return 0.0
    if xc <= 0.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(xc)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, xc) / b


def student_t_sf(t: float, dof: float) -> float:
    """Upper tail probability ``P(T > t)`` for ``t >= 0``."""
    if t < 0:
        return 1.0 - student_t_sf(-t, dof)
    if t == 0:
        return 0.5
    t2 = t * t
    denom = dof + t2
    return 0.5 * betainc(0.5 * dof, 0.5, dof / denom, t2 / denom)


def _log_t_pdf(t: float, dof: float) -> float:
    return (
        math.lgamma(0.5 * (dof + 1.0)) - math.lgamma(0.5 * dof)
        - 0.5 * math.log(dof * math.pi)
        - 0.5 * (dof + 1.0) * math.log1p(t * t / dof)
    )


def t_quantile(alpha: float, dof: int) -> float:
    """Critical value ``t`` with ``P(T > t) = alpha / 2`` under ``dof`` degrees of freedom.

    Newton steps on the tail probability, kept inside a bisection bracket so a
    bad step can never leave it.
    """
    ConfidenceSpec(alpha, dof)
    target = 0.5 * alpha
    if target == 0.5:
        return 0.0
    lo, hi = 0.0, 1.0
    while student_t_sf(hi, dof) > target:
        lo, hi = hi, 2.0 * hi
        if hi > 1e300:
            raise ArithmeticError("t quantile bracket overflow")
    t = 0.5 * (lo + hi)
    for _ in range(200):
        g = student_t_sf(t, dof) - target
        if g > 0:
            lo = t
        else:
            hi = t
        slope = -math.exp(_log_t_pdf(t, dof))
        step = g / slope if slope != 0 else 0.0
        cand = t - step
        if not (lo < cand < hi):
            cand = 0.5 * (lo + hi)
        if abs(cand - t) <= 1e-14 * max(1.0, abs(t)) or hi - lo <= 1e-15 * max(1.0, hi):
            return cand
        t = cand
    return t


def variance_threshold(
    width: float,
    spec: Optional[ConfidenceSpec] = None,
    *,
    t_critical: Optional[float] = None,
) -> float:
    """Variance at which a t interval of half-width ``t * SE`` spans exactly ``width``.

    Pass either a :class:`ConfidenceSpec` or an explicit ``t_critical``.
    A zero width returns 0 with a warning; negative widths are rejected.
    """
    if t_critical is None:
        if spec is None:
            raise ValueError("either spec or t_critical is required")
        t_critical = spec.t_critical
    if width < 0:
        raise ValueError(f"interval width must be positive, got {width}")
    if width == 0:
        warnings.warn("interval width is 0: every positive variance will be rejected", stacklevel=2)
        return 0.0
    return (width / (2.0 * t_critical)) ** 2


def width_for_threshold(var_threshold: float, spec: ConfidenceSpec) -> float:
    """Inverse of :func:`variance_threshold` for a fixed spec."""
    return 2.0 * spec.t_critical * math.sqrt(var_threshold)


@dataclass(frozen=True, eq=False)
class GaussianSummary:
    """Mean, covariance and regularized precision of a latent cloud.

    ``regularization`` is the ridge added to the diagonal of ``covariance``
    before it was inverted into ``precision``.
    """

    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    regularization: float

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_moments(cls, mean, covariance, reg_scale: float = 1e-6) -> "GaussianSummary":
        mean = np.array(mean, dtype=float)
        cov = np.array(covariance, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {d}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10 * max(1.0, np.abs(cov).max())):
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        eps = reg_scale * float(np.trace(cov)) / d
        reg = cov + eps * np.eye(d)
        try:
            factor = linalg.cho_factor(reg, lower=True)
        except linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(
                f"covariance not positive definite after regularization (eps={eps:g})"
            ) from exc
        precision = linalg.cho_solve(factor, np.eye(d))
        precision = 0.5 * (precision + precision.T)
        for arr in (mean, cov, precision):
            arr.setflags(write=False)
        return cls(mean=mean, covariance=cov, precision=precision, regularization=eps)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "precision": self.precision.tolist(),
            "regularization": self.regularization,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianSummary":
        arrays = {k: np.array(data[k], dtype=float) for k in ("mean", "covariance", "precision")}
        for arr in arrays.values():
            arr.setflags(write=False)
        return cls(regularization=float(data["regularization"]), **arrays)


def fit_gaussian_summary(means, variances, reg_scale: float = 1e-6) -> GaussianSummary:
    """Moment-match a Gaussian to a set of diagonal Gaussian posteriors.

    ``mean = avg(mu_i)`` and
    ``cov = avg(diag(var_i) + (mu_i - mean)(mu_i - mean)^T)``.
    """
    mu = np.asarray(means, dtype=float)
    var = np.asarray(variances, dtype=float)
    if mu.ndim != 2 or var.ndim != 2:
        raise ValueError("means and variances must be 2-D (samples x dim)")
    if mu.shape != var.shape:
        raise ValueError(f"dimension mismatch: means {mu.shape} vs variances {var.shape}")
    if mu.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    if np.any(var < 0):
        raise ValueError("variances must be nonnegative")
    n = mu.shape[0]
    center = mu.mean(axis=0)
    dev = mu - center
    cov = np.diag(var.mean(axis=0)) + dev.T @ dev / n
    return GaussianSummary.from_moments(center, cov, reg_scale=reg_scale)


def mahalanobis(z, summary: GaussianSummary):
    """Distance of ``z`` (one vector or a batch of rows) from ``summary.mean``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != summary.dim:
        raise ValueError(f"expected vectors of length {summary.dim}, got {z.shape[-1]}")
    diff = z - summary.mean
    q = np.einsum("...i,ij,...j->...", diff, summary.precision, diff)
    out = np.sqrt(np.maximum(q, 0.0))
    return float(out) if out.ndim == 0 else out


def rate_threshold(scores, target_rate: float) -> float:
    """Order statistic that ``floor(target_rate * n)`` scores strictly exceed (absent ties)."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if s.size == 0:
        raise ValueError("no scores to calibrate on")
    if not 0.0 <= target_rate < 1.0:
        raise ValueError(f"target_rate must lie in [0, 1), got {target_rate}")
    return threshold_for_count(s, int(math.floor(target_rate * s.size + 1e-9)))


def threshold_for_count(scores, k: int) -> float:
    """Order statistic with ``k`` scores above it (fewer if tied at the boundary)."""
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    if not 0 <= k < s.size:
        raise ValueError(f"cannot leave {k} of {s.size} scores above a threshold")
    return float(s[s.size - 1 - k])
