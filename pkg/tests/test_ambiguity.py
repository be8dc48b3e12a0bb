import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from dualreject.ambiguity import (AmbiguityRejector, ErrorVarianceEstimator, calibrate_ambiguity, decide_ambiguity,
                                  decide_variance, fit_error_model, sequence_rejection_loss)
from dualreject.errors import DataError
from dualreject.forecaster import ResidualRecord
from dualreject.stats import ConfidenceSpec, t_quantile


def records_from(features, errors):
    return [ResidualRecord(float(e), np.asarray(f, dtype=float), i) for i, (f, e) in enumerate(zip(features, errors))]


def heteroscedastic(seed, n=2000, horizon=20):
    r = np.random.default_rng(seed)
    F = r.normal(size=(n, 3))
    true_var = np.exp(0.8 * F[:, 0] - 0.5 * F[:, 1])
    errors = np.mean((r.normal(size=(n, horizon)) * np.sqrt(true_var)[:, None]) ** 2, axis=1)
    return F, errors, true_var


def test_constant_errors_give_constant_estimate(rng):
    F = rng.normal(size=(50, 2))
    est = fit_error_model(records_from(F, np.full(50, 0.3)))
    np.testing.assert_allclose(est.predict(rng.normal(size=(5, 2))), 0.3 + 1e-8, rtol=1e-10)


def test_estimate_tracks_true_variance():
    F, errors, _ = heteroscedastic(0)
    est = fit_error_model(records_from(F, errors), ridge=1.0)
    Ft, _, true_t = heteroscedastic(1, n=500)
    rho = sps.spearmanr(est.predict(Ft), true_t)[0]
    assert rho > 0.9


def test_estimate_nonnegative(rng):
    F, errors, _ = heteroscedastic(2, n=200)
    est = fit_error_model(records_from(F, errors))
    assert np.all(est.predict(rng.normal(size=(10_000, 3)) * 50) >= 0)
    assert isinstance(est.predict(F[0]), float)


def test_error_model_input_checks(rng):
    with pytest.raises(DataError, match="at least 10"):
        fit_error_model(records_from(rng.normal(size=(5, 2)), np.ones(5)))
    with pytest.raises(DataError, match="degenerate"):
        fit_error_model(records_from(np.ones((20, 2)), rng.uniform(size=20)))
    with pytest.raises(ValueError):
        fit_error_model(records_from(rng.normal(size=(20, 2)), np.ones(20)), feature_mode="spectral")


def test_estimator_round_trip(rng):
    F, errors, _ = heteroscedastic(3, n=100)
    for quad in (False, True):
        est = fit_error_model(records_from(F, errors), quadratic=quad)
        clone = ErrorVarianceEstimator.from_dict(est.to_dict())
        np.testing.assert_array_equal(clone.predict(F[:4]), est.predict(F[:4]))


def test_decide_variance_boundary():
    assert decide_variance(0.25, 0.25) == 0
    assert decide_variance(0.2500001, 0.25) == 1
    assert decide_variance(0.5, 0.25) == 1
    assert decide_variance(0.0, 0.0) == 0
    np.testing.assert_array_equal(decide_variance([0.1, 0.3], 0.2), [0, 1])


def test_calibrate_rate_mode():
    rej = calibrate_ambiguity(np.arange(1.0, 101.0), 0.10)
    assert rej.var_threshold == 90.0
    assert rej.realized_rate == 0.10
    assert rej.spec.dof == 99
    assert rej.width == pytest.approx(2 * t_quantile(0.05, 99) * np.sqrt(90.0), rel=1e-12)
    assert calibrate_ambiguity(np.arange(1.0, 101.0), 0.0).var_threshold == 100.0


def test_calibrate_interval_mode():
    spec = ConfidenceSpec(0.05, 9)
    rej = calibrate_ambiguity([0.01, 0.03, 0.05, 0.07], width=1.0, spec=spec)
    assert rej.var_threshold == pytest.approx(0.04886, abs=1e-5)
    assert rej.realized_rate == 0.5
    assert rej.calibration == "interval"
    with pytest.raises(ValueError):
        calibrate_ambiguity([1.0], 0.1, width=1.0)
    with pytest.raises(DataError):
        calibrate_ambiguity([], 0.1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(2, 300), rate=st.floats(0.0, 0.5))
def test_calibration_realized_rate_within_one_over_n(seed, n, rate):
    scores = np.random.default_rng(seed).exponential(size=n)
    rej = calibrate_ambiguity(scores, rate)
    assert abs(rej.realized_rate - rate) <= 1.0 / n


def test_rejector_round_trip_and_decide(rng):
    F, errors, _ = heteroscedastic(4, n=100)
    est = fit_error_model(records_from(F, errors))
    rej = calibrate_ambiguity(est.predict(F), 0.2, estimator=est)
    clone = AmbiguityRejector.from_dict(rej.to_dict())
    np.testing.assert_array_equal(decide_ambiguity(clone, F), decide_ambiguity(rej, F))
    assert np.mean(decide_ambiguity(rej, F)) == pytest.approx(0.2)


def test_sequence_rejection_loss_cases():
    pred, truth = np.array([[1.0, 2.0]]), np.array([[0.0, 0.0]])
    assert sequence_rejection_loss(pred, truth, 1, 0.7) == 0.7
    assert sequence_rejection_loss(pred, truth, 0, 0.7) == 2.5
    assert sequence_rejection_loss(pred, truth, 0, 0.7, loss="mae") == 1.5
    with pytest.raises(ValueError):
        sequence_rejection_loss(pred, truth, 0, -1.0)
    with pytest.raises(ValueError):
        sequence_rejection_loss(pred, np.zeros((2, 2)), 0, 0.0)


@settings(max_examples=30, deadline=None)
@given(w1=st.floats(1e-3, 100), w2=st.floats(1e-3, 100), v=st.floats(0, 1e3))
def test_wider_interval_rejects_less(w1, w2, v):
    spec = ConfidenceSpec(0.05, 20)
    lo, hi = sorted((w1, w2))
    narrow = calibrate_ambiguity([v], width=lo, spec=spec)
    wide = calibrate_ambiguity([v], width=hi, spec=spec)
    assert decide_variance(v, wide.var_threshold) <= decide_variance(v, narrow.var_threshold)


def test_rejecting_high_variance_beats_random():
    wins = 0
    for seed in range(10):
        F, errors, _ = heteroscedastic(seed, n=600)
        est = fit_error_model(records_from(F[:300], errors[:300]))
        rej = calibrate_ambiguity(est.predict(F[:300]), 0.2, estimator=est)
        keep = decide_ambiguity(rej, F[300:]) == 0
        wins += errors[300:][keep].mean() < errors[300:].mean()
    assert wins == 10
