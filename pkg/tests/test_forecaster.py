import numpy as np
import pytest

from dualreject.errors import DataError
from dualreject.forecaster import (MLPHyperparams, RidgeARModel, collect_residuals, fit_mlp, fit_ridge,
                                   forecaster_from_dict, load_predictions_csv, mlp_init, mlp_loss_and_grads,
                                   predict_windows, window_errors, write_predictions_csv)
from dualreject.tsio import make_windows


def ar_windows(rng, T=400, L=4, S=2, N=2):
    x = np.zeros((T, N))
    for t in range(1, T):
        x[t] = 0.8 * x[t - 1] + rng.normal(scale=0.5, size=N)
    return make_windows(x, L, S)


def test_constant_series_predicted_exactly():
    ws = make_windows(np.full((50, 2), 3.0), 5, 3)
    for lam in (1e-3, 1.0, 100.0):
        model = fit_ridge(ws, lam)
        np.testing.assert_allclose(model.predict(ws[0].input), np.full((3, 2), 3.0), atol=1e-12)


def test_shift_identity_recovered_without_penalty(rng):
    x = rng.normal(size=(300, 1))
    ws = make_windows(x, 1, 1)
    # target x_{t+1} equals input x_t when the series is shifted onto itself
    paired = [type(w)(w.input, w.input.copy(), w.origin_index) for w in ws]
    model = fit_ridge(paired, 0.0)
    assert model.weights[0, 0] == pytest.approx(1.0, abs=1e-10)
    assert model.weights[1, 0] == pytest.approx(0.0, abs=1e-10)


def test_huge_penalty_predicts_train_mean(rng):
    ws = ar_windows(rng)
    model = fit_ridge(ws, 1e12)
    mean_target = np.mean([w.target for w in ws], axis=0)
    np.testing.assert_allclose(model.predict(ws[10].input), mean_target, atol=1e-6)


def test_ridge_singular_without_penalty():
    ws = make_windows(np.ones((30, 1)), 3, 1)
    with pytest.raises(np.linalg.LinAlgError):
        fit_ridge(ws, 0.0)
    with pytest.raises(ValueError):
        fit_ridge(ws, -1.0)


def test_predict_batch_shape_checks(rng):
    model = fit_ridge(ar_windows(rng), 1.0)
    assert model.predict_batch(np.zeros((7, 4, 2))).shape == (7, 2, 2)
    with pytest.raises(ValueError):
        model.predict_batch(np.zeros((7, 3, 2)))


def test_mlp_zero_epochs_is_initialization(rng):
    ws = ar_windows(rng)
    model = fit_mlp(ws, MLPHyperparams(hidden=8, epochs=0), seed=4)
    init = mlp_init(8, 4, 8, np.random.default_rng(4))
    for k in init:
        np.testing.assert_array_equal(model.params[k], init[k])
    assert len(model.loss_history) == 1


def test_mlp_training_reduces_loss(rng):
    ws = ar_windows(rng)
    model = fit_mlp(ws, MLPHyperparams(hidden=16, epochs=200, lr=1e-2), seed=0)
    assert min(model.loss_history) < 0.5 * model.loss_history[0]
    Y = np.stack([w.target.ravel() for w in ws])
    final = float(np.mean((model.predict_batch(np.stack([w.input for w in ws])).reshape(len(ws), -1) - Y) ** 2))
    assert final == pytest.approx(min(model.loss_history), rel=1e-12)


def test_mlp_gradients_match_finite_differences(rng):
    params = mlp_init(5, 3, 6, rng)
    X, Y = rng.normal(size=(9, 5)), rng.normal(size=(9, 3))
    _, grads = mlp_loss_and_grads(params, X, Y)
    h = 1e-6
    for k, p in params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up, _ = mlp_loss_and_grads(params, X, Y)
            p[idx] = old - h
            dn, _ = mlp_loss_and_grads(params, X, Y)
            p[idx] = old
            assert grads[k][idx] == pytest.approx((up - dn) / (2 * h), rel=1e-5, abs=1e-8)


def test_mlp_deterministic(rng):
    ws = ar_windows(rng, T=120)
    hp = MLPHyperparams(hidden=8, epochs=5)
    a, b = fit_mlp(ws, hp, seed=1), fit_mlp(ws, hp, seed=1)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_serialization_round_trip(rng):
    ws = ar_windows(rng, T=120)
    for model in (fit_ridge(ws, 2.0), fit_mlp(ws, MLPHyperparams(hidden=4, epochs=2))):
        clone = forecaster_from_dict(model.to_dict())
        np.testing.assert_array_equal(clone.predict(ws[3].input), model.predict(ws[3].input))
    with pytest.raises(DataError):
        forecaster_from_dict({"kind": "lstm"})


def test_residuals_match_loop_oracle(rng):
    ws = ar_windows(rng, T=80)
    model = fit_ridge(ws, 1.0)
    recs = collect_residuals(model, ws, "squared")
    for rec, w in zip(recs, ws):
        pred = model.predict(w.input)
        total, count = 0.0, 0
        for s in range(pred.shape[0]):
            for n in range(pred.shape[1]):
                total += (pred[s, n] - w.target[s, n]) ** 2
                count += 1
        assert rec.error == pytest.approx(total / count, rel=1e-12)
        assert rec.origin_index == w.origin_index
        np.testing.assert_array_equal(rec.features, w.input.ravel())


def test_residual_offset_by_one():
    ws = make_windows(np.arange(10.0)[:, None], 2, 1)
    preds = {w.origin_index: w.target + 1.0 for w in ws}
    recs = collect_residuals(None, ws, "absolute", predictions=preds)
    assert [r.error for r in recs] == [1.0] * len(ws)
    assert collect_residuals(None, [], "squared") == []


def test_residual_missing_prediction():
    ws = make_windows(np.arange(10.0)[:, None], 2, 1)
    with pytest.raises(DataError, match="origin index 0"):
        collect_residuals(None, ws, predictions={})


def test_window_errors_metrics():
    pred = np.array([[[1.0, -2.0]]])
    truth = np.zeros((1, 1, 2))
    assert window_errors(pred, truth, "squared")[0] == 2.5
    assert window_errors(pred, truth, "absolute")[0] == 1.5
    # residuals (1, -2): uncentered (1 + 4) / 1, centered about -0.5: (2.25 + 2.25) / 1
    assert window_errors(pred, truth, "variance")[0] == 5.0
    assert window_errors(pred, truth, "variance", centered=True)[0] == 4.5
    with pytest.raises(ValueError):
        window_errors(pred, truth, "huber")


def test_prediction_csv_round_trip(tmp_path, rng):
    ws = ar_windows(rng, T=40)
    model = fit_ridge(ws, 1.0)
    preds = predict_windows(model, ws)
    path = tmp_path / "p.csv"
    write_predictions_csv(path, [w.origin_index for w in ws], preds)
    loaded = load_predictions_csv(path, 2, 2)
    for w, p in zip(ws, preds):
        np.testing.assert_array_equal(loaded[w.origin_index], p)
    recs = collect_residuals(None, ws, predictions=loaded)
    np.testing.assert_array_equal([r.error for r in recs], [r.error for r in collect_residuals(model, ws)])


def test_prediction_csv_wrong_width(tmp_path):
    path = tmp_path / "p.csv"
    path.write_text("0,1,2,3\n")
    with pytest.raises(DataError, match="expected 4"):
        load_predictions_csv(path, 2, 2)


def test_ridge_model_is_plain_data(rng):
    model = fit_ridge(ar_windows(rng), 1.0)
    assert isinstance(model, RidgeARModel)
    assert model.weights.shape == (4 * 2 + 1, 2 * 2)
