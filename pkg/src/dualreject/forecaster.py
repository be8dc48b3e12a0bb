"""Point forecasters and residual extraction.

Any object with ``predict_batch(inputs) -> (B, S, N)`` can stand in for a
forecaster; the rejectors only ever see predictions and residuals. Two are
built in: a ridge-regularized linear autoregression over the flattened input
window and a one-hidden-layer tanh MLP trained with Adam.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence

import numpy as np

from .errors import DataError, DivergenceError
from .stats import error_variance
from .tsio import WindowPair

log = logging.getLogger(__name__)

ERROR_METRICS = ("squared", "absolute", "variance")


class Forecaster(Protocol):
    input_len: int
    horizon: int
    n_vars: int

    def predict(self, x: np.ndarray) -> np.ndarray: ...

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray: ...


def stack_windows(windows: Sequence[WindowPair]):
    """``(B, L*N)`` inputs and ``(B, S*N)`` targets."""
    if not windows:
        raise DataError("no windows")
    X = np.stack([w.input.ravel() for w in windows])
    Y = np.stack([w.target.ravel() for w in windows])
    return X, Y


class _FlatForecaster:
    input_len: int
    horizon: int
    n_vars: int

    def _predict_flat(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_batch(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float)
        if inputs.shape[1:] != (self.input_len, self.n_vars):
            raise ValueError(f"expected inputs of shape (B, {self.input_len}, {self.n_vars}), got {inputs.shape}")
        out = self._predict_flat(inputs.reshape(len(inputs), -1))
        return out.reshape(len(inputs), self.horizon, self.n_vars)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.predict_batch(np.asarray(x, dtype=float)[None])[0]


# ---------------------------------------------------------------------------
# ridge autoregression


@dataclass(eq=False)
class RidgeARModel(_FlatForecaster):
    """Linear map from a flattened window (+ bias, last row) to the flattened horizon."""

    weights: np.ndarray
    ridge_lambda: float
    input_len: int
    horizon: int
    n_vars: int

    def _predict_flat(self, X):
        return X @ self.weights[:-1] + self.weights[-1]

    def to_dict(self) -> dict:
        return {
            "kind": "ridge",
            "ridge_lambda": self.ridge_lambda,
            "input_len": self.input_len,
            "horizon": self.horizon,
            "n_vars": self.n_vars,
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeARModel":
        w = np.array(d["weights"], dtype=float).reshape(d["shape"])
        return cls(w, float(d["ridge_lambda"]), d["input_len"], d["horizon"], d["n_vars"])


def fit_ridge(train: Sequence[WindowPair], ridge_lambda: float = 1.0, seed: int = 0) -> RidgeARModel:
    """Closed-form ridge regression; the bias is not penalized.

    ``seed`` is accepted for interface symmetry and unused.
    """
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be >= 0")
    X, Y = stack_windows(train)
    L, N = train[0].input.shape
    S = train[0].target.shape[0]
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    gram = Xc.T @ Xc
    gram[np.diag_indices_from(gram)] += ridge_lambda
    rhs = Xc.T @ Yc
    if ridge_lambda == 0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise np.linalg.LinAlgError("singular normal equations with ridge_lambda=0")
    try:
        W = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge solve failed (lambda={ridge_lambda}): {exc}") from exc
    bias = y_mean - x_mean @ W
    return RidgeARModel(np.vstack([W, bias]), float(ridge_lambda), L, S, N)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MLPHyperparams:
    hidden: int = 64
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8


MLP_PARAM_NAMES = ("W1", "b1", "W2", "b2")


def mlp_init(n_in: int, n_out: int, hidden: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, hidden)),
        "b1": np.zeros(hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(hidden, n_out)),
        "b2": np.zeros(n_out),
    }


def mlp_forward(params, X):
    h = np.tanh(X @ params["W1"] + params["b1"])
    return h @ params["W2"] + params["b2"], h


def mlp_loss_and_grads(params, X, Y):
    """Mean squared error over all entries and its gradients."""
    pred, h = mlp_forward(params, X)
    diff = pred - Y
    loss = float(np.mean(diff**2))
    g_pred = 2.0 * diff / diff.size
    g_h = (g_pred @ params["W2"].T) * (1.0 - h**2)
    grads = {
        "W2": h.T @ g_pred,
        "b2": g_pred.sum(axis=0),
        "W1": X.T @ g_h,
        "b1": g_h.sum(axis=0),
    }
    return loss, grads


class Adam:
    def __init__(self, params: Dict[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass(eq=False)
class MLPForecaster(_FlatForecaster):
    params: Dict[str, np.ndarray]
    hyperparams: MLPHyperparams
    seed: int
    input_len: int
    horizon: int
    n_vars: int
    loss_history: List[float] = field(default_factory=list)

    def _predict_flat(self, X):
        return mlp_forward(self.params, X)[0]

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "seed": self.seed,
            "input_len": self.input_len,
            "horizon": self.horizon,
            "n_vars": self.n_vars,
            "hyperparams": vars(self.hyperparams),
            "loss_history": self.loss_history,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLPForecaster":
        params = {k: np.array(p["values"], dtype=float).reshape(p["shape"]) for k, p in d["params"].items()}
        return cls(params, MLPHyperparams(**d["hyperparams"]), d["seed"], d["input_len"], d["horizon"],
                   d["n_vars"], list(d.get("loss_history", [])))


def fit_mlp(train: Sequence[WindowPair], hyperparams: Optional[MLPHyperparams] = None, seed: int = 0) -> MLPForecaster:
    """Minibatch Adam on MSE.

    The returned parameters are the snapshot with the lowest full-batch train
    loss seen at an epoch boundary (initialization included), so the final
    loss never exceeds the initial one.
    """
    hp = hyperparams or MLPHyperparams()
    X, Y = stack_windows(train)
    L, N = train[0].input.shape
    S = train[0].target.shape[0]
    rng = np.random.default_rng(seed)
    params = mlp_init(X.shape[1], Y.shape[1], hp.hidden, rng)
    opt = Adam(params, hp.lr, hp.beta1, hp.beta2, hp.adam_eps)
    best_loss = float(np.mean((mlp_forward(params, X)[0] - Y) ** 2))
    best = {k: v.copy() for k, v in params.items()}
    history = [best_loss]
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(X))
        for step, start in enumerate(range(0, len(X), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            loss, grads = mlp_loss_and_grads(params, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise DivergenceError("non-finite MLP loss", epoch=epoch, step=step)
            opt.step(params, grads)
        full = float(np.mean((mlp_forward(params, X)[0] - Y) ** 2))
        if not np.isfinite(full):
            raise DivergenceError("non-finite MLP loss", epoch=epoch)
        history.append(full)
        if full < best_loss:
            best_loss = full
            best = {k: v.copy() for k, v in params.items()}
    log.info("mlp: train mse %.6g -> %.6g over %d epochs", history[0], best_loss, hp.epochs)
    return MLPForecaster(best, hp, seed, L, S, N, history)


def forecaster_from_dict(d: dict):
    kinds = {"ridge": RidgeARModel, "mlp": MLPForecaster}
    try:
        return kinds[d["kind"]].from_dict(d)
    except KeyError:
        raise DataError(f"unknown forecaster kind {d.get('kind')!r}") from None


# ---------------------------------------------------------------------------
# residuals


@dataclass(frozen=True, eq=False)
class ResidualRecord:
    error: float
    features: np.ndarray
    origin_index: int


def window_errors(pred: np.ndarray, truth: np.ndarray, metric: str = "squared",
                  centered: bool = False) -> np.ndarray:
    """Per-window error over all S*N entries.

    ``squared`` and ``absolute`` are means of the deviation; ``variance`` is
    :func:`stats.error_variance` of the window's residuals (divisor n - 1,
    uncentered unless ``centered``).
    """
    if metric not in ERROR_METRICS:
        raise ValueError(f"error metric must be one of {ERROR_METRICS}, got {metric!r}")
    diff = np.asarray(pred, dtype=float) - np.asarray(truth, dtype=float)
    flat = diff.reshape(len(diff), -1)
    if metric == "variance":
        return np.array([error_variance(row, centered) for row in flat])
    dev = flat**2 if metric == "squared" else np.abs(flat)
    return dev.mean(axis=1)


def predict_windows(model, data: Sequence[WindowPair]) -> np.ndarray:
    return model.predict_batch(np.stack([w.input for w in data]))


def collect_residuals(
    model,
    data: Sequence[WindowPair],
    error_metric: str = "squared",
    predictions: Optional[Mapping[int, np.ndarray]] = None,
    centered: bool = False,
) -> List[ResidualRecord]:
    """One record per window.

    ``predictions`` (origin index -> S x N array) replaces the live model,
    which may then be None.
    """
    if not data:
        return []
    truth = np.stack([w.target for w in data])
    if predictions is not None:
        try:
            pred = np.stack([np.asarray(predictions[w.origin_index], dtype=float).reshape(w.target.shape)
                             for w in data])
        except KeyError as exc:
            raise DataError(f"no prediction for origin index {exc.args[0]}") from None
    else:
        pred = predict_windows(model, data)
    errs = window_errors(pred, truth, error_metric, centered)
    return [ResidualRecord(float(e), w.input.ravel(), w.origin_index) for e, w in zip(errs, data)]


def load_predictions_csv(path, horizon: int, n_vars: int) -> Dict[int, np.ndarray]:
    """Read ``origin_index, v_0, ..., v_{S*N-1}`` rows (row-major S x N), header optional."""
    out: Dict[int, np.ndarray] = {}
    width = horizon * n_vars
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                origin = int(row[0])
            except ValueError:
                if lineno == 1:
                    continue
                raise DataError(f"{path}: bad origin index {row[0]!r} at row {lineno}") from None
            if len(row) != width + 1:
                raise DataError(f"{path}: row {lineno} has {len(row) - 1} values, expected {width}")
            try:
                vals = np.array([float(c) for c in row[1:]])
            except ValueError:
                raise DataError(f"{path}: non-numeric prediction at row {lineno}") from None
            out[origin] = vals.reshape(horizon, n_vars)
    return out


def write_predictions_csv(path, origins: Sequence[int], preds: np.ndarray) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_index"] + [f"v{i}" for i in range(preds[0].size)])
        for o, p in zip(origins, preds):
            w.writerow([o] + [repr(float(v)) for v in np.ravel(p)])
