"""Dense variational autoencoder over flattened (normalized) input windows.

Encoder ``x -> tanh -> (mu, log_var)``, decoder ``z -> tanh -> x_hat``.
Per-sample loss with a unit-variance Gaussian decoder, additive constant
dropped::

    recon = 0.5 * ||x - decode(mu + exp(log_var / 2) * eps)||^2
    kl    = 0.5 * sum(mu^2 + exp(log_var) - log_var - 1)

Gradients are hand-derived; ``elbo_loss_and_grads`` is the single source of
truth for both training and the finite-difference tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional

import numpy as np

from .errors import DivergenceError
from .forecaster import Adam

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W_mu", "b_mu", "W_lv", "b_lv", "W2", "b2", "W3", "b3")


@dataclass
class VAEHyperparams:
    latent_dim: int = 8
    hidden_dim: int = 64
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(eq=False)
class VAEParams:
    weights: Dict[str, np.ndarray]
    input_dim: int
    hidden_dim: int
    latent_dim: int
    seed: int = 0

    def __post_init__(self) -> None:
        D, H, d = self.input_dim, self.hidden_dim, self.latent_dim
        shapes = {
            "W1": (D, H), "b1": (H,),
            "W_mu": (H, d), "b_mu": (d,),
            "W_lv": (H, d), "b_lv": (d,),
            "W2": (d, H), "b2": (H,),
            "W3": (H, D), "b3": (D,),
        }
        for k, shp in shapes.items():
            if self.weights[k].shape != shp:
                raise ValueError(f"parameter {k} has shape {self.weights[k].shape}, expected {shp}")

    def copy(self) -> "VAEParams":
        return VAEParams({k: v.copy() for k, v in self.weights.items()},
                         self.input_dim, self.hidden_dim, self.latent_dim, self.seed)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            "params": {k: {"shape": list(self.weights[k].shape), "values": self.weights[k].ravel().tolist()}
                       for k in PARAM_NAMES},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VAEParams":
        w = {k: np.array(p["values"], dtype=float).reshape(p["shape"]) for k, p in d["params"].items()}
        return cls(w, d["input_dim"], d["hidden_dim"], d["latent_dim"], d.get("seed", 0))


def init_params(input_dim: int, hidden_dim: int, latent_dim: int, seed: int = 0) -> VAEParams:
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    w = {
        "W1": dense(input_dim, hidden_dim), "b1": np.zeros(hidden_dim),
        "W_mu": dense(hidden_dim, latent_dim), "b_mu": np.zeros(latent_dim),
        "W_lv": 0.1 * dense(hidden_dim, latent_dim), "b_lv": np.zeros(latent_dim),
        "W2": dense(latent_dim, hidden_dim), "b2": np.zeros(hidden_dim),
        "W3": dense(hidden_dim, input_dim), "b3": np.zeros(input_dim),
    }
    return VAEParams(w, input_dim, hidden_dim, latent_dim, seed)


class LatentEncoding(NamedTuple):
    mu: np.ndarray
    var: np.ndarray


def _as_batch(params: VAEParams, x) -> tuple:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None] if single else x.reshape(len(x), -1)
    if X.shape[1] != params.input_dim:
        raise ValueError(f"expected inputs of length {params.input_dim}, got {X.shape[1]}")
    return X, single


def _encode(w, X):
    h = np.tanh(X @ w["W1"] + w["b1"])
    return h, h @ w["W_mu"] + w["b_mu"], h @ w["W_lv"] + w["b_lv"]


def _decode(w, Z):
    g = np.tanh(Z @ w["W2"] + w["b2"])
    return g, g @ w["W3"] + w["b3"]


def encode(params: VAEParams, x) -> LatentEncoding:
    """Posterior mean and variance for one flattened window or a batch of them."""
    X, single = _as_batch(params, x)
    _, mu, lv = _encode(params.weights, X)
    var = np.exp(lv)
    return LatentEncoding(mu[0], var[0]) if single else LatentEncoding(mu, var)


def decode(params: VAEParams, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    Z = z[None] if z.ndim == 1 else z
    out = _decode(params.weights, Z)[1]
    return out[0] if z.ndim == 1 else out


def kl_to_standard_normal(mu, var) -> np.ndarray:
    """Closed-form KL(N(mu, diag var) || N(0, I)), summed over the last axis."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    return 0.5 * np.sum(mu**2 + var - np.log(var) - 1.0, axis=-1)


class ELBOTerms(NamedTuple):
    total: float
    recon: float
    kl: float


def elbo_loss_and_grads(params: VAEParams, X, noise, need_grads: bool = True):
    """Batch-mean loss terms and (optionally) gradients for every parameter."""
    w = params.weights
    X, _ = _as_batch(params, X)
    noise = np.asarray(noise, dtype=float).reshape(len(X), params.latent_dim)
    B = len(X)
    h, mu, lv = _encode(w, X)
    var = np.exp(lv)
    sigma = np.exp(0.5 * lv)
    z = mu + sigma * noise
    g, xhat = _decode(w, z)
    resid = xhat - X
    recon = 0.5 * np.sum(resid**2, axis=1)
    kl = 0.5 * np.sum(mu**2 + var - lv - 1.0, axis=1)
    terms = ELBOTerms(float(np.mean(recon + kl)), float(np.mean(recon)), float(np.mean(kl)))
    if not need_grads:
        return terms, None

    d_xhat = resid / B
    d_a2 = (d_xhat @ w["W3"].T) * (1.0 - g**2)
    d_z = d_a2 @ w["W2"].T
    d_mu = d_z + mu / B
    d_lv = d_z * noise * 0.5 * sigma + 0.5 * (var - 1.0) / B
    d_a1 = (d_mu @ w["W_mu"].T + d_lv @ w["W_lv"].T) * (1.0 - h**2)
    grads = {
        "W3": g.T @ d_xhat, "b3": d_xhat.sum(axis=0),
        "W2": z.T @ d_a2, "b2": d_a2.sum(axis=0),
        "W_mu": h.T @ d_mu, "b_mu": d_mu.sum(axis=0),
        "W_lv": h.T @ d_lv, "b_lv": d_lv.sum(axis=0),
        "W1": X.T @ d_a1, "b1": d_a1.sum(axis=0),
    }
    return terms, grads


def elbo_loss(params: VAEParams, x, noise) -> ELBOTerms:
    """(total, recon, kl) for one window or the batch mean over several."""
    terms, _ = elbo_loss_and_grads(params, x, noise, need_grads=False)
    if not np.isfinite(terms.total):
        raise DivergenceError("non-finite VAE loss")
    return terms


@dataclass
class TrainLog:
    epoch_losses: List[float] = field(default_factory=list)
    epoch_recon: List[float] = field(default_factory=list)
    epoch_kl: List[float] = field(default_factory=list)


def train_vae(data, hyperparams: Optional[VAEHyperparams] = None, seed: int = 0,
              train_log: Optional[TrainLog] = None) -> VAEParams:
    """Minibatch Adam on the reparameterized loss, one noise draw per sample per step.

    Entry 0 of the log is the loss of the initialization (evaluated with a
    seeded noise draw); entry ``k`` is the size-weighted mean minibatch loss
    of epoch ``k``.
    """
    hp = hyperparams or VAEHyperparams()
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("data must be a non-empty 2-D array of flattened windows")
    params = init_params(X.shape[1], hp.hidden_dim, hp.latent_dim, seed)
    rng = np.random.default_rng([seed, 1])
    tl = train_log if train_log is not None else TrainLog()
    t0, _ = elbo_loss_and_grads(params, X, rng.standard_normal((len(X), hp.latent_dim)), need_grads=False)
    tl.epoch_losses.append(t0.total)
    tl.epoch_recon.append(t0.recon)
    tl.epoch_kl.append(t0.kl)
    opt = Adam(params.weights, hp.lr)
    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(len(X))
        tot = rec = kl = 0.0
        for step, start in enumerate(range(0, len(X), hp.batch_size)):
            idx = order[start:start + hp.batch_size]
            noise = rng.standard_normal((len(idx), hp.latent_dim))
            terms, grads = elbo_loss_and_grads(params, X[idx], noise)
            if not np.isfinite(terms.total):
                raise DivergenceError("non-finite VAE loss", epoch=epoch, step=step)
            opt.step(params.weights, grads)
            tot += terms.total * len(idx)
            rec += terms.recon * len(idx)
            kl += terms.kl * len(idx)
        tl.epoch_losses.append(tot / len(X))
        tl.epoch_recon.append(rec / len(X))
        tl.epoch_kl.append(kl / len(X))
    if hp.epochs:
        log.info("vae: loss %.6g -> %.6g over %d epochs", tl.epoch_losses[0], tl.epoch_losses[-1], hp.epochs)
    return params
