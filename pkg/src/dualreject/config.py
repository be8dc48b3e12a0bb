"""Run configuration: defaults < JSON file < environment < command-line flags."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError

OUTPUT_DIR_ENV = "DUALREJECT_OUTPUT_DIR"

# keys that determine the prepared dataset; nothing else may change it
PREPARE_KEYS = ("dataset", "has_header", "L", "S", "stride", "split_ratios", "synthetic_steps", "synthetic_seed")


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    has_header: bool = True
    synthetic_steps: int = 6000
    synthetic_seed: int = 0
    L: int = 96
    S: int = 96
    stride: int = 1
    split_ratios: List[float] = field(default_factory=lambda: [0.7, 0.1, 0.2])

    forecaster: str = "ridge"
    ridge_lambda: float = 1.0
    predictions_file: Optional[str] = None
    mlp_hidden: int = 64
    mlp_epochs: int = 50
    mlp_lr: float = 1e-3
    mlp_batch_size: int = 64

    vae_latent_dim: int = 8
    vae_hidden_dim: int = 64
    vae_epochs: int = 50
    vae_lr: float = 1e-3
    vae_batch_size: int = 64

    feature_mode: str = "input"
    error_metric: str = "squared"
    centered_variance: bool = False
    error_ridge: float = 10.0

    rejection_mode: str = "dual"
    calibration: str = "rate"
    target_rate: float = 0.10
    alpha: float = 0.05
    interval_width: Optional[float] = None
    risk_lambda: float = 0.0
    rejection_cost: float = 0.0
    loss: str = "mse"
    sweep_rates: List[float] = field(default_factory=lambda: [0.0, 0.02, 0.06, 0.10, 0.12, 0.16])

    seed: int = 0
    output_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        choices = {
            "forecaster": ("ridge", "mlp", "external"),
            "feature_mode": ("input", "latent"),
            "error_metric": ("squared", "absolute", "variance"),
            "rejection_mode": ("none", "novelty_only", "ambiguity_only", "dual"),
            "calibration": ("rate", "interval"),
            "loss": ("mse", "mae"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("L", "S", "stride", "vae_latent_dim", "vae_hidden_dim", "mlp_hidden"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1) > 1e-9 or min(self.split_ratios) <= 0:
            raise ConfigError(f"split_ratios must be three positive fractions summing to 1, got {self.split_ratios}")
        if not 0 <= self.target_rate < 1:
            raise ConfigError("target_rate must lie in [0, 1)")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.calibration == "interval" and not (self.interval_width and self.interval_width > 0):
            raise ConfigError("interval calibration needs a positive interval_width")
        if self.forecaster == "external" and not self.predictions_file:
            raise ConfigError("forecaster 'external' needs predictions_file")
        if self.risk_lambda < 0 or self.rejection_cost < 0:
            raise ConfigError("risk_lambda and rejection_cost must be >= 0")
        if list(self.sweep_rates) != sorted(self.sweep_rates) or any(not 0 <= r < 1 for r in self.sweep_rates):
            raise ConfigError("sweep_rates must be sorted and lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def prepare_subset(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in PREPARE_KEYS}


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, value):
    if key not in FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                return value.lower() in ("true", "1")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float) or key == "interval_width":
            return float(value)
        if isinstance(default, list):
            if isinstance(value, str):
                value = json.loads(value)
            return [float(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    return value


def load_config(path=None, overrides: Optional[dict] = None, env=None) -> RunConfig:
    """Resolve a config. Unknown keys anywhere are an error."""
    env = os.environ if env is None else env
    values: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        if "config" in raw and isinstance(raw["config"], dict) and "config_hash" in raw:
            raw = raw["config"]  # a run manifest
        values.update({k: _coerce(k, v) for k, v in raw.items()})
    if env.get(OUTPUT_DIR_ENV):
        values["output_dir"] = env[OUTPUT_DIR_ENV]
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v)
    return RunConfig(**values).validate()


def config_hash(data: dict) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
