"""CSV ingestion, z-score normalization, sliding windows and chronological splits."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

__all__ = [
    "DatasetSplit",
    "NormalizationStats",
    "RawSeries",
    "WindowPair",
    "build_dataset",
    "fit_normalization",
    "load_csv",
    "make_windows",
    "split_dataset",
    "train_row_span",
]


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _sort_keys(labels: Sequence[str]):
    """Comparable keys for time labels: datetimes, then numbers, else the raw strings."""
    for parse in (datetime.fromisoformat, float):
        try:
            return [parse(s) for s in labels]
        except ValueError:
            continue
    return list(labels)


@dataclass(frozen=True, eq=False)
class RawSeries:
    timestamps: Tuple[str, ...]
    values: np.ndarray
    variable_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {v.shape}")
        if v.shape[0] != len(self.timestamps):
            raise DataError(f"{v.shape[0]} value rows but {len(self.timestamps)} timestamps")
        if v.shape[1] != len(self.variable_names):
            raise DataError(f"{v.shape[1]} columns but {len(self.variable_names)} variable names")
        if not np.all(np.isfinite(v)):
            r, c = np.argwhere(~np.isfinite(v))[0]
            raise DataError(f"non-finite value at row {r}, variable {self.variable_names[c]!r}")
        keys = _sort_keys(self.timestamps)
        for i in range(1, len(keys)):
            if not keys[i - 1] < keys[i]:
                raise DataError(
                    f"timestamps not strictly increasing at row {i}: "
                    f"{self.timestamps[i - 1]!r} -> {self.timestamps[i]!r}"
                )
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "variable_names", tuple(self.variable_names))
        object.__setattr__(self, "values", _readonly(v))

    @property
    def n_steps(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "RawSeries":
        return RawSeries(self.timestamps, values, self.variable_names)


def load_csv(path, has_header: bool = True) -> RawSeries:
    """Read a CSV whose first column is a time label and the rest are numbers.

    Rows and columns in error messages are 1-based file positions.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    if has_header:
        header, body, first = rows[0], rows[1:], 2
    else:
        header, body, first = None, rows, 1
    width = len(header) if header is not None else len(body[0]) if body else 0
    if width < 2:
        raise DataError(f"{path}: need a time column plus at least one variable, found {width} column(s)")
    names = tuple(header[1:]) if header is not None else tuple(f"var{i}" for i in range(width - 1))
    stamps: List[str] = []
    values = np.empty((len(body), width - 1))
    for i, row in enumerate(body):
        lineno = i + first
        if len(row) != width:
            raise DataError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        stamps.append(row[0])
        for j, cell in enumerate(row[1:]):
            try:
                x = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric value {cell!r} at row {lineno}, column {j + 2}") from None
            if not math.isfinite(x):
                raise DataError(f"{path}: non-finite value {cell!r} at row {lineno}, column {j + 2}")
            values[i, j] = x
    return RawSeries(tuple(stamps), values, names)


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormalizationStats":
        return cls(_readonly(np.array(data["mean"], dtype=float)), _readonly(np.array(data["std"], dtype=float)))


def fit_normalization(series: RawSeries, train_span: Tuple[int, int]) -> NormalizationStats:
    """Per-variable mean and sample std (ddof=1) over rows ``[start, stop)``.

    Constant columns get std 1 so they pass through z-scoring unchanged apart
    from centering.
    """
    start, stop = train_span
    if not 0 <= start <= stop <= series.n_steps:
        raise ValueError(f"train span {train_span} outside [0, {series.n_steps}]")
    if stop - start < 2:
        raise ValueError(f"train span needs at least 2 rows, got {stop - start}")
    block = series.values[start:stop]
    mean = block.mean(axis=0)
    std = block.std(axis=0, ddof=1)
    flat = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    if np.any(flat):
        names = [series.variable_names[i] for i in np.flatnonzero(flat)]
        log.warning("zero-variance columns %s: using std=1", names)
        std = np.where(flat, 1.0, std)
    return NormalizationStats(_readonly(mean), _readonly(std))


@dataclass(frozen=True, eq=False)
class WindowPair:
    input: np.ndarray
    target: np.ndarray
    origin_index: int


def make_windows(values, L: int, S: int, stride: int = 1) -> List[WindowPair]:
    """Slide an ``L``-row input / ``S``-row target pair over ``values``.

    Accepts a :class:`RawSeries` or a 2-D array. Windows are read-only views,
    so long series do not get copied per window.
    """
    arr = values.values if isinstance(values, RawSeries) else np.asarray(values, dtype=float)
    if L < 1 or S < 1 or stride < 1:
        raise ValueError(f"L, S and stride must be >= 1 (got {L}, {S}, {stride})")
    T = arr.shape[0]
    if T < L + S:
        raise DataError(f"series of length {T} too short for L+S={L + S}: no windows")
    if arr.flags.writeable:
        arr = _readonly(arr.copy())
    return [
        WindowPair(arr[o:o + L], arr[o + L:o + L + S], o)
        for o in range(0, T - L - S + 1, stride)
    ]


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    train: List[WindowPair]
    validation: List[WindowPair]
    test: List[WindowPair]
    norm_stats: Optional[NormalizationStats] = None


def split_counts(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3:
        raise ValueError("ratios must have three entries (train, validation, test)")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be nonnegative and sum to 1, got {tuple(ratios)}")
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    for name, k in (("train", n_train), ("validation", n_val), ("test", n_test)):
        if k <= 0:
            raise DataError(f"empty {name} split ({n} windows, ratios {tuple(ratios)})")
    return n_train, n_val, n_test


def split_dataset(
    windows: Sequence[WindowPair],
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
    norm_stats: Optional[NormalizationStats] = None,
) -> DatasetSplit:
    """Chronological train/validation/test partition by origin index."""
    ordered = sorted(windows, key=lambda w: w.origin_index)
    n_train, n_val, _ = split_counts(len(ordered), ratios)
    return DatasetSplit(
        train=ordered[:n_train],
        validation=ordered[n_train:n_train + n_val],
        test=ordered[n_train + n_val:],
        norm_stats=norm_stats,
    )


def train_row_span(n_steps: int, L: int, S: int, stride: int, ratios: Sequence[float]) -> Tuple[int, int]:
    """Raw rows ``[0, stop)`` touched by any training window."""
    if n_steps < L + S:
        raise DataError(f"series of length {n_steps} too short for L+S={L + S}: no windows")
    n_windows = (n_steps - L - S) // stride + 1
    n_train, _, _ = split_counts(n_windows, ratios)
    return 0, (n_train - 1) * stride + L + S


def build_dataset(
    series: RawSeries,
    L: int,
    S: int,
    stride: int = 1,
    ratios: Sequence[float] = (0.7, 0.1, 0.2),
) -> Tuple[DatasetSplit, RawSeries]:
    """Normalize with train-span statistics, then window and split.

    Returns the split and the normalized series the windows view into.
    """
    span = train_row_span(series.n_steps, L, S, stride, ratios)
    stats = fit_normalization(series, span)
    normed = series.with_values(stats.normalize(series.values))
    split = split_dataset(make_windows(normed, L, S, stride), ratios, stats)
    return split, normed
