"""Bundled synthetic benchmark used when the public ETT files are absent.

Signals follow an AR(1) driven by a shared, slowly varying volatility that is
itself observed as the last column, so the size of future forecast errors is
predictable from the input window. A mean-shifted segment inside the test
span provides out-of-distribution inputs.
"""

from __future__ import annotations

from datetime import datetime, timedelta

import numpy as np

from .tsio import RawSeries


def generate_benchmark(
    n_steps: int = 4000,
    n_signals: int = 2,
    seed: int = 0,
    phi: float = 0.9,
    vol_persistence: float = 0.9,
    vol_noise: float = 0.2,
    ood_fraction: float = 0.1,
    ood_shift: float = 5.0,
    test_ratio: float = 0.2,
) -> RawSeries:
    """Heteroscedastic AR(1) signals plus an observed volatility channel.

    ``ood_fraction`` of the final ``test_ratio`` share of rows (centered in
    that span) is shifted by ``ood_shift`` in-distribution standard
    deviations on every signal channel.
    """
    rng = np.random.default_rng(seed)
    burn = 500
    total = n_steps + burn
    h = np.zeros(total)
    for t in range(1, total):
        h[t] = vol_persistence * h[t - 1] + vol_noise * rng.standard_normal()
    vol = 0.3 * np.exp(h)
    x = np.zeros((total, n_signals))
    eps = rng.standard_normal((total, n_signals))
    for t in range(1, total):
        x[t] = phi * x[t - 1] + vol[t] * eps[t]
    x, vol = x[burn:], vol[burn:]

    test_start = n_steps - int(round(test_ratio * n_steps))
    n_ood = int(round(ood_fraction * (n_steps - test_start)))
    if n_ood > 0:
        start = test_start + (n_steps - test_start - n_ood) // 2
        scale = x[:test_start].std(axis=0, ddof=1)
        x[start:start + n_ood] += ood_shift * scale

    values = np.column_stack([x, vol])
    t0 = datetime(2020, 1, 1)
    stamps = tuple((t0 + timedelta(minutes=15 * i)).strftime("%Y-%m-%d %H:%M:%S") for i in range(n_steps))
    names = tuple(f"sig{i}" for i in range(n_signals)) + ("vol",)
    return RawSeries(stamps, values, names)


def ood_rows(n_steps: int, ood_fraction: float = 0.1, test_ratio: float = 0.2) -> range:
    """Row range of the shifted segment produced by :func:`generate_benchmark`."""
    test_start = n_steps - int(round(test_ratio * n_steps))
    n_ood = int(round(ood_fraction * (n_steps - test_start)))
    start = test_start + (n_steps - test_start - n_ood) // 2
    return range(start, start + n_ood)


def write_csv(series: RawSeries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(("date",) + series.variable_names) + "\n")
        for stamp, row in zip(series.timestamps, series.values):
            fh.write(stamp + "," + ",".join(repr(float(v)) for v in row) + "\n")
