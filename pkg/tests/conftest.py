import numpy as np
import pytest

from dualreject.synthetic import generate_benchmark
from dualreject.tsio import RawSeries, build_dataset
from dualreject.vae import VAEHyperparams
from dualreject.workflow import build_family, fit_components

_ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}  {detail}")


@pytest.fixture
def acceptance():
    """Record one pass/fail line per criterion, then assert it."""

    def record(cid: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((cid, bool(ok), detail))
        assert ok, f"{cid} failed: {detail}"

    return record


def make_series(values, names=None):
    values = np.asarray(values, dtype=float)
    T, N = values.shape
    names = names or tuple(f"v{i}" for i in range(N))
    return RawSeries(tuple(f"{i:06d}" for i in range(T)), values, names)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_bench():
    """Fitted components on a short synthetic series (shared, read-only)."""
    series = generate_benchmark(2500, seed=3)
    split, normed = build_dataset(series, 16, 8, 1, (0.7, 0.1, 0.2))
    fitted = fit_components(split, vae=VAEHyperparams(latent_dim=4, hidden_dim=32, epochs=10), seed=0)
    family = build_family(fitted, split)
    return split, fitted, family
