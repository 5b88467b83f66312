import numpy as np
import pytest

from stormuq.covariance import exp_cov
from stormuq.grid import BufferRegion, ErrorField, RasterField, pairwise_distances

_RESULTS = []


def record(criterion, ok, detail):
    """Collect one acceptance line; printed at the end of the session."""
    _RESULTS.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


def random_locations(n, rng, extent=5.0):
    # jittered so no two points coincide
    return rng.uniform(0.0, extent, size=(n, 2))


def make_field(n, theta, seed, extent=5.0, region="Gulf", storm_id="s0"):
    rng = np.random.default_rng(seed)
    loc = random_locations(n, rng, extent)
    L = np.linalg.cholesky(exp_cov(pairwise_distances(loc), theta))
    y = L @ rng.standard_normal(n)
    buf = BufferRegion((0.0, 0.0), (1.0, 1.0), 1.0, np.arange(n))
    return ErrorField(y, loc, buf, region, storm_id)


def tiny_grid(ncols=6, nrows=4, values=None, nodata=-9999.0, cell=1.0):
    if values is None:
        values = np.arange(ncols * nrows, dtype=float)
    return RasterField(ncols, nrows, 0.0, 0.0, cell, cell, nodata, np.asarray(values, dtype=float))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
