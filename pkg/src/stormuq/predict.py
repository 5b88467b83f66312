"""Predictive simulation for a new storm.

A predictive draw is ``theta_new = B x_new + omega`` with
``omega ~ N(0, Sigma_theta)`` taken from a retained Gibbs draw, followed by a
zero-mean error field ``y ~ N(0, Sigma(theta_new))`` on the new buffer.  The
ensemble of fields is added to the forecast (and to the bias field for the
bias-adjusted models) to give prediction maps, exceedance probabilities,
watershed totals and margins of error.  Precipitation is modelled on the
square-root scale; totals in mm are ``max(value, 0) ** 2``.

Random streams: draw ``g`` of an ensemble uses
``SeedSequence(seed, spawn_key=(3, g))`` so results do not depend on how
the work is split across processes.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .covariance import cholesky, correlation, exp_cov, lambda_from_theta, mvn_logpdf_chol
from .errors import DataError, NearSingularError, NumericalError
from .grid import BufferRegion, RasterField, pairwise_distances
from .hier import PosteriorChain
from .mle import nonspatial_loglik

MM_PER_INCH = 25.4
ENSEMBLE_SIZE = 1000
METRIC_FIELDS = ("storm_id", "model_id", "basin", "metric", "value")


@dataclass(frozen=True, eq=False)
class PredictiveEnsemble:
    """Simulated error fields (rows) on one buffer, sqrt-mm."""

    sims: np.ndarray
    thetas: np.ndarray
    buffer: BufferRegion
    forecast: np.ndarray
    offset: np.ndarray | None = None
    grid: RasterField | None = field(default=None, repr=False)

    def __post_init__(self):
        sims = np.atleast_2d(np.asarray(self.sims, dtype=float))
        fc = np.asarray(self.forecast, dtype=float).reshape(-1)
        if sims.shape[0] < 2:
            raise DataError("an ensemble needs at least two simulations")
        if sims.shape[1] != fc.size or fc.size != self.buffer.n:
            raise DataError("simulation length, forecast length and buffer size must agree")
        off = np.zeros(fc.size) if self.offset is None else np.asarray(self.offset, dtype=float).reshape(-1)
        if off.size != fc.size:
            raise DataError("bias offset length does not match the buffer")
        object.__setattr__(self, "sims", sims)
        object.__setattr__(self, "forecast", fc)
        object.__setattr__(self, "offset", off)

    @property
    def size(self) -> int:
        return self.sims.shape[0]

    def totals(self) -> np.ndarray:
        """Square-root-scale predictive values ``forecast + offset + sim`` per draw."""
        return self.forecast + self.offset + self.sims

    def mm(self) -> np.ndarray:
        return np.maximum(self.totals(), 0.0) ** 2

    def to_raster(self, values, nodata=-9999.0) -> RasterField:
        if self.grid is None:
            raise DataError("ensemble has no grid attached")
        out = np.full(self.grid.size, nodata)
        out[self.buffer.member_indices] = values
        return RasterField(self.grid.ncols, self.grid.nrows, self.grid.x0, self.grid.y0,
                           self.grid.dx, self.grid.dy, nodata, out)


@dataclass(frozen=True, eq=False)
class WatershedMask:
    """Positions (into the buffer member list) of a watershed's cells."""

    name: str
    members: np.ndarray
    cell_area_km2: float = 1.0
    min_cells: int = 30

    def __post_init__(self):
        m = np.unique(np.asarray(self.members, dtype=np.int64))
        if m.size < self.min_cells:
            raise DataError(f"watershed {self.name!r} has {m.size} buffer cells; at least {self.min_cells} required")
        if not self.cell_area_km2 > 0:
            raise DataError("cell area must be positive")
        object.__setattr__(self, "members", m)

    @classmethod
    def from_grid_cells(cls, name, cells, buffer: BufferRegion, cell_area_km2=1.0, min_cells=30):
        """Build from grid indices, keeping those inside the buffer."""
        pos = np.searchsorted(buffer.member_indices, cells)
        pos = np.minimum(pos, buffer.n - 1)
        inside = buffer.member_indices[pos] == np.asarray(cells)
        return cls(name, pos[inside], cell_area_km2, min_cells)


# ---------------------------------------------------------------- theta draws


def sample_theta_new(chain: PosteriorChain, x_new, rng, count) -> np.ndarray:
    """``B^(g) x_new + omega``; chain draws are cycled in order."""
    x_new = np.atleast_1d(np.asarray(x_new, dtype=float))
    if x_new.size != chain.q:
        raise DataError(f"x_new has {x_new.size} entries but B has {chain.q} columns")
    g = np.arange(count) % chain.G
    mean = np.einsum("gpq,q->gp", chain.B[g], x_new)
    z = rng.standard_normal((count, chain.p))
    out = mean.copy()
    for k, gi in enumerate(g):
        S = chain.sigma[gi]
        if np.any(S):
            out[k] += np.linalg.cholesky(S) @ z[k]
    return out


def sample_theta_bootstrap(summaries, rng, count) -> np.ndarray:
    """Uniform resample of the stored MLEs."""
    Th = np.array([s.theta_hat for s in summaries], dtype=float)
    if Th.size == 0:
        raise DataError("no MLEs to resample")
    return Th[rng.integers(0, Th.shape[0], size=count)]


# ----------------------------------------------------------------- simulation


def simulate_error_field(theta, D, rng, covariance="exponential") -> np.ndarray:
    """Exact draw from ``N(0, Sigma(theta))`` on points with distance matrix ``D``."""
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    z = rng.standard_normal(n)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if covariance == "nonspatial":
        return np.exp(0.5 * theta[0]) * z
    t1, t2 = np.clip(theta, -700.0, 700.0)
    sigma2, phi = lambda_from_theta((t1, t2))
    try:
        L = cholesky(correlation(D, phi))
    except NearSingularError as exc:
        raise NumericalError(f"cannot factor the correlation at theta={theta.tolist()} ({exc})") from None
    return np.sqrt(sigma2) * (L @ z)


def sim_stream(seed, g) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3, int(g)))))


def _simulate_block(args):
    thetas, start, D, seed, covariance = args
    return np.array([simulate_error_field(t, D, sim_stream(seed, start + k), covariance)
                     for k, t in enumerate(thetas)])


def build_ensemble(thetas, locations, buffer, forecast, seed, offset=None, grid=None,
                   covariance="exponential", jobs=1) -> PredictiveEnsemble:
    """Simulate one error field per theta draw."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    D = pairwise_distances(locations)
    G = thetas.shape[0]
    if jobs <= 1 or G < 2 * jobs:
        sims = _simulate_block((thetas, 0, D, seed, covariance))
    else:
        edges = np.linspace(0, G, jobs + 1).astype(int)
        tasks = [(thetas[a:b], int(a), D, seed, covariance) for a, b in zip(edges[:-1], edges[1:])]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sims = np.concatenate(list(pool.map(_simulate_block, tasks)))
    return PredictiveEnsemble(sims, thetas, buffer, forecast, offset, grid)


# ----------------------------------------------------------------- summaries


def ensemble_quantile(values, level, axis=0):
    """Nearest-rank quantile: the ``ceil(level * G)``-th smallest value."""
    return np.quantile(values, level, axis=axis, method="inverted_cdf")


def prediction_values(ens: PredictiveEnsemble, level) -> np.ndarray:
    if not 0.0 < level < 1.0:
        raise DataError(f"level must lie in (0, 1), got {level}")
    q = ensemble_quantile(ens.sims, level)
    return np.maximum(ens.forecast + ens.offset + q, 0.0)


def prediction_map(ens: PredictiveEnsemble, level) -> RasterField:
    """Forecast plus the pointwise ``level`` quantile of the sims, floored at 0."""
    return ens.to_raster(prediction_values(ens, level))


def coverage(pred, obs, buffer: BufferRegion | None = None) -> float:
    """Fraction of buffer cells with ``obs <= pred``.

    ``pred`` is either a vector on the buffer or a raster (then ``buffer``
    selects the cells).
    """
    if isinstance(pred, RasterField):
        if buffer is None:
            raise DataError("a buffer is needed to read a raster map")
        if buffer.n and buffer.member_indices.max() >= pred.size:
            raise DataError("buffer does not fit the map grid")
        pred = pred.values[buffer.member_indices]
    pred = np.asarray(pred, dtype=float)
    obs = np.asarray(obs, dtype=float)
    if pred.shape != obs.shape:
        raise DataError(f"map has {pred.size} cells but {obs.size} observations were given")
    return float(np.mean(obs <= pred))


def threshold_probabilities(ens: PredictiveEnsemble, threshold_mm) -> np.ndarray:
    if threshold_mm < 0:
        raise DataError("threshold must be non-negative")
    return np.mean(ens.mm() >= threshold_mm, axis=0)


def threshold_prob_map(ens: PredictiveEnsemble, threshold_mm) -> RasterField:
    return ens.to_raster(threshold_probabilities(ens, threshold_mm))


def margin_values(ens: PredictiveEnsemble, level=0.95) -> np.ndarray:
    a = (1.0 - level) / 2.0
    mm = ens.mm()
    return (ensemble_quantile(mm, 1.0 - a) - ensemble_quantile(mm, a)) / 2.0 / MM_PER_INCH


def margins_of_error(ens: PredictiveEnsemble, level=0.95) -> RasterField:
    """Half-width of the central predictive interval in inches."""
    return ens.to_raster(margin_values(ens, level))


class WatershedDensity(NamedTuple):
    totals_mm: np.ndarray
    bandwidth: float
    quantiles: dict
    cell_area_km2: float

    @property
    def volumes_m3(self) -> np.ndarray:
        # 1 mm over 1 km^2 is 1000 m^3
        return self.totals_mm * self.cell_area_km2 * 1000.0

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        u = (x[:, None] - self.totals_mm[None, :]) / self.bandwidth
        return np.exp(-0.5 * u * u).mean(axis=1) / (self.bandwidth * np.sqrt(2.0 * np.pi))


def kde_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    h = 0.9 * spread * x.size ** (-0.2)
    if not h > 0:
        h = 1e-6 * max(1.0, float(np.max(np.abs(x))))
    return h


def watershed_density(ens: PredictiveEnsemble, mask: WatershedMask) -> WatershedDensity:
    """Predictive distribution of the watershed total (mm summed over cells)."""
    if mask.members.max() >= ens.forecast.size:
        raise DataError(f"watershed {mask.name!r} reaches outside the buffer")
    totals = ens.mm()[:, mask.members].sum(axis=1)
    qs = {f"{p:g}": float(ensemble_quantile(totals, p)) for p in (0.025, 0.5, 0.975)}
    return WatershedDensity(totals, kde_bandwidth(totals), qs, mask.cell_area_km2)


# ------------------------------------------------------------------- scoring


class LogScore(NamedTuple):
    value: float
    used: int
    skipped: int


def log_score(thetas, y_obs, D=None, mean=None, covariance="exponential") -> LogScore:
    """Log of the equal-weight Gaussian mixture density at ``y_obs``.

    One component per theta draw with covariance ``Sigma(theta)`` on the
    scored cells.  Draws whose covariance fails to factor are skipped.
    """
    y = np.asarray(y_obs, dtype=float).reshape(-1)
    if y.size < 2:
        raise DataError("a log score needs at least two cells")
    if mean is not None:
        y = y - np.asarray(mean, dtype=float).reshape(-1)
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    if covariance != "nonspatial":
        D = np.asarray(D, dtype=float)
        if D.shape != (y.size, y.size):
            raise DataError("distance matrix does not match the scored cells")
    logs = []
    skipped = 0
    for t in thetas:
        if covariance == "nonspatial":
            logs.append(nonspatial_loglik(y, t[0]))
            continue
        try:
            L = cholesky(exp_cov(D, t))
        except NearSingularError:
            skipped += 1
            continue
        logs.append(mvn_logpdf_chol(y, L))
    if not logs:
        raise NumericalError("every predictive draw failed to factor")
    logs = np.asarray(logs)
    return LogScore(float(logsumexp(logs) - np.log(logs.size)), logs.size, skipped)


def write_metric_rows(path, rows) -> None:
    """CSV with columns storm_id, model_id, basin, metric, value."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k == "value" else r[k]) for k in METRIC_FIELDS})
