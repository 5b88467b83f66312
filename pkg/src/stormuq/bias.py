"""Systematic forecast bias shared by all storms.

The error fields are modelled as ``y_i = A_i mu + e_i`` with
``e_i ~ N(0, Sigma_i)``, where ``A_i`` selects storm i's buffer cells from the
common domain (the union of all buffers) and ``Sigma_i`` is the exponential
covariance at the storm's current estimate ``theta_hat_i``.  With prior
precision ``C^{-1}`` (zero for the flat prior) the posterior of ``mu`` is

    Sigma_mu = (C^{-1} + sum_i A_iᵀ Sigma_i^{-1} A_i)^{-1}
    m_mu     = Sigma_mu sum_i A_iᵀ Sigma_i^{-1} y_i

The precision is assembled storm block by storm block.  The EM-style loop
alternates between refitting ``theta_hat_i`` on ``y_i - A_i m_mu`` and
recomputing ``m_mu``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .covariance import cholesky, exp_cov
from .errors import (ConvergenceWarning, DataError, DegenerateFieldError, GeometryError,
                     NearSingularError, NumericalError)
from .grid import ErrorField, IncidenceMap, RasterField, domain_indices
from .mle import StormSummary, fit_storm

NODATA = -9999.0


@dataclass(frozen=True, eq=False)
class MeanField:
    """Bias estimate over the domain (sqrt-mm).  ``sd_mu`` is ``None`` for the empirical mean."""

    m_mu: np.ndarray
    sd_mu: np.ndarray | None
    n_contrib: np.ndarray
    domain_indices: np.ndarray
    grid: RasterField | None = None

    def __post_init__(self):
        n = len(self.domain_indices)
        for name in ("m_mu", "sd_mu", "n_contrib"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise DataError(f"{name} has length {len(v)}, expected {n}")
        if self.sd_mu is not None and np.any(self.sd_mu[self.covered] < 0):
            raise DataError("negative posterior standard deviation")

    @property
    def covered(self) -> np.ndarray:
        return np.asarray(self.n_contrib) > 0

    def on_buffer(self, ef: ErrorField) -> np.ndarray:
        """``A_i m_mu`` for one storm."""
        return IncidenceMap.from_indices(self.domain_indices, ef.buffer.member_indices).select(self.m_mu)

    def _raster(self, values, nodata=NODATA) -> RasterField:
        if self.grid is None:
            raise DataError("mean field has no grid attached")
        out = np.full(self.grid.size, nodata)
        keep = self.covered
        out[self.domain_indices[keep]] = np.asarray(values, dtype=float)[keep]
        return RasterField(self.grid.ncols, self.grid.nrows, self.grid.x0, self.grid.y0,
                           self.grid.dx, self.grid.dy, nodata, out)

    def to_rasters(self) -> dict:
        """Mean, sd and count grids sharing the domain header."""
        out = {"mean": self._raster(self.m_mu)}
        if self.sd_mu is not None:
            out["sd"] = self._raster(self.sd_mu)
        out["count"] = self._raster(self.n_contrib.astype(float))
        return out


def _common_grid(fields):
    grid = fields[0].grid
    for ef in fields[1:]:
        if grid is not None and ef.grid is not None and not grid.same_grid(ef.grid):
            raise GeometryError(f"storm {ef.storm_id!r} lies on a different grid")
    return grid


def _incidence(fields, dom):
    return [IncidenceMap.from_indices(dom, ef.buffer.member_indices) for ef in fields]


def empirical_mu(fields) -> MeanField:
    """Per-cell average of the error fields covering it."""
    fields = list(fields)
    if not fields:
        raise DataError("no error fields")
    grid = _common_grid(fields)
    dom = domain_indices([ef.buffer for ef in fields])
    total = np.zeros(dom.size)
    count = np.zeros(dom.size, dtype=np.int64)
    for ef, A in zip(fields, _incidence(fields, dom)):
        np.add.at(total, A.rows, ef.y)
        np.add.at(count, A.rows, 1)
    m = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return MeanField(m, None, count, dom, grid)


def storm_precision(ef: ErrorField, theta) -> tuple[np.ndarray, np.ndarray]:
    """``Sigma_i^{-1}`` and ``Sigma_i^{-1} y_i`` for one storm."""
    try:
        L = cholesky(exp_cov(ef.distances(), theta))
    except NearSingularError as exc:
        raise NumericalError(f"covariance of storm {ef.storm_id!r} is not SPD ({exc})") from None
    Q = cho_solve((L, True), np.eye(ef.n))
    return Q, Q @ ef.y


def posterior_mu(fields, summaries, prior_precision=None) -> MeanField:
    """Posterior mean and pointwise sd of the bias field.

    ``summaries`` are matched to ``fields`` by storm id.  ``prior_precision``
    is ``None`` (flat prior) or an SPD matrix over the domain.
    """
    fields = list(fields)
    if not fields:
        raise DataError("no error fields")
    by_id = {s.storm_id: s for s in summaries}
    missing = [ef.storm_id for ef in fields if ef.storm_id not in by_id]
    if missing:
        raise DataError(f"no summary for storm(s) {missing}")
    grid = _common_grid(fields)
    dom = domain_indices([ef.buffer for ef in fields])
    nD = dom.size
    P = np.zeros((nD, nD))
    b = np.zeros(nD)
    count = np.zeros(nD, dtype=np.int64)
    for ef, A in zip(fields, _incidence(fields, dom)):
        Q, Qy = storm_precision(ef, by_id[ef.storm_id].theta_hat)
        P[np.ix_(A.rows, A.rows)] += Q
        b[A.rows] += Qy
        count[A.rows] += 1
    if prior_precision is not None:
        C = np.asarray(prior_precision, dtype=float)
        if C.shape != (nD, nD):
            raise DataError(f"prior precision must be {nD}x{nD}, got {C.shape}")
        P += C
    keep = np.flatnonzero(count > 0) if prior_precision is None else np.arange(nD)
    try:
        L = cholesky(P[np.ix_(keep, keep)])
    except NearSingularError as exc:
        raise NumericalError(f"total precision of the bias field is singular ({exc})") from None
    m = np.full(nD, np.nan)
    sd = np.full(nD, np.nan)
    m[keep] = cho_solve((L, True), b[keep])
    Linv = solve_triangular(L, np.eye(keep.size), lower=True)
    sd[keep] = np.sqrt(np.einsum("ij,ij->j", Linv, Linv))
    uncovered = count == 0
    m[uncovered] = np.nan
    sd[uncovered] = np.nan
    return MeanField(m, sd, count, dom, grid)


def _degenerate(r, scale) -> bool:
    return float(np.max(np.abs(r))) <= 1e-12 * (1.0 + scale)


def _refit(ef, previous, others, hessian, scale=0.0):
    """Fit the bias-adjusted field, falling back when it carries no signal."""
    if not _degenerate(ef.y, scale):
        try:
            return fit_storm(ef, hessian), False
        except (DegenerateFieldError, NumericalError):
            pass
    if previous is not None:
        theta, H = previous.theta_hat, previous.H
    elif others:
        theta = np.median([s.theta_hat for s in others], axis=0)
        H = np.median([s.H for s in others], axis=0)
    else:
        theta, H = np.zeros(2), np.eye(2)
    return StormSummary(ef.storm_id, ef.region_label, ef.n, theta, H), True


@dataclass(frozen=True)
class EMInfo:
    iterations: int
    converged: bool
    deltas: tuple
    fallbacks: tuple


def em_bias_loop(fields, max_iters=20, tol=1e-10, prior_precision=None, summaries=None,
                 hessian="analytic"):
    """Alternate theta refits on ``y_i - A_i m_mu`` with bias updates.

    Returns ``(MeanField, summaries, EMInfo)``.  The summaries are those of
    the bias-adjusted fields.  When ``tol`` is not met after ``max_iters``
    passes the last iterate is returned and a :class:`ConvergenceWarning`
    is issued.
    """
    fields = list(fields)
    if summaries is None:
        summaries = []
        for ef in fields:
            s, _ = _refit(ef, None, summaries, hessian)
            summaries.append(s)
    mf = posterior_mu(fields, summaries, prior_precision)
    deltas, fallbacks = [], []
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        adjusted = [ef.with_values(ef.y - mf.on_buffer(ef)) for ef in fields]
        prev = {s.storm_id: s for s in summaries}
        new, fb = [], []
        for ef, raw in zip(adjusted, fields):
            s, used = _refit(ef, prev.get(ef.storm_id), new, hessian, float(np.max(np.abs(raw.y))))
            new.append(s)
            if used:
                fb.append(ef.storm_id)
        summaries = new
        fallbacks.append(tuple(fb))
        mf_new = posterior_mu(fields, summaries, prior_precision)
        d = np.nan_to_num(mf_new.m_mu - mf.m_mu)
        delta = float(np.max(np.abs(d))) if d.size else 0.0
        deltas.append(delta)
        mf = mf_new
        if delta < tol:
            converged = True
            break
    if not converged:
        warnings.warn(f"bias loop stopped after {it} passes; last change {deltas[-1]:.3g}",
                      ConvergenceWarning, stacklevel=2)
    return mf, summaries, EMInfo(it, converged, tuple(deltas), tuple(fallbacks))


def standardized_error_map(mf: MeanField) -> RasterField:
    """``m_mu / sd_mu`` on covered cells, nodata elsewhere."""
    if mf.sd_mu is None:
        raise DataError("standardized map needs posterior standard deviations")
    cov = mf.covered
    if np.any(mf.sd_mu[cov] <= 0):
        bad = mf.domain_indices[cov & (mf.sd_mu <= 0)]
        raise DataError(f"zero posterior sd at covered cell(s) {bad[:10].tolist()}")
    z = np.where(cov, mf.m_mu / np.where(cov, mf.sd_mu, 1.0), np.nan)
    return mf._raster(z)
