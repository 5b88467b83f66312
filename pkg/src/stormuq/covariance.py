"""Exponential covariance, the theta/lambda reparameterisation and the
Cholesky-based Gaussian log-likelihood.

Covariance parameters live in two coordinate systems:

* ``Lambda(sigma2, phi)``: marginal variance and range scale;
* ``Theta(t1, t2) = (log(sigma2 / phi), log(sigma2))``: the coordinates in
  which the maximum likelihood estimates are close to Gaussian.

Everything downstream works in theta; lambda only appears at I/O boundaries.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import DataError, NearSingularError

LOG_2PI = float(np.log(2.0 * np.pi))


class Theta(NamedTuple):
    t1: float
    t2: float


class Lambda(NamedTuple):
    sigma2: float
    phi: float


def as_theta(t) -> Theta:
    t1, t2 = (float(v) for v in np.asarray(t, dtype=float).reshape(2))
    if not (np.isfinite(t1) and np.isfinite(t2)):
        raise DataError(f"theta must be finite, got {(t1, t2)}")
    return Theta(t1, t2)


def theta_from_lambda(lam) -> Theta:
    sigma2, phi = (float(v) for v in lam)
    if not (sigma2 > 0 and phi > 0):
        raise DataError(f"sigma2 and phi must be positive, got {(sigma2, phi)}")
    return Theta(float(np.log(sigma2 / phi)), float(np.log(sigma2)))


def lambda_from_theta(t) -> Lambda:
    t = as_theta(t)
    return Lambda(float(np.exp(t.t2)), float(np.exp(t.t2 - t.t1)))


def cholesky(a, jitter=0.0) -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NearSingularError` with the minor index."""
    a = np.asarray(a, dtype=float)
    if jitter:
        a = a + jitter * np.eye(a.shape[0])
    c, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NearSingularError(
            f"matrix is not positive definite (leading minor of order {info})", minor=int(info)
        )
    if info < 0:
        raise ValueError(f"illegal argument {-info} to dpotrf")
    return c


def correlation(D, phi) -> np.ndarray:
    return np.exp(-np.asarray(D) / phi)


def exp_cov(D, t, jitter=0.0) -> np.ndarray:
    """``sigma2 * exp(-D / phi)`` with optional diagonal jitter (default none)."""
    sigma2, phi = lambda_from_theta(t)
    S = sigma2 * correlation(D, phi)
    if jitter:
        S[np.diag_indices_from(S)] += jitter
    return S


def mvn_logpdf_chol(y, L) -> float:
    """Zero-mean Gaussian log density given the lower Cholesky factor of the covariance."""
    z = solve_triangular(L, y, lower=True, check_finite=False)
    return -0.5 * y.size * LOG_2PI - np.log(np.diag(L)).sum() - 0.5 * float(z @ z)


def gp_loglik(y, D, t, mean=None, jitter=0.0) -> float:
    """Gaussian log-likelihood of ``y`` under the exponential covariance at ``t``."""
    y = np.asarray(y, dtype=float)
    D = np.asarray(D, dtype=float)
    if D.shape != (y.size, y.size):
        raise DataError(f"distance matrix shape {D.shape} does not match {y.size} observations")
    if mean is not None:
        y = y - np.asarray(mean, dtype=float)
    L = cholesky(exp_cov(D, t, jitter))
    return mvn_logpdf_chol(y, L)
