"""Per-storm maximum likelihood and curvature.

Each storm's error field is reduced to its MLE ``theta_hat`` and the negative
Hessian ``H`` of the log-likelihood in theta coordinates.  The Gibbs stage
treats ``theta_hat ~ N(theta, H^{-1})`` as the storm's likelihood, so these
two numbers are all that survives of a field of thousands of cells.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize_scalar

from .covariance import (
    LOG_2PI,
    Theta,
    as_theta,
    cholesky,
    correlation,
    gp_loglik,
    lambda_from_theta,
    theta_from_lambda,
)
from .errors import (
    BoundaryWarning,
    DataError,
    DegenerateFieldError,
    NearSingularError,
    NumericalError,
)
from .grid import ErrorField

SUMMARY_SCHEMA = "storm-summary/1"

PROFILE_XTOL = 1e-8


@dataclass(frozen=True, eq=False)
class StormSummary:
    """MLE and negative Hessian of one storm, in theta coordinates."""

    storm_id: str
    region: str
    n_points: int
    theta_hat: np.ndarray
    H: np.ndarray
    covariance: str = "exponential"

    def __post_init__(self):
        th = np.atleast_1d(np.asarray(self.theta_hat, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if H.shape != (th.size, th.size):
            raise DataError(f"H has shape {H.shape}, expected {(th.size, th.size)}")
        if not np.allclose(H, H.T, rtol=0, atol=1e-10 * max(1.0, np.abs(H).max())):
            raise DataError(f"H for storm {self.storm_id!r} is not symmetric")
        object.__setattr__(self, "theta_hat", th)
        object.__setattr__(self, "H", 0.5 * (H + H.T))

    @property
    def p(self) -> int:
        return self.theta_hat.size

    def wald_interval(self, z=1.959963984540054):
        """Per-coordinate ``theta_hat -/+ z * sd`` with sd from ``H^{-1}``."""
        sd = np.sqrt(np.diag(np.linalg.inv(self.H)))
        return self.theta_hat - z * sd, self.theta_hat + z * sd

    def to_json(self) -> dict:
        return {
            "schema": SUMMARY_SCHEMA,
            "storm_id": self.storm_id,
            "region": self.region,
            "n_points": int(self.n_points),
            "covariance": self.covariance,
            "theta_hat": self.theta_hat.tolist(),
            "H": self.H.tolist(),
        }

    @classmethod
    def from_json(cls, doc) -> "StormSummary":
        if doc.get("schema", SUMMARY_SCHEMA) != SUMMARY_SCHEMA:
            raise DataError(f"unsupported summary schema {doc.get('schema')!r}")
        try:
            return cls(doc["storm_id"], doc["region"], int(doc["n_points"]),
                       doc["theta_hat"], doc["H"], doc.get("covariance", "exponential"))
        except KeyError as exc:
            raise DataError(f"summary missing field {exc}") from None


# ----------------------------------------------------------------- profile MLE


def _field_arrays(ef, D):
    if isinstance(ef, ErrorField):
        y = ef.y
        if D is None:
            D = ef.distances()
    else:
        y = np.asarray(ef, dtype=float)
        if D is None:
            raise DataError("a distance matrix is required for a bare vector")
    return y, np.asarray(D, dtype=float)


def profile_bracket(D):
    """Search interval for log(phi): [log(0.01 * mean d), log(10 * max d)]."""
    d = D[np.triu_indices_from(D, k=1)]
    return np.log(0.01 * d.mean()), np.log(10.0 * d.max())


def profile_objective(y, D):
    """Negative profile log-likelihood in log(phi), up to a constant.

    For fixed phi the variance maximiser is ``yᵀR⁻¹y / n`` with R the
    correlation matrix, leaving ``n/2 log sigma2_hat + 1/2 log|R|``.
    """
    n = y.size

    def f(log_phi):
        try:
            L = cholesky(correlation(D, np.exp(log_phi)))
        except NearSingularError:
            return np.inf
        z = solve_triangular(L, y, lower=True, check_finite=False)
        return 0.5 * n * np.log(z @ z / n) + np.log(np.diag(L)).sum()

    return f


def profile_mle(ef, D=None, bracket=None) -> Theta:
    """Maximum likelihood theta via a bounded 1-D search over log(phi)."""
    y, D = _field_arrays(ef, D)
    if y.size < 2:
        raise DataError("need at least two points")
    if not np.any(y):
        raise DegenerateFieldError("error field is identically zero; sigma2_hat = 0")
    lo, hi = profile_bracket(D) if bracket is None else bracket
    f = profile_objective(y, D)
    res = minimize_scalar(f, bounds=(lo, hi), method="bounded",
                          options={"xatol": PROFILE_XTOL, "maxiter": 500})
    if not np.isfinite(res.fun):
        raise NumericalError("profile likelihood is not finite anywhere in the bracket")
    log_phi = float(res.x)
    if min(log_phi - lo, hi - log_phi) < 1e-5 * (hi - lo):
        warnings.warn(
            f"profile optimum log(phi)={log_phi:.6g} at the edge of the bracket [{lo:.6g}, {hi:.6g}]",
            BoundaryWarning,
            stacklevel=2,
        )
    phi = np.exp(log_phi)
    L = cholesky(correlation(D, phi))
    z = solve_triangular(L, y, lower=True, check_finite=False)
    sigma2 = float(z @ z) / y.size
    return theta_from_lambda((sigma2, phi))


# -------------------------------------------------------------------- Hessians


def _lambda_jacobians(sigma2, phi):
    # d(lambda)/d(theta): rows (sigma2, phi), columns (t1, t2)
    Jinv = np.array([[0.0, sigma2], [-phi, phi]])
    # second derivatives of sigma2 and phi with respect to theta
    d2_sigma2 = np.array([[0.0, 0.0], [0.0, sigma2]])
    d2_phi = phi * np.array([[1.0, -1.0], [-1.0, 1.0]])
    return Jinv, d2_sigma2, d2_phi


def fisher_lambda(D, lam) -> np.ndarray:
    """Expected information in (sigma2, phi) for a zero-mean exponential GP."""
    sigma2, phi = lam
    n = D.shape[0]
    R = correlation(D, phi)
    Rp = R * D / phi**2
    W = cho_solve((cholesky(R), True), Rp, check_finite=False)
    trW = np.trace(W)
    trWW = float(np.sum(W * W.T))
    return np.array([
        [n / (2.0 * sigma2**2), trW / (2.0 * sigma2)],
        [trW / (2.0 * sigma2), 0.5 * trWW],
    ])


def observed_lambda(y, D, lam):
    """Gradient and negative Hessian of the log-likelihood in (sigma2, phi)."""
    sigma2, phi = lam
    n = y.size
    R = correlation(D, phi)
    Rp = R * D / phi**2
    Rpp = Rp * D / phi**2 - 2.0 * R * D / phi**3
    cf = (cholesky(R), True)
    a = cho_solve(cf, y, check_finite=False)           # R^-1 y
    W = cho_solve(cf, Rp, check_finite=False)           # R^-1 R'
    V = cho_solve(cf, Rpp, check_finite=False)          # R^-1 R''
    q = float(y @ a)
    Rpa = Rp @ a
    aRpa = float(a @ Rpa)
    b = cho_solve(cf, Rpa, check_finite=False)           # R^-1 R' R^-1 y
    trW = np.trace(W)
    trWW = float(np.sum(W * W.T))
    trV = np.trace(V)
    yBy = float(a @ Rpp @ a) - 2.0 * float(Rpa @ b)

    grad = np.array([
        -n / (2.0 * sigma2) + q / (2.0 * sigma2**2),
        -0.5 * trW + aRpa / (2.0 * sigma2),
    ])
    d_ss = n / (2.0 * sigma2**2) - q / sigma2**3
    d_sp = -aRpa / (2.0 * sigma2**2)
    d_pp = -0.5 * (trV - trWW) + yBy / (2.0 * sigma2)
    return grad, -np.array([[d_ss, d_sp], [d_sp, d_pp]])


def hessian_analytic(ef, t, kind="observed", D=None) -> np.ndarray:
    """Negative Hessian of the log-likelihood in theta coordinates.

    ``kind="observed"`` differentiates the log-likelihood exactly (including
    the second-order chain-rule term, which vanishes at the MLE);
    ``kind="expected"`` uses the Fisher information.  Both are mapped from
    (sigma2, phi) to theta with the Jacobian of the reparameterisation.
    """
    y, D = _field_arrays(ef, D)
    lam = lambda_from_theta(as_theta(t))
    Jinv, d2_sigma2, d2_phi = _lambda_jacobians(*lam)
    if kind == "expected":
        H = Jinv.T @ fisher_lambda(D, lam) @ Jinv
    elif kind == "observed":
        grad, H_lam = observed_lambda(y, D, lam)
        H = Jinv.T @ H_lam @ Jinv - grad[0] * d2_sigma2 - grad[1] * d2_phi
    else:
        raise ValueError(f"kind must be 'observed' or 'expected', not {kind!r}")
    return 0.5 * (H + H.T)


def fd_steps(x, rel=1e-4):
    x = np.asarray(x, dtype=float)
    return rel * np.maximum(1.0, np.abs(x))


def finite_difference_hessian(f, x, steps=None) -> np.ndarray:
    """Central-difference Hessian of a scalar function ``f`` at ``x``."""
    x = np.asarray(x, dtype=float)
    h = fd_steps(x) if steps is None else np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    if np.any(h <= 0) or not np.all(np.isfinite(x + h)):
        raise NumericalError(f"invalid finite-difference steps {h}")
    k = x.size
    E = np.diag(h)

    def ev(v):
        val = f(v)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite function value at stencil point {v}")
        return val

    f0 = ev(x)
    Hm = np.empty((k, k))
    for i in range(k):
        Hm[i, i] = (ev(x + E[i]) - 2.0 * f0 + ev(x - E[i])) / h[i] ** 2
        for j in range(i):
            Hm[i, j] = Hm[j, i] = (
                ev(x + E[i] + E[j]) - ev(x + E[i] - E[j]) - ev(x - E[i] + E[j]) + ev(x - E[i] - E[j])
            ) / (4.0 * h[i] * h[j])
    return Hm


def finite_difference_gradient(f, x, steps=None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    h = fd_steps(x) if steps is None else np.broadcast_to(np.asarray(steps, dtype=float), x.shape)
    E = np.diag(h)
    return np.array([(f(x + E[i]) - f(x - E[i])) / (2.0 * h[i]) for i in range(x.size)])


def hessian_numeric(ef, t, D=None, steps=None) -> np.ndarray:
    """Negative finite-difference Hessian of :func:`gp_loglik` in theta, symmetrised.

    With ``steps`` given this is a plain central difference.  By default the
    central differences at relative steps ``1e-3`` and ``2e-3`` are combined
    by one Richardson step, which keeps the truncation error at fourth order
    while the step stays large enough to swamp the round-off of an
    ill-conditioned covariance.
    """
    y, D = _field_arrays(ef, D)
    t = np.asarray(as_theta(t))

    def ll(v):
        try:
            return gp_loglik(y, D, v)
        except NearSingularError:
            return np.nan

    if steps is None:
        h = fd_steps(t, 1e-3)
        H = -(4.0 * finite_difference_hessian(ll, t, h) - finite_difference_hessian(ll, t, 2.0 * h)) / 3.0
    else:
        H = -finite_difference_hessian(ll, t, steps)
    return 0.5 * (H + H.T)


# -------------------------------------------------------------- storm summary


def is_spd(M) -> bool:
    try:
        cholesky(M)
    except NearSingularError:
        return False
    return True


def fit_storm(ef: ErrorField, hessian="analytic") -> StormSummary:
    """MLE plus negative Hessian for one error field."""
    D = ef.distances()
    theta = profile_mle(ef, D)
    if hessian == "analytic":
        H = hessian_analytic(ef, theta, D=D)
    elif hessian == "expected":
        H = hessian_analytic(ef, theta, kind="expected", D=D)
    elif hessian == "numeric":
        H = hessian_numeric(ef, theta, D=D)
    else:
        raise ValueError(f"unknown hessian method {hessian!r}")
    if not is_spd(H):
        raise NumericalError(f"negative Hessian of storm {ef.storm_id!r} is not positive definite: {H.tolist()}")
    return StormSummary(ef.storm_id, ef.region_label, ef.n, np.asarray(theta), H)


def nonspatial_summary(ef: ErrorField) -> StormSummary:
    """Summary under independent errors: theta = log(sigma2), H = n / 2."""
    y = ef.y
    if not np.any(y):
        raise DegenerateFieldError("error field is identically zero; sigma2_hat = 0")
    s2 = float(y @ y) / y.size
    return StormSummary(ef.storm_id, ef.region_label, ef.n, [np.log(s2)], [[0.5 * y.size]], "nonspatial")


def nonspatial_loglik(y, log_sigma2) -> float:
    y = np.asarray(y, dtype=float)
    return -0.5 * y.size * (LOG_2PI + log_sigma2) - 0.5 * float(y @ y) / np.exp(log_sigma2)


def _fit_one(args):
    ef, hessian = args
    return fit_storm(ef, hessian)


def fit_storms(fields, jobs=1, hessian="analytic") -> list[StormSummary]:
    """Fit every field; results come back in input order whatever ``jobs`` is."""
    fields = list(fields)
    if jobs <= 1 or len(fields) < 2:
        return [fit_storm(ef, hessian) for ef in fields]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fit_one, [(ef, hessian) for ef in fields]))


def save_summary(summary: StormSummary, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{summary.storm_id}.json"
    path.write_text(json.dumps(summary.to_json(), indent=1))
    return path


def load_summaries(directory) -> list[StormSummary]:
    directory = Path(directory)
    paths = sorted(directory.glob("*.json"))
    out = []
    for p in paths:
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{p}: {exc}") from None
        if doc.get("schema") != SUMMARY_SCHEMA:
            continue
        out.append(StormSummary.from_json(doc))
    if not out:
        raise DataError(f"no storm summaries found in {directory}")
    return sorted(out, key=lambda s: s.storm_id)
