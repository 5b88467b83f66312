"""Gibbs sampler for the storm hierarchy.

Each storm contributes the approximate likelihood ``theta_hat_i ~ N(theta_i,
H_i^{-1})``.  The storm parameters are tied together by
``theta_i ~ N(B x_i, Sigma_theta)`` with a flat prior on ``B`` and an
inverse-Wishart prior ``IW(nu0, S0)`` on ``Sigma_theta``.  All three full
conditionals are conjugate, so each sweep is an exact draw of

1. every ``theta_i`` (bivariate normal),
2. ``Sigma_theta`` (inverse Wishart, Bartlett construction),
3. ``B`` (matrix normal).

Model regimes:

====  =====================================================================
1     region regressors x_i = (1, 1{Florida}, 1{Gulf})
2     common mean, x_i = 1
3     no hierarchy: theta_i = mu_theta for every storm
5     nonspatial summaries (p = 1) with the model-1 regressors
====  =====================================================================

Models 6-9 reuse the chains of 1-4 fitted to bias-adjusted summaries, and
model 4 is a bootstrap of the MLEs that needs no chain.

Random streams
--------------
Every storm draws its normals from its own Philox stream keyed by
``SeedSequence(seed, spawn_key=(1, crc32(storm_id)))``; the hyperparameter
blocks use ``spawn_key=(0,)``.  Storms are processed in ``storm_id`` order,
so permuting the input list does not change the chain.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .covariance import cholesky
from .errors import DataError, DesignError, NearSingularError, NumericalError
from .grid import REGIONS
from .mle import StormSummary

CHAIN_SCHEMA = "chain/1"

HIERARCHICAL_MODELS = (1, 2, 5)
CHAIN_MODELS = (1, 2, 3, 5)


# ---------------------------------------------------------------- design/prior


@dataclass(frozen=True)
class DesignSpec:
    model_id: int

    def __post_init__(self):
        if self.model_id not in CHAIN_MODELS:
            raise DataError(f"model {self.model_id} has no Gibbs chain; expected one of {CHAIN_MODELS}")

    @property
    def uses_regions(self) -> bool:
        return self.model_id in (1, 5)

    @property
    def hierarchical(self) -> bool:
        return self.model_id != 3

    @property
    def q(self) -> int:
        return 3 if self.uses_regions else 1

    def regressors(self, region: str) -> np.ndarray:
        if region not in REGIONS:
            raise DataError(f"unknown region {region!r}")
        if not self.uses_regions:
            return np.ones(1)
        return np.array([1.0, float(region == "Florida"), float(region == "Gulf")])

    def matrix(self, regions) -> np.ndarray:
        return np.array([self.regressors(r) for r in regions]).reshape(-1, self.q)


@dataclass(frozen=True, eq=False)
class HyperPrior:
    nu0: float
    S0: np.ndarray

    def __post_init__(self):
        S0 = np.atleast_2d(np.asarray(self.S0, dtype=float))
        p = S0.shape[0]
        if S0.shape != (p, p) or not np.allclose(S0, S0.T):
            raise DataError("S0 must be a symmetric square matrix")
        if self.nu0 < p + 1:
            raise DataError(f"nu0 = {self.nu0} must be at least p + 1 = {p + 1}")
        try:
            cholesky(S0)
        except NearSingularError:
            raise DataError(f"S0 is not positive definite: {S0.tolist()}") from None
        object.__setattr__(self, "S0", S0)


def empirical_bayes_s0(summaries, nu0=None) -> HyperPrior:
    """``S0 = nu0 * Cov(theta_hat)`` (divisor N - 1), ``nu0 = p + 1`` by default."""
    Th = np.array([s.theta_hat for s in summaries], dtype=float)
    if Th.ndim != 2 or Th.shape[0] < 3:
        raise DataError("the empirical-Bayes scale needs at least three storms")
    p = Th.shape[1]
    nu0 = p + 1 if nu0 is None else nu0
    C = np.atleast_2d(np.cov(Th, rowvar=False, ddof=1))
    try:
        cholesky(C)
    except NearSingularError:
        raise DataError("theta_hat rows are degenerate; empirical-Bayes S0 is singular") from None
    return HyperPrior(nu0, nu0 * C)


# ------------------------------------------------------------ full conditionals


def theta_conditional(theta_hat, H, B, x, sigma):
    """Mean and covariance of ``theta_i`` given everything else."""
    theta_hat = np.atleast_1d(theta_hat)
    H = np.atleast_2d(H)
    Sinv = np.linalg.inv(np.atleast_2d(sigma))
    P = H + Sinv
    cov = np.linalg.inv(P)
    mean = cov @ (H @ theta_hat + Sinv @ (np.atleast_2d(B) @ np.atleast_1d(x)))
    return mean, cov


def sample_theta_i(theta_hat, H, B, x, sigma, rng) -> np.ndarray:
    """One draw from ``N((H+S^-1)^-1 (H theta_hat + S^-1 B x), (H+S^-1)^-1)``."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    H = np.atleast_2d(H)
    Sinv = np.linalg.inv(np.atleast_2d(sigma))
    P = H + Sinv
    try:
        L = cholesky(P)
    except NearSingularError as exc:
        raise NumericalError(f"conditional precision H + Sigma^-1 is not SPD ({exc})") from None
    b = H @ theta_hat + Sinv @ (np.atleast_2d(B) @ np.atleast_1d(x))
    mean = solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)
    z = rng.standard_normal(theta_hat.size)
    return mean + solve_triangular(L.T, z, lower=False)


def sample_inverse_wishart(df, scale, rng) -> np.ndarray:
    """Inverse-Wishart draw via the Bartlett factor of the inverse scale.

    With ``scale = U Uᵀ`` and ``A`` lower triangular (chi variables with
    ``df - j`` degrees of freedom on the diagonal, standard normals below),
    ``W = U^{-ᵀ} A Aᵀ U^{-1}`` is ``Wishart(df, scale^{-1})`` and the draw is
    ``W^{-1} = Kᵀ K`` with ``K = A^{-1} Uᵀ``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    p = scale.shape[0]
    if df <= p - 1:
        raise DataError(f"inverse-Wishart degrees of freedom {df} must exceed p - 1 = {p - 1}")
    try:
        U = cholesky(scale)
    except NearSingularError as exc:
        raise NumericalError(f"inverse-Wishart scale is not SPD ({exc})") from None
    A = np.zeros((p, p))
    A[np.diag_indices(p)] = np.sqrt(rng.chisquare(df - np.arange(p)))
    if p > 1:
        A[np.tril_indices(p, k=-1)] = rng.standard_normal(p * (p - 1) // 2)
    K = solve_triangular(A, U.T, lower=True)
    S = K.T @ K
    return 0.5 * (S + S.T)


def residual_scatter(thetas, B, X) -> np.ndarray:
    thetas = np.asarray(thetas, dtype=float).reshape(len(X), -1)
    R = thetas - np.asarray(X) @ np.atleast_2d(B).T
    return R.T @ R


def sample_sigma_theta(thetas, B, X, prior: HyperPrior, rng) -> np.ndarray:
    """Draw from ``IW(N + nu0, sum_i r_i r_iᵀ + S0)``, ``r_i = theta_i - B x_i``."""
    X = np.asarray(X, dtype=float).reshape(-1, np.atleast_2d(B).shape[1]) if len(X) else np.zeros((0, 1))
    N = X.shape[0]
    scale = prior.S0.copy()
    if N:
        scale = scale + residual_scatter(thetas, B, X)
    return sample_inverse_wishart(N + prior.nu0, scale, rng)


def _gram(X):
    X = np.asarray(X, dtype=float)
    G = X.T @ X
    try:
        L = cholesky(G)
    except NearSingularError:
        empty = [j for j in range(X.shape[1]) if not np.any(X[:, j])]
        detail = f" (no storms in regressor column(s) {empty})" if empty else ""
        raise DesignError(f"sum of x_i x_iᵀ is singular{detail}") from None
    return G, L


def b_conditional_mean(thetas, X):
    X = np.asarray(X, dtype=float)
    G, L = _gram(X)
    thetas = np.asarray(thetas, dtype=float).reshape(X.shape[0], -1)
    # M = (sum theta_i x_iᵀ)(sum x_i x_iᵀ)^-1
    Ginv = np.linalg.inv(G)
    return thetas.T @ X @ Ginv, Ginv


def sample_B(thetas, X, sigma, rng) -> np.ndarray:
    """Matrix-normal draw ``M + L Z Kᵀ`` with ``L Lᵀ = Sigma`` and ``K Kᵀ = (XᵀX)^-1``."""
    M, Ginv = b_conditional_mean(thetas, X)
    p, q = M.shape
    K = np.linalg.cholesky(Ginv)
    try:
        Ls = cholesky(np.atleast_2d(sigma))
    except NearSingularError as exc:
        raise NumericalError(f"Sigma_theta is not SPD ({exc})") from None
    Z = rng.standard_normal((p, q))
    return M + Ls @ Z @ K.T


# ---------------------------------------------------------------------- chains


@dataclass(eq=False)
class PosteriorChain:
    """Retained Gibbs draws (after burn-in)."""

    model_id: int
    storm_ids: list
    regions: list
    X: np.ndarray
    B: np.ndarray          # (G, p, q)
    sigma: np.ndarray      # (G, p, p); zeros for model 3
    theta: np.ndarray      # (G, N, p)
    seed: int
    burn_in: int
    cond_means: np.ndarray | None = field(default=None, repr=False)

    @property
    def G(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.B.shape[2]

    @property
    def mu_theta(self) -> np.ndarray:
        if self.q != 1:
            raise DataError("mu_theta is only defined for a common-mean design")
        return self.B[:, :, 0]

    def config(self) -> dict:
        return {
            "schema": CHAIN_SCHEMA,
            "model_id": self.model_id,
            "seed": self.seed,
            "burn_in": self.burn_in,
            "G": self.G,
            "p": self.p,
            "q": self.q,
            "storm_ids": list(self.storm_ids),
            "regions": list(self.regions),
        }

    def columns(self) -> list[str]:
        p, q = self.p, self.q
        cols = ["iter"]
        cols += [f"B[{r}][{c}]" for r in range(p) for c in range(q)]
        cols += [f"SigmaTheta[{r}][{c}]" for r in range(p) for c in range(r, p)]
        cols += [f"theta[{sid}][t{k + 1}]" for sid in self.storm_ids for k in range(p)]
        return cols

    def to_csv(self, path) -> None:
        """Write the chain CSV plus a JSON config sidecar next to it."""
        path = Path(path)
        p, q = self.p, self.q
        iu = np.triu_indices(p)
        lines = [
            f"# schema={CHAIN_SCHEMA} model={self.model_id} seed={self.seed} burn_in={self.burn_in}",
            ",".join(self.columns()),
        ]
        for g in range(self.G):
            row = [str(self.burn_in + g + 1)]
            row += [repr(float(v)) for v in self.B[g].reshape(p * q)]
            row += [repr(float(v)) for v in self.sigma[g][iu]]
            row += [repr(float(v)) for v in self.theta[g].reshape(-1)]
            lines.append(",".join(row))
        path.write_text("\n".join(lines) + "\n")
        path.with_suffix(".json").write_text(json.dumps(self.config(), indent=1))

    @classmethod
    def from_csv(cls, path) -> "PosteriorChain":
        path = Path(path)
        try:
            cfg = json.loads(path.with_suffix(".json").read_text())
            text = path.read_text().splitlines()
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read chain {path}: {exc}") from None
        if cfg.get("schema") != CHAIN_SCHEMA or not text or not text[0].startswith(f"# schema={CHAIN_SCHEMA}"):
            raise DataError(f"{path}: unsupported chain schema")
        p, q, N = cfg["p"], cfg["q"], len(cfg["storm_ids"])
        data = np.array([[float(v) for v in ln.split(",")] for ln in text[2:] if ln], dtype=float)
        if data.shape[1] != 1 + p * q + p * (p + 1) // 2 + N * p:
            raise DataError(f"{path}: column count does not match the config sidecar")
        G = data.shape[0]
        o = 1
        B = data[:, o:o + p * q].reshape(G, p, q)
        o += p * q
        sigma = np.zeros((G, p, p))
        iu = np.triu_indices(p)
        k = p * (p + 1) // 2
        sigma[:, iu[0], iu[1]] = data[:, o:o + k]
        sigma[:, iu[1], iu[0]] = data[:, o:o + k]
        o += k
        theta = data[:, o:].reshape(G, N, p)
        design = DesignSpec(cfg["model_id"])
        return cls(cfg["model_id"], cfg["storm_ids"], cfg["regions"], design.matrix(cfg["regions"]),
                   B, sigma, theta, cfg["seed"], cfg["burn_in"])


def storm_stream(seed: int, storm_id: str) -> np.random.Generator:
    key = zlib.crc32(str(storm_id).encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, key))))


def hyper_stream(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0,))))


def _batched_theta_draw(theta_hat, H, Sinv, BX, z):
    P = H + Sinv
    b = np.einsum("nij,nj->ni", H, theta_hat) + BX @ Sinv.T
    L = np.linalg.cholesky(P)
    mean = np.linalg.solve(P, b[..., None])[..., 0]
    noise = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    return mean + noise, mean


def gibbs_run(summaries, design=2, prior: HyperPrior | None = None, G=10_000, burn_in=1_000,
              seed=0, fixed_sigma=None, keep_conditional_means=False) -> PosteriorChain:
    """Run the sampler and keep ``G`` draws after ``burn_in``.

    ``design`` is a :class:`DesignSpec` or a model id.  ``prior`` defaults to
    the empirical-Bayes choice.  ``fixed_sigma`` holds Sigma_theta constant
    (its update is skipped), which is useful for checks.
    """
    if not isinstance(design, DesignSpec):
        design = DesignSpec(int(design))
    summaries = sorted(summaries, key=lambda s: s.storm_id)
    if not summaries:
        raise DataError("no storm summaries")
    ids = [s.storm_id for s in summaries]
    if len(set(ids)) != len(ids):
        raise DataError("storm ids must be unique")
    p = summaries[0].p
    if any(s.p != p for s in summaries):
        raise DataError("summaries mix parameter dimensions")
    if design.model_id == 5 and p != 1:
        raise DataError("model 5 expects nonspatial (p = 1) summaries")
    if G < 1 or burn_in < 0:
        raise DataError("G must be positive and burn_in non-negative")

    regions = [s.region for s in summaries]
    X = design.matrix(regions)
    Th = np.array([s.theta_hat for s in summaries])
    Hs = np.array([s.H for s in summaries])
    N = len(summaries)
    hyper = hyper_stream(seed)

    if not design.hierarchical:
        return _common_theta_chain(summaries, X, Th, Hs, G, burn_in, seed, hyper, design.model_id)

    if N < 2 and fixed_sigma is None:
        raise DataError("the hierarchy needs at least two storms unless Sigma_theta is fixed")
    _gram(X)
    if prior is None and fixed_sigma is None:
        prior = empirical_bayes_s0(summaries)

    total = G + burn_in
    Z = np.stack([storm_stream(seed, sid).standard_normal((total, p)) for sid in ids], axis=1)

    theta = Th.copy()
    B, _ = b_conditional_mean(theta, X)
    if fixed_sigma is not None:
        sigma = np.atleast_2d(np.asarray(fixed_sigma, dtype=float))
    else:
        sigma = np.atleast_2d(np.cov(Th, rowvar=False, ddof=1)) if N >= 2 else prior.S0 / prior.nu0
        try:
            cholesky(sigma)
        except NearSingularError:
            sigma = prior.S0 / prior.nu0

    out_B = np.empty((G, p, X.shape[1]))
    out_S = np.empty((G, p, p))
    out_T = np.empty((G, N, p))
    out_M = np.empty((G, N, p)) if keep_conditional_means else None

    for it in range(total):
        try:
            Sinv = np.linalg.inv(sigma)
            theta, cmean = _batched_theta_draw(Th, Hs, Sinv, X @ B.T, Z[it])
            if fixed_sigma is None:
                sigma = sample_sigma_theta(theta, B, X, prior, hyper)
            B = sample_B(theta, X, sigma, hyper)
        except (np.linalg.LinAlgError, NumericalError) as exc:
            raise NumericalError(f"Gibbs iteration {it + 1}: {exc}") from None
        g = it - burn_in
        if g >= 0:
            out_B[g] = B
            out_S[g] = sigma
            out_T[g] = theta
            if out_M is not None:
                out_M[g] = cmean
    return PosteriorChain(design.model_id, ids, regions, X, out_B, out_S, out_T, seed, burn_in, out_M)


def _common_theta_chain(summaries, X, Th, Hs, G, burn_in, seed, rng, model_id):
    # theta_i = mu_theta for all storms: Gaussian posterior with precision sum(H_i)
    P = Hs.sum(axis=0)
    L = cholesky(P)
    b = np.einsum("nij,nj->i", Hs, Th)
    mean = solve_triangular(L.T, solve_triangular(L, b, lower=True), lower=False)
    rng.standard_normal((burn_in, mean.size))  # keep the stream layout of the other models
    z = rng.standard_normal((G, mean.size))
    mu = mean + solve_triangular(L.T, z.T, lower=False).T
    p = mean.size
    N = len(summaries)
    B = mu[:, :, None]
    theta = np.repeat(mu[:, None, :], N, axis=1)
    return PosteriorChain(model_id, [s.storm_id for s in summaries], [s.region for s in summaries],
                          X, B, np.zeros((G, p, p)), theta, seed, burn_in)


def credible_interval(draws, level=0.95, axis=0):
    """Equal-tailed interval of the retained draws."""
    a = (1.0 - level) / 2.0
    return np.quantile(draws, a, axis=axis), np.quantile(draws, 1.0 - a, axis=axis)
