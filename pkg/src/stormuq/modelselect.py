"""Laplace-Metropolis estimates of the integrated likelihood.

For a posterior sample of a ``P``-dimensional unconstrained parameter ``psi``,

    log m ~= P/2 log(2 pi) + 1/2 log|Psi| + log L(psi~) + log pi(psi~)

with ``psi~`` the componentwise posterior median and ``Psi`` the sample
covariance of the draws.  For the hierarchy, ``psi`` stacks the storm
parameters, the entries of ``B`` and the log-Cholesky coordinates of
``Sigma_theta``; the likelihood is the reduced one, a product of
``N(theta_hat_i; theta_i, H_i^{-1})`` terms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import invwishart, multivariate_normal

from .covariance import LOG_2PI
from .errors import DataError, NumericalError
from .hier import HyperPrior, PosteriorChain, empirical_bayes_s0


@dataclass(frozen=True)
class ModelEvidence:
    model_id: int
    log_evidence: float
    P: int
    center: np.ndarray
    logdet_cov: float


def laplace_metropolis(samples, loglik_at, log_prior_at, model_id=0) -> ModelEvidence:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    G, P = samples.shape
    if G < 10 * P:
        raise DataError(f"chain of length {G} is too short for {P} parameters (need {10 * P})")
    center = np.median(samples, axis=0)
    cov = np.atleast_2d(np.cov(samples, rowvar=False))
    ev = np.linalg.eigvalsh(cov)
    if not ev[0] > 1e-12 * max(ev[-1], 1e-300):
        raise NumericalError(f"posterior covariance is rank deficient (smallest eigenvalue {ev[0]:.3g})")
    logdet = float(np.sum(np.log(ev)))
    val = 0.5 * P * LOG_2PI + 0.5 * logdet + float(loglik_at(center)) + float(log_prior_at(center))
    return ModelEvidence(model_id, val, P, center, logdet)


# ----------------------------------------------------------- log-Cholesky map


def log_cholesky(S) -> np.ndarray:
    """Row-wise lower triangle of chol(S) with the diagonal logged."""
    L = np.linalg.cholesky(S)
    p = L.shape[0]
    out = L[np.tril_indices(p)].copy()
    d = np.cumsum(np.arange(1, p + 1)) - 1
    out[d] = np.log(out[d])
    return out


def from_log_cholesky(v, p):
    """Inverse of :func:`log_cholesky`; also returns the log-Jacobian of the map."""
    L = np.zeros((p, p))
    L[np.tril_indices(p)] = v
    diag = np.exp(np.diag(L))
    L[np.diag_indices(p)] = diag
    # d Sigma / d(log L_ii, L_ij), rows i = 1..p
    logjac = p * np.log(2.0) + float(np.sum((p - np.arange(1, p + 1) + 2) * np.log(diag)))
    return L @ L.T, logjac


# ------------------------------------------------------------- hierarchy glue


def stack_chain(chain: PosteriorChain) -> np.ndarray:
    G, N, p = chain.theta.shape
    if chain.model_id == 3:
        return chain.B[:, :, 0].copy()
    lc = np.array([log_cholesky(S) for S in chain.sigma])
    return np.hstack([chain.theta.reshape(G, N * p), chain.B.reshape(G, -1), lc])


def reduced_loglik(summaries, thetas) -> float:
    return float(sum(multivariate_normal.logpdf(s.theta_hat, mean=t, cov=np.linalg.inv(s.H))
                     for s, t in zip(summaries, thetas)))


def hierarchy_evidence(chain: PosteriorChain, summaries, prior: HyperPrior | None = None) -> ModelEvidence:
    """Evidence for models 1-3 from a finished chain and its summaries."""
    summaries = sorted(summaries, key=lambda s: s.storm_id)
    if [s.storm_id for s in summaries] != list(chain.storm_ids):
        raise DataError("summaries do not match the storms of the chain")
    N, p, q = len(summaries), chain.p, chain.q
    samples = stack_chain(chain)

    if chain.model_id == 3:
        def loglik(psi):
            return reduced_loglik(summaries, [psi] * N)
        return laplace_metropolis(samples, loglik, lambda psi: 0.0, 3)

    prior = prior or empirical_bayes_s0(summaries)
    X = chain.X

    def unpack(psi):
        th = psi[:N * p].reshape(N, p)
        B = psi[N * p:N * p + p * q].reshape(p, q)
        S, logjac = from_log_cholesky(psi[N * p + p * q:], p)
        return th, B, S, logjac

    def loglik(psi):
        return reduced_loglik(summaries, unpack(psi)[0])

    def logprior(psi):
        th, B, S, logjac = unpack(psi)
        lp = multivariate_normal.logpdf(th - X @ B.T, mean=np.zeros(p), cov=S)
        lp = float(np.sum(lp))
        lp += float(invwishart.logpdf(S if p > 1 else S[0, 0], df=prior.nu0,
                                      scale=prior.S0 if p > 1 else prior.S0[0, 0]))
        return lp + logjac

    return laplace_metropolis(samples, loglik, logprior, chain.model_id)


def write_evidence_table(path, evidences) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "P", "log_evidence"])
        for e in evidences:
            w.writerow([e.model_id, e.P, repr(float(e.log_evidence))])
