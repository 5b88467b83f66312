import warnings

import numpy as np
import pytest

from conftest import tiny_grid
from stormuq.bias import (
    MeanField,
    em_bias_loop,
    empirical_mu,
    posterior_mu,
    standardized_error_map,
)
from stormuq.covariance import exp_cov
from stormuq.errors import ConvergenceWarning, DataError
from stormuq.grid import ErrorField, build_buffer, domain_indices
from stormuq.mle import StormSummary

THETA = np.array([0.8, 0.3])


def toy_fields(centres, seed=0, ncols=9, nrows=7, radius=1.6, thetas=None):
    grid = tiny_grid(ncols, nrows, np.zeros(ncols * nrows))
    land = grid.with_values(np.ones(ncols * nrows))
    rng = np.random.default_rng(seed)
    out = []
    for k, c in enumerate(centres):
        b = build_buffer(grid, land, c, c, radius)
        loc = grid.cell_centers(b.member_indices)
        t = THETA if thetas is None else thetas[k]
        D = np.hypot(*(loc[:, None] - loc[None]).transpose(2, 0, 1))
        y = np.linalg.cholesky(exp_cov(D, t)) @ rng.standard_normal(b.n) + 0.5
        out.append(ErrorField(y, loc, b, "Gulf", f"s{k}", grid))
    return out


def summaries_for(fields, thetas=None):
    return [StormSummary(ef.storm_id, ef.region_label, ef.n,
                         THETA if thetas is None else thetas[k], np.eye(2))
            for k, ef in enumerate(fields)]


def dense_oracle(fields, thetas, prior=None):
    dom = domain_indices([ef.buffer for ef in fields])
    P = np.zeros((dom.size, dom.size)) if prior is None else prior.copy()
    b = np.zeros(dom.size)
    for ef, t in zip(fields, thetas):
        A = np.zeros((ef.n, dom.size))
        A[np.arange(ef.n), np.searchsorted(dom, ef.buffer.member_indices)] = 1.0
        Si = np.linalg.inv(exp_cov(ef.distances(), t))
        P += A.T @ Si @ A
        b += A.T @ Si @ ef.y
    C = np.linalg.inv(P)
    return C @ b, np.sqrt(np.diag(C))


def test_empirical_single_storm():
    (ef,) = toy_fields([(3.0, 3.0)])
    mf = empirical_mu([ef])
    assert np.array_equal(mf.m_mu, ef.y)
    assert np.all(mf.n_contrib == 1)


def test_empirical_two_storms_average_at_shared_points():
    a, b = toy_fields([(3.0, 3.0), (4.5, 3.0)])
    mf = empirical_mu([a, b])
    shared = np.intersect1d(a.buffer.member_indices, b.buffer.member_indices)
    k = shared[0]
    ya = a.y[np.searchsorted(a.buffer.member_indices, k)]
    yb = b.y[np.searchsorted(b.buffer.member_indices, k)]
    assert mf.m_mu[np.searchsorted(mf.domain_indices, k)] == (ya + yb) / 2


def test_empirical_matches_loop_oracle_and_is_order_free():
    fields = toy_fields([(2.0, 2.0), (3.0, 4.0), (5.0, 3.0), (6.5, 5.0), (4.0, 2.5)], seed=1)
    mf = empirical_mu(fields)
    for j, cell in enumerate(mf.domain_indices):
        vals = [ef.y[list(ef.buffer.member_indices).index(cell)]
                for ef in fields if cell in ef.buffer.member_indices]
        assert mf.n_contrib[j] == len(vals)
        assert np.isclose(mf.m_mu[j], sum(vals) / len(vals), rtol=0, atol=1e-15)
    rev = empirical_mu(fields[::-1])
    assert np.allclose(rev.m_mu, mf.m_mu, rtol=0, atol=1e-15)


def test_flat_prior_single_storm_returns_the_field():
    (ef,) = toy_fields([(3.0, 3.0)])
    mf = posterior_mu([ef], summaries_for([ef]))
    assert np.allclose(mf.m_mu, ef.y, rtol=0, atol=1e-10)


def test_flat_prior_disjoint_storms_return_each_field():
    fields = toy_fields([(1.5, 1.5), (7.0, 5.0)], radius=1.2)
    assert not np.intersect1d(*[ef.buffer.member_indices for ef in fields]).size
    mf = posterior_mu(fields, summaries_for(fields))
    for ef in fields:
        assert np.allclose(mf.on_buffer(ef), ef.y, rtol=0, atol=1e-10)


def test_two_storm_dense_oracle():
    thetas = [np.array([0.8, 0.3]), np.array([0.2, -0.1])]
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5)], seed=2, thetas=thetas)
    mf = posterior_mu(fields, summaries_for(fields, thetas))
    m, sd = dense_oracle(fields, thetas)
    assert mf.m_mu.size <= 30
    assert np.allclose(mf.m_mu, m, rtol=0, atol=1e-10)
    assert np.allclose(mf.sd_mu, sd, rtol=0, atol=1e-10)


def test_informative_prior_dense_oracle():
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5)], seed=3)
    dom = domain_indices([ef.buffer for ef in fields])
    loc = fields[0].grid.cell_centers(dom)
    D = np.hypot(*(loc[:, None] - loc[None]).transpose(2, 0, 1))
    C_inv = np.linalg.inv(exp_cov(D, (0.0, 0.0)))
    mf = posterior_mu(fields, summaries_for(fields), prior_precision=C_inv)
    m, sd = dense_oracle(fields, [THETA, THETA], prior=C_inv)
    assert np.allclose(mf.m_mu, m, atol=1e-10) and np.allclose(mf.sd_mu, sd, atol=1e-10)


def test_adding_a_storm_never_raises_the_sd():
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5), (4.0, 2.0)], seed=4)
    two = posterior_mu(fields[:2], summaries_for(fields[:2]))
    three = posterior_mu(fields, summaries_for(fields))
    pos = np.searchsorted(three.domain_indices, two.domain_indices)
    assert np.all(three.sd_mu[pos] <= two.sd_mu + 1e-12)


def test_missing_summary():
    fields = toy_fields([(3.0, 3.0)])
    with pytest.raises(DataError):
        posterior_mu(fields, [])


def test_em_flat_prior_disjoint_converges_in_one_pass():
    fields = toy_fields([(1.5, 1.5), (7.0, 5.0)], radius=1.2)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        mf, summ, info = em_bias_loop(fields)
    assert info.converged and info.iterations == 1
    # the adjusted fields are zero, so every storm keeps its previous estimate
    assert info.fallbacks[0] == ("s0", "s1")


def test_em_zero_fields():
    fields = [ef.with_values(np.zeros(ef.n)) for ef in toy_fields([(3.0, 3.0), (4.5, 3.5)])]
    mf, summ, info = em_bias_loop(fields)
    assert np.all(mf.m_mu == 0)
    assert info.converged
    assert all(np.array_equal(s.theta_hat, [0.0, 0.0]) for s in summ)


def test_em_informative_prior_deltas_shrink():
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5), (4.0, 2.0)], seed=5)
    dom = domain_indices([ef.buffer for ef in fields])
    loc = fields[0].grid.cell_centers(dom)
    D = np.hypot(*(loc[:, None] - loc[None]).transpose(2, 0, 1))
    C_inv = np.linalg.inv(exp_cov(D, (0.5, 0.0)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, _, info = em_bias_loop(fields, max_iters=8, tol=1e-14, prior_precision=C_inv)
    d = np.array(info.deltas)
    assert np.all(np.diff(d[:4]) < 0)


def test_em_warns_when_not_converged():
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5)], seed=6)
    with pytest.warns(ConvergenceWarning):
        _, _, info = em_bias_loop(fields, max_iters=1, tol=0.0)
    assert not info.converged


def _mf(m, sd):
    grid = tiny_grid(3, 1, np.zeros(3))
    return MeanField(np.asarray(m, float), np.asarray(sd, float), np.array([1, 1, 0]), np.arange(3), grid)


def test_standardized_map():
    z = standardized_error_map(_mf([2.0, 0.0, 5.0], [1.0, 3.0, np.nan]))
    assert z.values[:2].tolist() == [2.0, 0.0]
    assert z.values[2] == z.nodata
    with pytest.raises(DataError):
        standardized_error_map(_mf([1.0, 1.0, 0.0], [0.0, 1.0, 1.0]))


def test_standardized_map_elementwise_oracle(rng):
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5)], seed=7)
    mf = posterior_mu(fields, summaries_for(fields))
    z = standardized_error_map(mf)
    assert np.allclose(z.values[mf.domain_indices], mf.m_mu / mf.sd_mu, rtol=1e-15)


def test_mean_field_rasters_share_the_header():
    fields = toy_fields([(3.0, 3.0), (4.5, 3.5)], seed=8)
    grids = posterior_mu(fields, summaries_for(fields)).to_rasters()
    assert set(grids) == {"mean", "sd", "count"}
    assert all(g.same_grid(fields[0].grid) for g in grids.values())
    uncovered = np.setdiff1d(np.arange(fields[0].grid.size), domain_indices([f.buffer for f in fields]))
    assert np.all(grids["count"].values[uncovered] == grids["count"].nodata)
