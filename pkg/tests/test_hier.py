import numpy as np
import pytest

from stormuq.errors import DataError, DesignError
from stormuq.hier import (
    DesignSpec,
    HyperPrior,
    PosteriorChain,
    b_conditional_mean,
    credible_interval,
    empirical_bayes_s0,
    gibbs_run,
    residual_scatter,
    sample_B,
    sample_inverse_wishart,
    sample_sigma_theta,
    sample_theta_i,
    theta_conditional,
)
from stormuq.mle import StormSummary

REGIONS = ["Atlantic"] * 3 + ["Florida"] * 4 + ["Gulf"] * 4


def summaries(seed=0, regions=REGIONS, B=None, S=None):
    rng = np.random.default_rng(seed)
    B = np.array([[1.0, 0.3, 0.0], [1.0, 0.2, 0.2]]) if B is None else B
    S = np.array([[0.2, 0.05], [0.05, 0.2]]) if S is None else S
    X = DesignSpec(1).matrix(regions)
    out = []
    for i, r in enumerate(regions):
        th = rng.multivariate_normal(B @ X[i], S)
        A = rng.normal(size=(2, 2))
        H = 30 * np.eye(2) + 5 * A @ A.T
        out.append(StormSummary(f"s{i:02d}", r, 100, rng.multivariate_normal(th, np.linalg.inv(H)), H))
    return out


def mc_check(draws, mean, cov, k=3.0):
    """Sample mean and covariance against closed forms within k Monte-Carlo SEs."""
    n = draws.shape[0]
    m = draws.mean(axis=0)
    se_m = draws.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(m - mean) < k * se_m), (m, mean, se_m)
    c = draws - m
    prods = c[:, :, None] * c[:, None, :]
    se_c = prods.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(prods.mean(axis=0) - cov) < k * se_c + 1e-12), (prods.mean(axis=0), cov)


def test_design_vectors():
    d = DesignSpec(1)
    assert d.regressors("Atlantic").tolist() == [1, 0, 0]
    assert d.regressors("Florida").tolist() == [1, 1, 0]
    assert d.regressors("Gulf").tolist() == [1, 0, 1]
    assert DesignSpec(2).regressors("Gulf").tolist() == [1]
    assert not DesignSpec(3).hierarchical
    with pytest.raises(DataError):
        DesignSpec(4)


def test_empirical_bayes_hand_example():
    pts = [(0, 0), (2, 0), (0, 2), (2, 2)]
    ss = [StormSummary(f"s{k}", "Gulf", 5, p, np.eye(2)) for k, p in enumerate(pts)]
    prior = empirical_bayes_s0(ss)
    assert prior.nu0 == 3
    assert np.allclose(prior.S0, 3 * np.array([[4 / 3, 0], [0, 4 / 3]]))


def test_empirical_bayes_rejects_identical_mles():
    ss = [StormSummary(f"s{k}", "Gulf", 5, [1.0, 1.0], np.eye(2)) for k in range(4)]
    with pytest.raises(DataError):
        empirical_bayes_s0(ss)


def test_hyperprior_validation():
    with pytest.raises(DataError):
        HyperPrior(2, np.eye(2))
    with pytest.raises(DataError):
        HyperPrior(3, np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_theta_conditional_limits():
    th, H, B, x = np.array([0.5, 1.5]), np.diag([3.0, 2.0]), np.array([[2.0], [-1.0]]), [1.0]
    m, _ = theta_conditional(th, H, B, x, 1e12 * np.eye(2))
    assert np.allclose(m, th, atol=1e-9)
    m, _ = theta_conditional(th, 1e-12 * H, B, x, np.eye(2))
    assert np.allclose(m, [2.0, -1.0], atol=1e-9)


def test_sample_theta_i_moments():
    rng = np.random.default_rng(1)
    th, H = np.array([0.5, 1.5]), np.array([[3.0, 1.0], [1.0, 2.0]])
    B, x, S = np.array([[2.0, 0.5], [-1.0, 0.1]]), np.array([1.0, 1.0]), np.array([[0.4, 0.1], [0.1, 0.3]])
    mean, cov = theta_conditional(th, H, B, x, S)
    draws = np.array([sample_theta_i(th, H, B, x, S, rng) for _ in range(20_000)])
    mc_check(draws, mean, cov)


def test_inverse_wishart_mean():
    rng = np.random.default_rng(2)
    draws = np.array([sample_inverse_wishart(10, np.eye(2), rng) for _ in range(20_000)])
    flat = draws.reshape(len(draws), 4)
    se = flat.std(axis=0, ddof=1) / np.sqrt(len(flat))
    assert np.all(np.abs(flat.mean(axis=0) - (np.eye(2) / 7).ravel()) < 3 * se)


def test_inverse_wishart_rejects_small_df():
    with pytest.raises(DataError):
        sample_inverse_wishart(0.5, np.eye(2), np.random.default_rng(0))


def test_sigma_prior_only_draws_are_spd():
    rng = np.random.default_rng(3)
    prior = HyperPrior(3, np.array([[0.6, 0.1], [0.1, 0.5]]))
    for _ in range(200):
        S = sample_sigma_theta(np.zeros((0, 2)), np.zeros((2, 1)), np.zeros((0, 1)), prior, rng)
        assert np.all(np.linalg.eigvalsh(S) > 0)


def test_zero_residuals_leave_scale_at_s0():
    X = np.ones((4, 1))
    B = np.array([[0.5], [1.5]])
    th = np.tile([0.5, 1.5], (4, 1))
    assert np.array_equal(residual_scatter(th, B, X), np.zeros((2, 2)))


def test_sample_b_common_mean_moments():
    rng = np.random.default_rng(4)
    th = rng.normal(size=(6, 2))
    X = np.ones((6, 1))
    S = np.array([[0.3, 0.1], [0.1, 0.2]])
    draws = np.array([sample_B(th, X, S, rng)[:, 0] for _ in range(20_000)])
    mc_check(draws, th.mean(axis=0), S / 6)


def test_sample_b_collapses_without_variance():
    rng = np.random.default_rng(5)
    th = rng.normal(size=(11, 2))
    X = DesignSpec(1).matrix(REGIONS)
    M, _ = b_conditional_mean(th, X)
    assert np.allclose(sample_B(th, X, 1e-24 * np.eye(2), rng), M, atol=1e-9)


def test_missing_region_is_a_design_error():
    th = np.zeros((4, 2))
    X = DesignSpec(1).matrix(["Atlantic", "Florida", "Atlantic", "Florida"])
    with pytest.raises(DesignError, match="column"):
        sample_B(th, X, np.eye(2), np.random.default_rng(0))
    ss = summaries(regions=["Atlantic", "Florida"] * 3)
    with pytest.raises(DesignError):
        gibbs_run(ss, 1, G=10, burn_in=0)


def test_single_storm_without_pooling():
    H = np.array([[5.0, 1.0], [1.0, 3.0]])
    s = StormSummary("only", "Gulf", 20, [0.4, -0.2], H)
    chain = gibbs_run([s], 2, G=20_000, burn_in=0, seed=1, fixed_sigma=1e8 * np.eye(2))
    mc_check(chain.theta[:, 0, :], s.theta_hat, np.linalg.inv(H), k=4.0)


def test_chain_shapes_and_spd_draws():
    chain = gibbs_run(summaries(), 1, G=500, burn_in=50, seed=3)
    assert chain.B.shape == (500, 2, 3) and chain.theta.shape == (500, 11, 2)
    assert chain.G == 500
    for S in chain.sigma:
        np.linalg.cholesky(S)


def test_conditional_mean_identity_every_iteration():
    ss = summaries(1)
    chain = gibbs_run(ss, 1, G=40, burn_in=0, seed=2, keep_conditional_means=True)
    X = chain.X
    for g in range(1, chain.G):
        # theta at g was drawn given B and Sigma from iteration g - 1
        for i, s in enumerate(ss):
            m, _ = theta_conditional(s.theta_hat, s.H, chain.B[g - 1], X[i], chain.sigma[g - 1])
            assert np.allclose(chain.cond_means[g, i], m, rtol=1e-10, atol=1e-12)


def test_determinism_and_permutation_invariance():
    ss = summaries(2)
    a = gibbs_run(ss, 2, G=300, burn_in=20, seed=7)
    b = gibbs_run(ss, 2, G=300, burn_in=20, seed=7)
    c = gibbs_run(ss[::-1], 2, G=300, burn_in=20, seed=7)
    for other in (b, c):
        assert np.array_equal(a.B, other.B)
        assert np.array_equal(a.sigma, other.sigma)
        assert np.array_equal(a.theta, other.theta)
    d = gibbs_run(ss, 2, G=300, burn_in=20, seed=8)
    assert not np.array_equal(a.B, d.B)


def test_model3_is_the_pooled_gaussian():
    ss = summaries(3)
    chain = gibbs_run(ss, 3, G=20_000, burn_in=0, seed=4)
    P = sum(s.H for s in ss)
    mean = np.linalg.solve(P, sum(s.H @ s.theta_hat for s in ss))
    mc_check(chain.mu_theta, mean, np.linalg.inv(P))
    assert np.all(chain.sigma == 0)
    assert np.array_equal(chain.theta[:, 0], chain.theta[:, -1])


def test_mu_theta_needs_common_mean():
    chain = gibbs_run(summaries(), 1, G=20, burn_in=0)
    with pytest.raises(DataError):
        chain.mu_theta


def test_nonspatial_hierarchy():
    rng = np.random.default_rng(6)
    ss = [StormSummary(f"n{i}", r, 50, [rng.normal(1.0, 0.4)], [[25.0]], "nonspatial")
          for i, r in enumerate(REGIONS)]
    chain = gibbs_run(ss, 5, G=200, burn_in=10)
    assert chain.B.shape == (200, 1, 3) and chain.sigma.shape == (200, 1, 1)
    with pytest.raises(DataError):
        gibbs_run(summaries(), 5, G=10)


def test_csv_round_trip(tmp_path):
    chain = gibbs_run(summaries(), 1, G=30, burn_in=5, seed=9)
    chain.to_csv(tmp_path / "c.csv")
    text = (tmp_path / "c.csv").read_text().splitlines()
    assert text[0] == "# schema=chain/1 model=1 seed=9 burn_in=5"
    assert text[1].split(",")[:2] == ["iter", "B[0][0]"]
    assert "SigmaTheta[0][1]" in text[1] and "theta[s00][t2]" in text[1]
    back = PosteriorChain.from_csv(tmp_path / "c.csv")
    assert np.array_equal(back.B, chain.B)
    assert np.array_equal(back.sigma, chain.sigma)
    assert np.array_equal(back.theta, chain.theta)
    assert back.storm_ids == chain.storm_ids


def test_equal_tailed_interval():
    lo, hi = credible_interval(np.arange(1001.0))
    assert np.isclose(lo, 25.0) and np.isclose(hi, 975.0)
