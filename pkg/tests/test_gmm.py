import numpy as np
import pytest
from scipy import stats
from scipy.integrate import trapezoid

from rareflow.errors import DimensionMismatch, EmptyDims, InvalidInput, SingularComponent, TooFewSamples
from rareflow.gmm import (Gmm, GmmConfig, fit_gmm, gmm_conditional, gmm_log_pdf, gmm_marginal, gmm_sample)


def _random_spd(rng, d):
    A = rng.normal(size=(d, d))
    return A @ A.T + 0.5 * np.eye(d)


def _random_gmm(rng, K, d):
    return Gmm(rng.dirichlet(np.ones(K)), rng.normal(0, 2, (K, d)), np.array([_random_spd(rng, d) for _ in range(K)]))


def test_standard_normal_2d_at_origin():
    g = Gmm(np.ones(1), np.zeros((1, 2)), np.eye(2)[None])
    assert gmm_log_pdf(g, np.zeros(2)) == pytest.approx(-np.log(2 * np.pi), abs=1e-14)
    assert gmm_log_pdf(g, np.zeros(2)) == pytest.approx(-1.8379, abs=1e-4)


def test_duplicate_components_equal_single():
    rng = np.random.default_rng(0)
    mu, cov = rng.normal(size=3), _random_spd(rng, 3)
    one = Gmm(np.ones(1), mu[None], cov[None])
    two = Gmm(np.array([0.3, 0.7]), np.array([mu, mu]), np.array([cov, cov]))
    x = rng.normal(size=(10, 3))
    assert np.allclose(gmm_log_pdf(one, x), gmm_log_pdf(two, x), atol=1e-12)


def test_log_pdf_matches_brute_force_sum():
    rng = np.random.default_rng(1)
    g = _random_gmm(rng, 4, 3)
    x = rng.normal(0, 2, (50, 3))
    brute = sum(w * stats.multivariate_normal(m, c).pdf(x) for w, m, c in zip(g.weights, g.means, g.covariances))
    assert np.allclose(np.exp(gmm_log_pdf(g, x)), brute, rtol=1e-10, atol=0)


def test_log_pdf_matches_explicit_inverse():
    rng = np.random.default_rng(2)
    for _ in range(5):
        mu, cov = rng.normal(size=4), _random_spd(rng, 4)
        g = Gmm(np.ones(1), mu[None], cov[None])
        x = rng.normal(size=4)
        d = x - mu
        explicit = -0.5 * d @ np.linalg.inv(cov) @ d - 0.5 * np.log(np.linalg.det(2 * np.pi * cov))
        assert gmm_log_pdf(g, x) == pytest.approx(explicit, abs=1e-9)


def test_log_pdf_finite_far_away():
    g = _random_gmm(np.random.default_rng(3), 3, 2)
    assert np.isfinite(gmm_log_pdf(g, np.array([1e3, -1e3])))


def test_dimension_mismatch():
    g = _random_gmm(np.random.default_rng(4), 2, 3)
    with pytest.raises(DimensionMismatch):
        gmm_log_pdf(g, np.zeros(2))


def test_invalid_parameters():
    with pytest.raises(InvalidInput):
        Gmm(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))
    with pytest.raises(SingularComponent):
        Gmm(np.ones(1), np.zeros((1, 2)), np.zeros((1, 2, 2)))
    with pytest.raises(DimensionMismatch):
        Gmm(np.ones(1), np.zeros((1, 2)), np.eye(3)[None])


def test_degenerate_spread_sampling():
    mu = np.array([1.0, -2.0, 3.0])
    g = Gmm(np.ones(1), mu[None], 1e-12 * np.eye(3)[None])
    x = gmm_sample(g, np.random.default_rng(5), 100)
    assert np.all(np.abs(x - mu) < 1e-5)


def test_sample_mean_clt_bound():
    g = _random_gmm(np.random.default_rng(6), 3, 2)
    n = 100_000
    x = gmm_sample(g, np.random.default_rng(7), n)
    sd = np.sqrt(np.diag(g.covariance()))
    assert np.all(np.abs(x.mean(axis=0) - g.mean()) < 3 * sd / np.sqrt(n))


def test_sampling_is_deterministic():
    g = _random_gmm(np.random.default_rng(8), 3, 2)
    a = gmm_sample(g, np.random.default_rng(9), 50)
    b = gmm_sample(g, np.random.default_rng(9), 50)
    assert np.array_equal(a, b)
    assert gmm_sample(g, np.random.default_rng(9)).shape == (2,)


def test_marginal_all_dims_is_identity():
    g = _random_gmm(np.random.default_rng(10), 3, 3)
    m = gmm_marginal(g, [0, 1, 2])
    assert np.array_equal(m.means, g.means) and np.array_equal(m.covariances, g.covariances)


def test_marginal_standard_normal():
    g = Gmm(np.ones(1), np.zeros((1, 5)), np.eye(5)[None])
    m = gmm_marginal(g, [1])
    assert m.dim == 1
    assert gmm_log_pdf(m, np.array([0.7])) == pytest.approx(stats.norm.logpdf(0.7), abs=1e-14)


def test_marginal_errors():
    g = _random_gmm(np.random.default_rng(11), 2, 3)
    with pytest.raises(EmptyDims):
        gmm_marginal(g, [])
    with pytest.raises(DimensionMismatch):
        gmm_marginal(g, [3])


def test_marginal_matches_histogram():
    rng = np.random.default_rng(12)
    g = _random_gmm(rng, 3, 3)
    m = gmm_marginal(g, [1])
    y = gmm_sample(g, rng, 100_000)[:, 1]
    edges = np.quantile(y, np.linspace(0, 1, 31))
    edges[0], edges[-1] = -np.inf, np.inf
    grid = np.linspace(y.min() - 10, y.max() + 10, 40001)
    cdf = np.concatenate([[0.0], np.cumsum(np.exp(gmm_log_pdf(m, grid[:, None])))[:-1]]) * (grid[1] - grid[0])
    expected_cdf = np.interp(edges, grid, cdf, left=0.0, right=1.0)
    expected = np.diff(expected_cdf) * y.size
    observed = np.histogram(y, edges)[0]
    chi2 = np.sum((observed - expected) ** 2 / expected)
    assert stats.chi2.sf(chi2, df=len(observed) - 1) > 0.01


def test_marginal_matches_integrated_joint():
    g = _random_gmm(np.random.default_rng(13), 3, 2)
    m = gmm_marginal(g, [0])
    sd = np.sqrt(g.covariances[:, 1, 1].max())
    ys = np.linspace(g.means[:, 1].min() - 8 * sd, g.means[:, 1].max() + 8 * sd, 4001)
    for x0 in (-1.0, 0.0, 2.0):
        pts = np.column_stack([np.full_like(ys, x0), ys])
        integral = trapezoid(np.exp(gmm_log_pdf(g, pts)), ys)
        assert np.exp(gmm_log_pdf(m, np.array([x0]))) == pytest.approx(integral, rel=0.01)


def test_conditional_matches_joint_ratio():
    rng = np.random.default_rng(14)
    g = _random_gmm(rng, 3, 3)
    x = rng.normal(size=(6, 3))
    cond = gmm_conditional(g, 2, x[:, :2])
    expected = gmm_log_pdf(g, x) - gmm_log_pdf(gmm_marginal(g, [0, 1]), x[:, :2])
    assert np.allclose(cond.log_pdf(x[:, 2]), expected, atol=1e-10)


def test_conditional_truncated_sampling():
    rng = np.random.default_rng(15)
    g = _random_gmm(rng, 2, 2)
    cond = gmm_conditional(g, 1, np.zeros((1, 1)))
    lo, hi = -1.0, 1.5
    draws = np.array([cond.sample_truncated(rng, lo, hi)[0] for _ in range(5000)])
    assert np.all((draws >= lo) & (draws <= hi))
    grid = np.linspace(lo, hi, 2001)
    pdf = np.exp(cond.log_pdf(grid[:, None])[:, 0] - cond.log_mass(lo, hi)[0])
    assert trapezoid(pdf, grid) == pytest.approx(1.0, abs=1e-4)
    cdf = np.cumsum(pdf) * (grid[1] - grid[0])
    assert stats.kstest(draws, lambda t: np.interp(t, grid, cdf / cdf[-1])).pvalue > 0.01


def _quad_total(g, half_width=8.0, n=801):
    sd = np.sqrt(np.max(np.diagonal(g.covariances, axis1=1, axis2=2), axis=0))
    axes = [np.linspace(g.means[:, d].min() - half_width * sd[d], g.means[:, d].max() + half_width * sd[d], n)
            for d in range(g.dim)]
    if g.dim == 1:
        return trapezoid(np.exp(gmm_log_pdf(g, axes[0][:, None])), axes[0])
    X, Y = np.meshgrid(*axes, indexing="ij")
    f = np.exp(gmm_log_pdf(g, np.column_stack([X.ravel(), Y.ravel()]))).reshape(X.shape)
    return trapezoid(trapezoid(f, axes[1], axis=1), axes[0])


def test_fit_k1_is_closed_form():
    x = np.random.default_rng(16).normal(size=(500, 3)) @ np.array([[1, 0.3, 0], [0, 1, 0.2], [0, 0, 2.0]])
    g = fit_gmm(x, 1, GmmConfig(reg=0.0, restarts=1))
    assert np.allclose(g.means[0], x.mean(axis=0))
    assert np.allclose(g.covariances[0], np.cov(x.T, bias=True), atol=1e-12)
    assert len(g.history) <= 3


def test_fit_recovers_two_component_mixture():
    rng = np.random.default_rng(17)
    x = np.concatenate([rng.normal(-3, 1, 5000), rng.normal(3, 1, 5000)])
    g = fit_gmm(x, 2, GmmConfig(seed=1))
    mus = np.sort(g.means[:, 0])
    assert abs(mus[0] + 3) < 0.1 and abs(mus[1] - 3) < 0.1
    assert _quad_total(g) == pytest.approx(1.0, rel=0.01)


def test_em_is_monotone_and_integrates_to_one():
    rng = np.random.default_rng(18)
    x = np.concatenate([rng.normal([0, 0], [1, 0.5], (3000, 2)), rng.normal([3, 2], [0.7, 1.2], (2000, 2))])
    g = fit_gmm(x, 3, GmmConfig(restarts=2, seed=3))
    assert np.all(np.diff(g.history) >= -1e-9)
    assert _quad_total(g) == pytest.approx(1.0, rel=0.01)


def test_constant_column_without_floor_is_singular():
    x = np.random.default_rng(19).normal(size=(400, 3))
    x[:, 2] = 1.5
    with pytest.raises(SingularComponent):
        fit_gmm(x, 2, GmmConfig(reg=0.0, restarts=1))
    g = fit_gmm(x, 2, GmmConfig(restarts=1))
    assert np.all(np.isfinite(gmm_log_pdf(g, x)))


def test_fit_input_errors():
    with pytest.raises(TooFewSamples):
        fit_gmm(np.zeros((50, 3)), 2)
    with pytest.raises(InvalidInput):
        fit_gmm(np.zeros((50, 1)), 0)


def test_save_load_round_trip(tmp_path):
    g = _random_gmm(np.random.default_rng(20), 3, 4)
    g.save(tmp_path / "g.json")
    back = Gmm.load(tmp_path / "g.json")
    x = np.random.default_rng(21).normal(size=(10, 4))
    assert np.array_equal(gmm_log_pdf(g, x), gmm_log_pdf(back, x))
