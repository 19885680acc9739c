import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from skyseg import generative as gen


def _blobs(rng, n=400, sep=5.0, d=2, cov=None):
    cov = np.eye(d) if cov is None else cov
    a = rng.multivariate_normal(np.zeros(d), cov, n)
    b = rng.multivariate_normal(np.r_[sep, np.zeros(d - 1)], cov, n)
    return np.vstack([a, b]), np.r_[np.zeros(n, int), np.ones(n, int)]


def test_gaussian_logpdf_matches_scipy(rng):
    x = rng.normal(size=(50, 3))
    a = rng.normal(size=(3, 3))
    cov = a @ a.T + np.eye(3)
    mean = rng.normal(size=3)
    assert np.allclose(gen.gaussian_logpdf(x, mean, cov), stats.multivariate_normal(mean, cov).logpdf(x))


def test_gda_separable_blobs(rng):
    x, y = _blobs(rng)
    m = gen.fit_gda(x, y, 0.0)
    assert np.mean(gen.decide(m.posterior(x)) == y) >= 0.99


def test_gda_posteriors_sum_to_one(rng):
    x, y = _blobs(rng, sep=1.0)
    m = gen.fit_gda(x, y, 0.5)
    grid = rng.uniform(-5, 6, (500, 2))
    p = m.class_posteriors(grid)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_gda_uniform_prior_and_regularization(rng):
    x, y = _blobs(rng, n=100)
    x, y = x[:150], y[:150]  # unbalanced: 100 clear, 50 cloud
    m = gen.fit_gda(x, y, 2.0)
    assert all(c.prior == 0.5 for c in m.classes)
    s1 = np.cov(x[y == 1].T, bias=True)
    assert np.allclose(m.classes[1].cov, s1 + 2.0 * np.eye(2))
    assert np.all(np.linalg.eigvalsh(m.classes[1].cov) >= 2.0 - 1e-12)


def test_gda_equal_covariances_bisector():
    # closed form: with equal covariance and priors the boundary is the bisector of the means
    c = gen.GaussianClass(np.array([0.0, 0.0]), np.eye(2), 0.5)
    d = gen.GaussianClass(np.array([4.0, 2.0]), np.eye(2), 0.5)
    m = gen.GaussianClassifier("gda", (c, d), 0.0)
    mid = np.array([[2.0, 1.0]])
    assert m.posterior(mid)[0] == pytest.approx(0.5, abs=1e-12)
    t = np.array([[-2.0, 4.0]]) * 0.3 + mid  # moves along the bisector
    assert m.posterior(t)[0] == pytest.approx(0.5, abs=1e-12)


def test_gda_large_gamma_is_nearest_mean(rng):
    x, y = _blobs(rng, sep=2.0, cov=np.array([[3.0, 1.0], [1.0, 0.5]]))
    m = gen.fit_gda(x, y, 1e8)
    mu0, mu1 = x[y == 0].mean(0), x[y == 1].mean(0)
    grid = rng.uniform(-4, 6, (2000, 2))
    d0 = np.sum((grid - mu0) ** 2, axis=1)
    d1 = np.sum((grid - mu1) ** 2, axis=1)
    pred = gen.decide(m.posterior(grid))
    assert np.mean(pred == (d1 < d0)) > 0.99
    # exact limit: log det(S + gamma I) ~ d log gamma + tr(S) / gamma shifts the bisector
    tr0, tr1 = (np.trace(np.cov(x[y == k].T, bias=True)) for k in (0, 1))
    assert np.mean(pred == (d1 + tr1 < d0 + tr0)) > 0.999


def test_gda_class_too_small():
    x = np.array([[0.0], [1.0], [2.0]])
    with pytest.raises(gen.FitError):
        gen.fit_gda(x, np.array([0, 0, 1]))


def test_nbc_equals_gda_on_axis_aligned_data(rng):
    cov = np.diag([1.0, 4.0])
    x, y = _blobs(rng, n=200_000, sep=2.0, cov=cov)
    pn = gen.fit_nbc(x, y).posterior(x[:500])
    pg = gen.fit_gda(x, y).posterior(x[:500])
    assert np.max(np.abs(pn - pg)) < 2e-2  # sampling noise in the off-diagonal only
    # exact statement: GDA with truly diagonal class covariances equals NBC
    classes = tuple(gen.GaussianClass(np.array([m, 0.0]), cov, 0.5) for m in (0.0, 2.0))
    g = gen.GaussianClassifier("gda", classes, 0.0)
    n = gen.GaussianClassifier("nbc", classes, 0.0)
    assert np.allclose(g.posterior(x[:500]), n.posterior(x[:500]), atol=1e-6)


def test_nbc_and_gda_disagree_on_correlated_data(rng):
    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    x = np.vstack([rng.multivariate_normal([0, 0], cov, 500), rng.multivariate_normal([1, -1], cov, 500)])
    y = np.r_[np.zeros(500, int), np.ones(500, int)]
    grid = np.stack(np.meshgrid(np.linspace(-3, 4, 40), np.linspace(-4, 3, 40)), -1).reshape(-1, 2)
    a = gen.decide(gen.fit_nbc(x, y).posterior(grid))
    b = gen.decide(gen.fit_gda(x, y).posterior(grid))
    assert np.any(a != b)


def test_nbc_single_feature_equals_gda(rng):
    x = rng.normal(size=(300, 1))
    y = (x[:, 0] + rng.normal(0, 0.5, 300) > 0).astype(int)
    nbc, gda = gen.fit_nbc(x, y, 0.1), gen.fit_gda(x, y, 0.1)
    for a, b in zip(nbc.classes, gda.classes):
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)
    assert np.allclose(nbc.posterior(x), gda.posterior(x), rtol=0, atol=1e-14)


def test_decide_rule():
    assert gen.decide(np.array([0.5]), 1.0)[0] == 1  # tie predicts cloud
    assert not gen.decide(np.array([1.0, 0.9]), 0.0).any()
    assert gen.decide(np.array([0.3]), 2.0)[0] == 1


def test_kmeans_two_points():
    m = gen.fit_kmeans(np.array([[0.0, 0.0], [3.0, 4.0]]), 2, seed=0)
    assert sorted(map(tuple, m.centroids)) == [(0.0, 0.0), (3.0, 4.0)]
    assert m.inertia_trace[-1] == 0.0


def test_kmeans_inertia_monotone_many_seeds():
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = r.normal(size=(200, 3)) + r.integers(0, 2, (200, 1)) * r.uniform(0, 4)
        tr = np.array(gen.fit_kmeans(x, 2, seed=seed).inertia_trace)
        assert np.all(np.diff(tr) <= 1e-9 * max(1.0, tr[0]))


def test_kmeans_empty_cluster_reseeded():
    x = np.array([[0.0], [0.1], [0.2], [10.0]])
    m = gen.fit_kmeans(x, 2, init=np.array([[0.1], [100.0]]))
    assert len(set(m.assign(x))) == 2


def test_gmm_em_monotone_many_seeds():
    for seed in range(100):
        r = np.random.default_rng(seed)
        d = int(r.integers(1, 4))
        x = r.normal(size=(150, d)) * r.uniform(0.2, 3, d) + r.integers(0, 2, (150, 1)) * r.uniform(-3, 3, d)
        gamma = float(r.choice([0.0, 0.01, 1.0]))
        tr = np.array(gen.fit_gmm(x, 2, gamma, seed=seed).loglik_trace)
        assert np.all(np.diff(tr) >= -1e-9 * max(1.0, abs(tr[0])))


def test_gmm_recovers_means(rng):
    x = np.vstack([rng.normal(0, 1, (2000, 2)), rng.normal([6, 0], 1, (2000, 2))])
    m = gen.fit_gmm(x, 2, 0.0, seed=1)
    means = sorted(c.mean[0] for c in m.components)
    assert means[0] == pytest.approx(0.0, abs=0.1) and means[1] == pytest.approx(6.0, abs=0.1)
    assert m.converged


def test_gmm_regularized_covariance_floor(rng):
    x = np.vstack([rng.normal(0, 0.01, (50, 2)), rng.normal(5, 0.01, (50, 2))])
    m = gen.fit_gmm(x, 2, 1.0, seed=0)
    for c in m.components:
        assert np.all(np.linalg.eigvalsh(c.cov) >= 1.0 - 1e-9)


def test_kmeans_matches_gmm_hard_assignment(rng):
    x = np.vstack([rng.normal(0, 0.5, (300, 2)), rng.normal([5, 5], 0.5, (300, 2))])
    a = gen.fit_kmeans(x, 2, seed=3).assign(x)
    b = gen.fit_gmm(x, 2, 0.0, seed=3).assign(x)
    assert np.array_equal(a, b) or np.array_equal(a, 1 - b)


def test_map_clusters_rules():
    assign = np.array([0, 0, 1, 1, 1])
    assert list(gen.map_clusters(assign, labels=np.array([1, 1, 0, 0, 1]))) == [1, 0]
    # without labels: the warmer cluster (higher reference) is cloud
    assert list(gen.map_clusters(assign, reference=np.array([5.0, 6.0, 0.0, 1.0, 0.5]))) == [1, 0]
    assert list(gen.map_clusters(assign, reference=np.array([0.0, 1.0, 5.0, 6.0, 5.5]))) == [0, 1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.0, 2.0))
def test_decide_monotone_in_lambda(seed, lam):
    p = np.random.default_rng(seed).uniform(size=100)
    assert np.all(gen.decide(p, lam) <= gen.decide(p, lam + 0.1))
