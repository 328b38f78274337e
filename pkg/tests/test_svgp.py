import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import log_expit

from oracles import (
    bernoulli_mc,
    dense_gram,
    exact_gp_problem,
    exact_log_marginal,
    exact_posterior,
    kl_gauss_mc,
    optimal_q,
    random_state,
    sigmoid_mc,
)
from stgp.errors import NumericalError
from stgp.kernel import DeepKernelParams
from stgp.svgp import (
    BernoulliLikelihood,
    GaussianLikelihood,
    LatentPosterior,
    VariationalState,
    elbo,
    expected_loglik_bernoulli,
    expected_loglik_gaussian,
    gauss_hermite,
    kl_qp,
    predict_cases,
    predict_hotspot_prob,
    predict_latent,
    q_f_marginals,
    sparse_elbo,
)


def setup(seed=0, n=25, M=7, R=2):
    rng = np.random.default_rng(seed)
    p = DeepKernelParams.init(rng, n_components=R, hidden=(8, 8), amplitude=2.0)
    X = rng.uniform(-1, 1, (n, 3))
    Z = rng.uniform(-1, 1, (M, 3))
    return rng, p, X, Z


# ---------------------------------------------------------------------------
# marginals
# ---------------------------------------------------------------------------


def test_prior_matching_q_gives_prior_marginals():
    _, p, X, Z = setup()
    mean, var = q_f_marginals(X, p, VariationalState.from_prior(Z, p))
    kxx = dense_gram(p, X, X).diagonal() + p.jitter
    assert np.allclose(mean, 0.0) and np.allclose(var, kxx, rtol=1e-8)


def test_collapsed_q_interpolates_at_inducing_points():
    _, p, _, Z = setup(M=5)
    vs = VariationalState.from_prior(Z, p)
    vs.m = np.arange(5.0)
    vs.L = 1e-6 * np.eye(5)
    mean, var = q_f_marginals(Z, p, vs)
    assert np.allclose(mean, vs.m, atol=1e-6)
    assert np.all(var < 1e-6 + 10 * p.jitter)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_marginals_match_dense_covariance(seed):
    rng, p, X, Z = setup(seed)
    vs = random_state(rng, Z, p)
    Kzz = dense_gram(p, Z) + p.jitter * np.eye(len(Z))
    Kxz = dense_gram(p, X, Z)
    Kxx = dense_gram(p, X) + p.jitter * np.eye(len(X))
    A = Kxz @ np.linalg.inv(Kzz)
    cov = Kxx - A @ Kzz @ A.T + A @ vs.S @ A.T
    mean, var = q_f_marginals(X, p, vs)
    assert np.allclose(mean, A @ vs.m, atol=1e-8)
    assert np.allclose(var, np.diag(cov), atol=1e-8)


# ---------------------------------------------------------------------------
# KL
# ---------------------------------------------------------------------------


def test_kl_zero_when_q_equals_prior():
    _, p, _, Z = setup()
    assert abs(kl_qp(VariationalState.from_prior(Z, p), p)) < 1e-10


def test_kl_identity_prior_unit_mean():
    # far-apart inducing points with a tight kernel give K_ZZ = I exactly
    p = DeepKernelParams.init(np.random.default_rng(1), n_components=1, hidden=(4,),
                              spatial_range=0.1, bandwidth=0.01)
    Z = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [0.0, 1.0, -1.0]])
    diag0 = dense_gram(p, Z[:1]).item()
    p.log_amplitude += np.log((1.0 - p.jitter) / diag0)
    K = dense_gram(p, Z) + p.jitter * np.eye(3)
    assert np.allclose(K, np.eye(3), atol=1e-15)
    vs = VariationalState(Z, np.array([1.0, 0.0, 0.0]), np.eye(3))
    assert kl_qp(vs, p) == pytest.approx(0.5, abs=1e-12)


def test_kl_matches_monte_carlo():
    rng, p, _, Z = setup(3, M=5)
    vs = random_state(rng, Z, p)
    K = dense_gram(p, Z) + p.jitter * np.eye(5)
    mc, se = kl_gauss_mc(vs.m, vs.S, K, n=200_000)
    assert abs(kl_qp(vs, p) - mc) <= 3 * se


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_non_negative(seed):
    rng, p, _, Z = setup(seed, M=6)
    assert kl_qp(random_state(rng, Z, p), p) >= -1e-10


def test_zero_diagonal_factor_rejected():
    _, p, _, Z = setup(M=3)
    vs = VariationalState(Z, np.zeros(3), np.diag([1.0, 0.0, 1.0]))
    with pytest.raises(NumericalError):
        kl_qp(vs, p)


# ---------------------------------------------------------------------------
# expected log-likelihoods
# ---------------------------------------------------------------------------


def test_gaussian_perfect_fit():
    assert expected_loglik_gaussian(2.0, 0.5, 1.5, 0.0, 1.0) == pytest.approx(-0.5 * np.log(2 * np.pi))


@given(st.floats(-50, 50), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 4), st.floats(0.1, 3))
def test_gaussian_shift_invariance(c, y, mu, qv, s):
    a = expected_loglik_gaussian(y, mu, 0.3, qv, s)
    b = expected_loglik_gaussian(y + c, mu + c, 0.3, qv, s)
    assert a == pytest.approx(b, rel=1e-9, abs=1e-9)


def test_gaussian_matches_monte_carlo():
    y, mu, qm, qv, s = 1.3, 0.2, -0.4, 2.5, 0.8
    f = qm + np.sqrt(qv) * np.random.default_rng(0).standard_normal(1_000_000)
    v = stats.norm.logpdf(y, mu + f, s)
    assert abs(expected_loglik_gaussian(y, mu, qm, qv, s) - v.mean()) <= 3 * v.std() / 1e3


@pytest.mark.parametrize("order", [1, 5, 20])
def test_bernoulli_point_mass_is_exact(order):
    for m in (-3.0, 0.0, 2.5):
        assert expected_loglik_bernoulli(1, m, 0.0, order) == pytest.approx(log_expit(m), abs=1e-15)
        assert expected_loglik_bernoulli(0, m, 0.0, order) == pytest.approx(log_expit(-m), abs=1e-15)
    assert expected_loglik_bernoulli(1, 0.0, 0.0, order) == pytest.approx(np.log(0.5))


def test_bernoulli_matches_monte_carlo():
    mc, se = bernoulli_mc(1, 1.0, 4.0)
    assert abs(expected_loglik_bernoulli(1, 1.0, 4.0, 20) - mc) <= 3 * se


def test_gauss_hermite_integrates_polynomials():
    x, w = gauss_hermite(20)
    assert w.sum() == pytest.approx(1.0)
    assert w @ x**2 == pytest.approx(0.5)  # E[(X/sqrt 2)^2] for X standard normal
    with pytest.raises(ValueError):
        gauss_hermite(0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(1e-6, 25), st.sampled_from([0.0, 1.0]))
def test_likelihood_gradients_match_finite_differences(qm, qv, h):
    lik = BernoulliLikelihood(20)
    t, m, v = np.array([h]), np.array([qm]), np.array([qv])
    _, dm, dv, _ = lik.expectation(t, m, v, grad=True)
    e = 1e-6
    num_m = (lik.expectation(t, m + e, v) - lik.expectation(t, m - e, v)) / (2 * e)
    ev = min(e, qv / 2)
    num_v = (lik.expectation(t, m, v + ev) - lik.expectation(t, m, v - ev)) / (2 * ev)
    assert dm[0] == pytest.approx(num_m[0], rel=1e-5, abs=1e-7)
    assert dv[0] == pytest.approx(num_v[0], rel=1e-4, abs=1e-6)


# ---------------------------------------------------------------------------
# ELBO against exact GP regression
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def gp_problem():
    p, X, Xs, y, sigma = exact_gp_problem(seed=11, n=80, n_test=10)
    K = dense_gram(p, X) + p.jitter * np.eye(len(X))
    m, S = optimal_q(K, dense_gram(p, X, X), y, sigma**2)
    vs = VariationalState(X.copy(), m, np.linalg.cholesky(S))
    return p, X, Xs, y, sigma, K, vs


def test_elbo_at_optimum_equals_exact_marginal(gp_problem):
    p, X, _, y, sigma, K, vs = gp_problem
    val = elbo(X, y, p, vs, GaussianLikelihood(np.log(sigma)))
    assert val == pytest.approx(exact_log_marginal(K, y, sigma**2), abs=1e-6)


def test_elbo_bounded_by_exact_marginal(gp_problem):
    p, X, _, y, sigma, K, _ = gp_problem
    ref = exact_log_marginal(K, y, sigma**2)
    rng = np.random.default_rng(0)
    for _ in range(10):
        vs = random_state(rng, X, p)
        assert elbo(X, y, p, vs, GaussianLikelihood(np.log(sigma))) <= ref + 1e-8


def test_predictive_matches_exact_regression(gp_problem):
    p, X, Xs, y, sigma, K, vs = gp_problem
    lat = predict_latent(Xs, p, vs)
    kss = dense_gram(p, Xs).diagonal() + p.jitter
    mean, var = exact_posterior(K, dense_gram(p, Xs, X), kss, y, sigma**2)
    assert np.allclose(lat.mean, mean, atol=1e-6)
    assert np.allclose(lat.var, var, atol=1e-6)


def test_full_batch_scale_is_one():
    rng, p, X, Z = setup(4)
    vs = random_state(rng, Z, p)
    y = rng.normal(size=len(X))
    lik = GaussianLikelihood(0.1)
    a = elbo(X, y, p, vs, lik)
    assert a == elbo(X, y, p, vs, lik, n_total=len(X))
    # a half batch rescaled by 2 matches twice its own likelihood sum
    half = elbo(X[:12], y[:12], p, vs, lik, n_total=24, grad=True)
    raw = elbo(X[:12], y[:12], p, vs, lik, grad=True)
    assert half.expected[0] == pytest.approx(2 * raw.expected[0])
    with pytest.raises(ValueError):
        elbo(X[:0], y[:0], p, vs, lik)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def test_predict_at_inducing_points_with_prior_covariance():
    rng, p, _, Z = setup(5, M=6)
    vs = VariationalState.from_prior(Z, p)
    vs.m = rng.normal(size=6)
    lat = predict_latent(Z, p, vs)
    Kzz = dense_gram(p, Z) + p.jitter * np.eye(6)
    assert np.allclose(lat.mean, vs.m, atol=1e-6)
    assert np.allclose(lat.cov, Kzz, atol=1e-6)


def test_vanishing_amplitude_vanishing_prediction():
    rng, p, X, Z = setup(6)
    p.log_amplitude = np.log(1e-12)
    vs = VariationalState.from_prior(Z, p)
    vs.m = 1e-6 * rng.normal(size=len(Z))
    lat = predict_latent(X, p, vs)
    assert np.abs(lat.mean).max() < 1e-5 and np.abs(lat.cov).max() < 1e-5


def test_zero_latent_case_prediction():
    mu = np.array([0.2, -1.0])
    lat = LatentPosterior(np.zeros(2), np.zeros(2))
    pred = predict_cases(None, mu, None, None, 0.7, latent=lat)
    assert np.allclose(pred.mean_std, mu) and np.allclose(pred.var_std, 0.49)
    assert np.allclose(pred.upper_std - pred.lower_std, 2 * 1.96 * 0.7)


@given(st.lists(st.floats(0, 50), min_size=2, max_size=10))
def test_interval_width_monotone_in_latent_variance(vs):
    v = np.sort(np.array(vs))
    pred = predict_cases(None, np.zeros(len(v)), None, None, 0.5,
                         latent=LatentPosterior(np.zeros(len(v)), v))
    assert np.all(np.diff(pred.upper_std - pred.lower_std) >= 0)


def test_case_intervals_cover_synthetic_draws():
    p, X, Xs, _, sigma = exact_gp_problem(seed=12, n=150, n_test=600)
    rng = np.random.default_rng(13)
    A = np.vstack([X, Xs])
    KA = dense_gram(p, A) + p.jitter * np.eye(len(A))
    f = np.linalg.cholesky(KA) @ rng.standard_normal(len(A))
    y = f + sigma * rng.standard_normal(len(A))
    y_tr, y_te = y[:150], y[150:]
    K = KA[:150, :150]
    m, S = optimal_q(K, dense_gram(p, X, X), y_tr, sigma**2)
    vs = VariationalState(X.copy(), m, np.linalg.cholesky(S))
    pred = predict_cases(Xs, np.zeros(len(Xs)), p, vs, sigma)
    cover = np.mean((y_te >= pred.lower_std) & (y_te <= pred.upper_std))
    assert 0.92 <= cover <= 0.98


def test_hotspot_probability_examples():
    lat = LatentPosterior(np.array([0.0, 60.0, -60.0]), np.zeros(3))
    prob = predict_hotspot_prob(None, None, None, latent=lat)
    assert prob[0] == pytest.approx(0.5) and prob[1] == pytest.approx(1.0) and prob[2] < 1e-20
    mc, se = sigmoid_mc(1.0, 4.0)
    val = predict_hotspot_prob(None, None, None, latent=LatentPosterior(np.array([1.0]),
                                                                       np.array([4.0])))
    assert abs(val[0] - mc) <= 3 * se


# ---------------------------------------------------------------------------
# combined terms
# ---------------------------------------------------------------------------


def test_terms_combine_linearly():
    rng, p, X, Z = setup(7)
    vs = random_state(rng, Z, p)
    h = (rng.random(len(X)) < 0.4).astype(float)
    r = rng.normal(size=len(X))
    bl, gl = BernoulliLikelihood(), GaussianLikelihood(0.2)
    both = sparse_elbo(p, vs, X, [(1.0, bl, h), (0.3, gl, r)], kl_weight=1.3)
    a = sparse_elbo(p, vs, X, [(1.0, bl, h)])
    b = sparse_elbo(p, vs, X, [(1.0, gl, r)])
    assert both.value == pytest.approx(a.value + 0.3 * b.value, rel=1e-12)
