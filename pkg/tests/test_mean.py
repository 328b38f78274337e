import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgp.data import CountyId, CovariateTensor, PanelDataset
from stgp.errors import DataError
from stgp.mean import CovariateWeights, compute_mu, fit_omega, neighborhood_features


def panel_with(I, T, adjacency=()):
    counties = tuple(CountyId(f"{k:05d}", 0.0, 0.0) for k in range(I))
    z = np.zeros((I, T))
    return PanelDataset(counties, z, z, z.astype(int), np.zeros((I, T, 6)), frozenset(adjacency))


def covariates(eta, d=1):
    eta = np.asarray(eta, float)
    mask = np.ones(eta.shape[:2], bool)
    mask[:, :d] = False
    eta = eta.copy()
    eta[~mask] = np.nan
    L = eta.shape[2]
    return CovariateTensor(eta, mask, d, np.zeros(L), np.ones(L))


def test_isolated_county_single_term():
    cov = covariates(np.full((1, 2, 1), 5.0))
    mu = compute_mu(panel_with(1, 2), cov, [0.2])
    assert mu[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert np.isnan(mu[0, 0])


def test_zero_weights_give_zero_mean():
    cov = covariates(np.random.default_rng(0).normal(size=(4, 5, 3)))
    mu = compute_mu(panel_with(4, 5), cov, np.zeros(3))
    assert np.all(mu[:, 1:] == 0.0)


def test_neighbourhood_average():
    eta = np.zeros((3, 2, 1))
    eta[1, :, 0], eta[2, :, 0] = 2.0, 4.0
    p = panel_with(3, 2, [(0, 1), (1, 0), (0, 2), (2, 0)])
    assert compute_mu(p, covariates(eta), [1.0])[0, 1] == pytest.approx(2.0)


def test_masked_cell_request_raises():
    cov = covariates(np.ones((2, 3, 1)))
    with pytest.raises(DataError):
        compute_mu(panel_with(2, 3), cov, [1.0], cells=([0], [0]))
    assert compute_mu(panel_with(2, 3), cov, [1.0], cells=([0, 1], [1, 2])).tolist() == [1.0, 1.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_mu_is_linear_in_weights(seed):
    rng = np.random.default_rng(seed)
    I, T, L = 5, 4, 3
    edges = {(0, 1), (1, 0), (2, 3), (3, 2), (3, 4), (4, 3)}
    p, cov = panel_with(I, T, edges), covariates(rng.normal(size=(I, T, L)))
    w1, w2, a = rng.normal(size=L), rng.normal(size=L), rng.normal()
    lhs = compute_mu(p, cov, a * w1 + w2)
    rhs = a * compute_mu(p, cov, w1) + compute_mu(p, cov, w2)
    assert np.allclose(lhs[:, 1:], rhs[:, 1:], atol=1e-12)


def test_noise_free_linear_panel_recovers_weights():
    rng = np.random.default_rng(1)
    I, T, L = 6, 12, 4
    edges = {(0, 1), (1, 0), (1, 2), (2, 1), (4, 5), (5, 4)}
    p, cov = panel_with(I, T, edges), covariates(rng.normal(size=(I, T, L)))
    omega = rng.normal(size=L)
    y = np.nan_to_num(neighborhood_features(p, cov) @ omega)
    assert np.allclose(fit_omega(p, cov, y, ridge=0.0).omega, omega, atol=1e-8, rtol=0)


def test_large_ridge_shrinks_to_zero():
    rng = np.random.default_rng(2)
    p, cov = panel_with(4, 10), covariates(rng.normal(size=(4, 10, 3)))
    y = rng.normal(size=(4, 10))
    assert np.abs(fit_omega(p, cov, y, ridge=1e12).omega).max() < 1e-9


def test_duplicate_rows_do_not_change_solution():
    rng = np.random.default_rng(3)
    I, T, L = 3, 8, 2
    eta = rng.normal(size=(I, T, L))
    y = rng.normal(size=(I, T))
    p, cov = panel_with(I, T), covariates(eta)
    w = fit_omega(p, cov, y, ridge=0.0).omega
    # duplicating every county doubles each normal-equation row
    p2 = panel_with(2 * I, T)
    cov2 = covariates(np.concatenate([eta, eta]))
    w2 = fit_omega(p2, cov2, np.concatenate([y, y]), ridge=0.0).omega
    assert np.allclose(w, w2, atol=1e-12)


def test_weeks_restrict_fit_and_errors():
    rng = np.random.default_rng(4)
    p, cov = panel_with(3, 6), covariates(rng.normal(size=(3, 6, 2)))
    y = rng.normal(size=(3, 6))
    y_poison = y.copy()
    y_poison[:, 5] = 1e6
    assert np.allclose(fit_omega(p, cov, y, weeks=range(5)).omega,
                       fit_omega(p, cov, y_poison, weeks=range(5)).omega)
    with pytest.raises(ValueError):
        fit_omega(p, cov, y, ridge=-1)
    with pytest.raises(ValueError):
        CovariateWeights([np.nan])
