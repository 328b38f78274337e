"""Sparse variational GP core.

Inducing values ``u = f(Z)`` carry a Gaussian ``q(u) = N(m, L L^T)``. With
``A = K_XZ K_ZZ^{-1}`` the marginal of each latent value is

    q(f_n) = N(a_n^T m, k(x_n, x_n) + a_n^T (S - K_ZZ) a_n)

and the evidence lower bound is the (rescaled) sum of per-point expected
log-likelihoods minus ``KL[q(u) || p(u)]``. Only per-point marginal variances
are formed, so one evaluation costs O(n M^2).

:func:`sparse_elbo` is the single engine behind everything here; with
``grad=True`` it runs the reverse pass down to the kernel parameters, the
inducing inputs, ``m`` and ``L``, and also reports ``dELBO/dS`` for the
natural-gradient update.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .errors import NumericalError
from .kernel import gram_backward, gram_forward

__all__ = [
    "VariationalState",
    "LatentPosterior",
    "GaussianLikelihood",
    "BernoulliLikelihood",
    "ELBOResult",
    "gauss_hermite",
    "q_f_marginals",
    "kl_qp",
    "expected_loglik_gaussian",
    "expected_loglik_bernoulli",
    "sparse_elbo",
    "elbo",
    "predict_latent",
    "predict_cases",
    "predict_hotspot_prob",
    "CasePrediction",
]

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12


def _cholesky(K, what="K_ZZ"):
    try:
        return linalg.cholesky(K, lower=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"Cholesky factorization of {what} failed; increase the kernel jitter"
        ) from exc


@dataclass
class VariationalState:
    """Inducing inputs ``Z`` (rescaled coords), mean ``m`` and factor ``L`` of ``S``."""

    Z: np.ndarray
    m: np.ndarray
    L: np.ndarray

    @property
    def S(self):
        return self.L @ self.L.T

    @property
    def M(self):
        return len(self.m)

    @classmethod
    def from_prior(cls, Z, params):
        """``m = 0``, ``S = K_ZZ`` so the KL term starts at zero."""
        Z = np.asarray(Z, dtype=float)
        Kzz, _ = gram_forward(params, Z)
        Kzz = Kzz + params.jitter * np.eye(len(Z))
        return cls(Z.copy(), np.zeros(len(Z)), _cholesky(Kzz))

    def copy(self):
        return VariationalState(self.Z.copy(), self.m.copy(), self.L.copy())

    def to_dict(self):
        return {"Z": self.Z.tolist(), "m": self.m.tolist(), "L": self.L.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["Z"], float), np.asarray(d["m"], float),
                   np.asarray(d["L"], float))


@dataclass
class LatentPosterior:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Likelihoods
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def gauss_hermite(order):
    """Nodes and weights for ``E[g(X)], X ~ N(m, v)`` as ``sum w g(m + sqrt(2v) x)``."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    x, w = np.polynomial.hermite.hermgauss(order)
    return x, w / np.sqrt(np.pi)


def expected_loglik_gaussian(y_std, mu, q_mean, q_var, sigma):
    """``E_q[log N(y | mu + f, sigma^2)]`` for ``f ~ N(q_mean, q_var)``, elementwise."""
    r = np.asarray(y_std, float) - np.asarray(mu, float) - np.asarray(q_mean, float)
    return -0.5 * np.log(2 * np.pi * sigma**2) - (r * r + np.asarray(q_var, float)) / (2 * sigma**2)


def expected_loglik_bernoulli(h, q_mean, q_var, order=20):
    """Gauss-Hermite estimate of ``E_q[log Bernoulli(h | sigmoid(f))]``, elementwise."""
    x, w = gauss_hermite(order)
    h = np.asarray(h, float)[..., None]
    f = np.asarray(q_mean, float)[..., None] + np.sqrt(2.0 * np.asarray(q_var, float))[..., None] * x
    ll = h * log_expit(f) + (1.0 - h) * log_expit(-f)
    return ll @ w


@dataclass
class GaussianLikelihood:
    """Case likelihood; the target passed in is ``y_std - mu``."""

    log_sigma: float = 0.0

    @property
    def sigma(self):
        return float(np.exp(self.log_sigma))

    def expectation(self, target, qm, qv, grad=False):
        s2 = self.sigma**2
        r = target - qm
        sq = r * r + qv
        vals = -0.5 * np.log(2 * np.pi * s2) - sq / (2 * s2)
        if not grad:
            return vals
        return vals, r / s2, np.full_like(qv, -0.5 / s2), -1.0 + sq / s2


@dataclass
class BernoulliLikelihood:
    """Hotspot likelihood with logistic link, integrated by Gauss-Hermite."""

    order: int = 20

    def expectation(self, target, qm, qv, grad=False):
        x, w = gauss_hermite(self.order)
        s = np.sqrt(2.0 * qv)
        f = qm[:, None] + s[:, None] * x
        h = target[:, None]
        ll = h * log_expit(f) + (1.0 - h) * log_expit(-f)
        vals = ll @ w
        if not grad:
            return vals
        sig = expit(f)
        d1 = h - sig
        d_qm = d1 @ w
        # exact derivative of the quadrature rule; its v -> 0 limit is 1/2 E[g'']
        tiny = s < 1e-8
        d_qv = np.where(tiny, -0.5 * ((sig * (1 - sig)) @ w),
                        ((d1 * x) @ w) / np.where(tiny, 1.0, s))
        return vals, d_qm, d_qv, None


# ---------------------------------------------------------------------------
# ELBO engine
# ---------------------------------------------------------------------------


@dataclass
class ELBOResult:
    value: float
    expected: list
    kl: float
    n_clamped: int = 0
    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    # gradients (filled when grad=True)
    d_kernel: object = None
    d_Z: np.ndarray | None = None
    d_m: np.ndarray | None = None
    d_L: np.ndarray | None = None
    d_S: np.ndarray | None = None
    d_log_sigma: list = field(default_factory=list)


class _Prior:
    """Kernel blocks and factorizations shared by marginals, KL and gradients."""

    def __init__(self, params, Z, X=None):
        self.params = params
        M = len(Z)
        Kzz, self.tz = gram_forward(params, Z)
        self.Kzz = Kzz + params.jitter * np.eye(M)
        self.Lz = _cholesky(self.Kzz)
        if X is not None:
            self.Kxz, self.tx = gram_forward(params, X, Z)
            kd, self.td = gram_forward(params, X, diag=True)
            self.kdiag = kd + params.jitter
            self.A = linalg.cho_solve((self.Lz, True), self.Kxz.T).T

    def P(self):
        return linalg.cho_solve((self.Lz, True), np.eye(len(self.Kzz)))


def _kl(prior, vs):
    Lz = prior.Lz
    M = len(vs.m)
    diag_l = np.diag(vs.L)
    if np.any(diag_l == 0):
        raise NumericalError("variational factor L has a zero diagonal entry")
    half_tr = linalg.solve_triangular(Lz, vs.L, lower=True)
    alpha = linalg.solve_triangular(Lz, vs.m, lower=True)
    logdet_k = 2.0 * np.sum(np.log(np.diag(Lz)))
    logdet_s = 2.0 * np.sum(np.log(np.abs(diag_l)))
    return 0.5 * (logdet_k - logdet_s - M + np.sum(half_tr**2) + alpha @ alpha)


def sparse_elbo(params, vs, X, terms, kl_weight=1.0, scale=1.0, grad=False,
                z_grad=True, kernel_grad=True):
    """Evaluate ``scale * sum_terms weight * sum_n E[log p] - kl_weight * KL``.

    ``terms`` is a sequence of ``(weight, likelihood, target)``; all terms
    share one set of marginals ``q(f_n)``. ``kernel_grad=False`` stops the
    reverse pass at ``m``, ``L`` and ``S``.
    """
    X = np.asarray(X, dtype=float)
    prior = _Prior(params, vs.Z, X)
    A, Kxz = prior.A, prior.Kxz
    B = A @ vs.L
    mean = A @ vs.m
    raw_var = prior.kdiag - np.sum(A * Kxz, axis=1) + np.sum(B * B, axis=1)
    clamped = raw_var < VAR_FLOOR
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.debug("clamped %d of %d marginal variances", n_clamped, len(raw_var))
    var = np.where(clamped, VAR_FLOOR, raw_var)

    total = 0.0
    expected = []
    g_mean = np.zeros_like(mean)
    g_var = np.zeros_like(var)
    d_log_sigma = []
    for weight, lik, target in terms:
        target = np.asarray(target, dtype=float)
        if grad:
            vals, dm_, dv_, dls = lik.expectation(target, mean, var, grad=True)
            g_mean += weight * scale * dm_
            g_var += weight * scale * dv_
            d_log_sigma.append(None if dls is None else float(weight * scale * dls.sum()))
        else:
            vals = lik.expectation(target, mean, var)
        e = float(vals.sum())
        expected.append(scale * e)
        total += weight * scale * e
    kl = float(_kl(prior, vs))
    value = total - kl_weight * kl
    res = ELBOResult(value=float(value), expected=expected, kl=kl, n_clamped=n_clamped,
                     mean=mean, var=var)
    if not grad:
        return res
    if not np.isfinite(value):
        raise NumericalError("ELBO is not finite")

    g_var = np.where(clamped, 0.0, g_var)
    P = prior.P()
    m, L = vs.m, vs.L
    S = L @ L.T
    Pm = P @ m

    res.d_m = A.T @ g_mean - kl_weight * Pm
    gvB = g_var[:, None] * B
    dA = np.outer(g_mean, m) + 2.0 * gvB @ L.T - g_var[:, None] * Kxz
    dL = 2.0 * A.T @ gvB - kl_weight * (P @ L - np.diag(1.0 / np.diag(L)))
    res.d_L = np.tril(dL)
    S_inv = linalg.cho_solve((L, True), np.eye(len(m))) if np.all(np.diag(L) > 0) \
        else np.linalg.inv(S)
    res.d_S = A.T @ (g_var[:, None] * A) - 0.5 * kl_weight * (P - S_inv)
    res.d_log_sigma = d_log_sigma
    if not kernel_grad:
        return res

    d_Kxz = dA @ P - g_var[:, None] * A
    d_Kzz = -A.T @ dA @ P - 0.5 * kl_weight * (P - P @ S @ P - np.outer(Pm, Pm))

    gk, gz, _ = gram_backward(prior.tz, d_Kzz, coords=z_grad)
    gk2, _, gz2 = gram_backward(prior.tx, d_Kxz, coords=(False, z_grad))
    gk3, _, _ = gram_backward(prior.td, g_var, coords=False)
    res.d_kernel = params.unpack(gk.pack() + gk2.pack() + gk3.pack())
    res.d_Z = gz + gz2 if z_grad else None
    return res


# ---------------------------------------------------------------------------
# Public single-purpose operations
# ---------------------------------------------------------------------------


def q_f_marginals(X, params, vs):
    """Per-point mean and variance of ``q(f)``."""
    res = sparse_elbo(params, vs, X, terms=())
    return res.mean, res.var


def kl_qp(vs, params):
    """Closed-form ``KL[N(m, S) || N(0, K_ZZ)]``."""
    return float(_kl(_Prior(params, vs.Z), vs))


def elbo(X, target, params, vs, likelihood, n_total=None, grad=False):
    """Single-likelihood ELBO on a batch; ``n_total`` enables minibatch scaling.

    For a :class:`GaussianLikelihood` pass ``target = y_std - mu``; for a
    :class:`BernoulliLikelihood` pass the 0/1 hotspot flags.
    """
    n = len(X)
    if n == 0:
        raise ValueError("empty batch")
    scale = 1.0 if n_total is None else n_total / n
    res = sparse_elbo(params, vs, X, [(1.0, likelihood, target)], scale=scale, grad=grad)
    return res if grad else res.value


def predict_latent(Xs, params, vs, full_cov=True):
    """Predictive ``N(A* m, A* S A*^T + K** - A* K_Z*)`` at new coordinates."""
    Xs = np.asarray(Xs, dtype=float)
    prior = _Prior(params, vs.Z, Xs)
    A = prior.A
    mean = A @ vs.m
    B = A @ vs.L
    if full_cov:
        Kss, _ = gram_forward(params, Xs)
        Kss = Kss + params.jitter * np.eye(len(Xs))
        cov = B @ B.T + Kss - A @ prior.Kxz.T
        cov = 0.5 * (cov + cov.T)
        var = np.diag(cov).copy()
        neg = var < 0
        if neg.any():
            log.debug("clamped %d predictive variances", int(neg.sum()))
            var[neg] = 0.0
            cov[np.diag_indices_from(cov)] = var
        return LatentPosterior(mean, var, cov)
    var = prior.kdiag - np.sum(A * prior.Kxz, axis=1) + np.sum(B * B, axis=1)
    return LatentPosterior(mean, np.maximum(var, 0.0))


@dataclass
class CasePrediction:
    """Case forecast in standardized units plus the 95% interval in counts."""

    mean_std: np.ndarray
    var_std: np.ndarray
    lower_std: np.ndarray
    upper_std: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def predict_cases(Xs, mu_star, params, vs, sigma_eps, transform=None, latent=None):
    """Plug the latent predictive into ``y = mu + f + eps``.

    ``transform`` maps standardized values back to counts (see
    :class:`stgp.data.CaseTransform`); without it the count fields equal
    the standardized ones.
    """
    if latent is None:
        latent = predict_latent(Xs, params, vs, full_cov=False)
    mean = np.asarray(mu_star, float) + latent.mean
    var = latent.var + sigma_eps**2
    sd = np.sqrt(var)
    lo, hi = mean - 1.96 * sd, mean + 1.96 * sd
    inv = (lambda z: z) if transform is None else transform.inverse
    return CasePrediction(mean, var, lo, hi, inv(mean), inv(lo), inv(hi))


def predict_hotspot_prob(Xs, params, vs, order=20, latent=None):
    """``E[sigmoid(f)]`` under each predictive marginal, by Gauss-Hermite."""
    if latent is None:
        latent = predict_latent(Xs, params, vs, full_cov=False)
    x, w = gauss_hermite(order)
    f = latent.mean[:, None] + np.sqrt(2.0 * latent.var)[:, None] * x
    return np.clip(expit(f) @ w, 0.0, 1.0)
