"""Comparison classifiers on the covariates of the mean model.

Each county-week is described by the neighbourhood-averaged lagged
covariates plus the county's own hotspot flags for the previous ``d`` weeks.
The perceptron outputs 0/1 scores, logistic regression a probability and
k-nearest neighbours the positive fraction among its ``k`` neighbours.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit, log_expit

from .data import build_covariates
from .mean import neighborhood_features

__all__ = [
    "Perceptron",
    "Logistic",
    "KNN",
    "fit_perceptron",
    "fit_logistic",
    "fit_knn",
    "predict_knn",
    "baseline_features",
    "baseline_predictor",
    "BASELINES",
]

log = logging.getLogger(__name__)

BASELINES = ("perceptron", "logistic", "knn")


@dataclass
class Perceptron:
    weights: np.ndarray
    bias: float
    mistakes: int = 0  # mistakes made during the final epoch

    def decision(self, X):
        return np.asarray(X, float) @ self.weights + self.bias

    def predict(self, X):
        """Sign activation: +1 when the weighted sum is positive, else -1."""
        return np.where(self.decision(X) > 0, 1, -1)

    def predict_proba(self, X):
        return (self.predict(X) > 0).astype(float)


@dataclass
class Logistic:
    weights: np.ndarray
    bias: float
    history: np.ndarray | None = None  # penalized log-likelihood per iteration
    grad_norm: float = np.inf

    def predict_proba(self, X):
        return expit(np.asarray(X, float) @ self.weights + self.bias)


@dataclass
class KNN:
    X: np.ndarray
    y: np.ndarray
    k: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.X) == 0:
            raise ValueError("kNN needs a non-empty training set")

    def predict_proba(self, X):
        return predict_knn(self, X)


def fit_perceptron(X, y, epochs=100, seed=0):
    """Mistake-driven perceptron updates over seeded shuffled passes.

    ``y`` holds labels in ``{-1, +1}``. Stops early after an epoch without
    mistakes.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, int)
    if not np.isin(y, (-1, 1)).all():
        raise ValueError("perceptron labels must be -1 or +1")
    rng = np.random.default_rng(seed)
    w = np.zeros(X.shape[1])
    b = 0.0
    mistakes = 0
    for _ in range(epochs):
        mistakes = 0
        for n in rng.permutation(len(y)):
            pred = 1 if X[n] @ w + b > 0 else -1
            if pred != y[n]:
                w += y[n] * X[n]
                b += y[n]
                mistakes += 1
        if mistakes == 0:
            break
    return Perceptron(w, float(b), mistakes)


def _penalized_loglik(X, y, w, b, l2):
    z = X @ w + b
    return float(np.sum(y * log_expit(z) + (1 - y) * log_expit(-z)) - 0.5 * l2 * w @ w)


def fit_logistic(X, y, l2=1e-4, iters=500, tol=1e-10):
    """Maximize the L2-penalized Bernoulli log-likelihood (bias unpenalized).

    Each iteration moves along the gradient preconditioned by the negative
    Hessian, halving the step until the objective does not decrease, so the
    objective history is non-decreasing. Stops once the gradient norm falls
    below ``tol``.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("logistic labels must be 0 or 1")
    n, p = X.shape
    Xb = np.column_stack([X, np.ones(n)])
    pen = np.full(p + 1, l2)
    pen[-1] = 0.0
    theta = np.zeros(p + 1)
    obj = _penalized_loglik(X, y, theta[:-1], theta[-1], l2)
    history = [obj]
    gnorm = np.inf
    for _ in range(iters):
        mu = expit(Xb @ theta)
        g = Xb.T @ (y - mu) - pen * theta
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            break
        Hn = (Xb * (mu * (1 - mu))[:, None]).T @ Xb + np.diag(pen) + 1e-10 * np.eye(p + 1)
        direction = linalg.solve(Hn, g, assume_a="pos")
        step = 1.0
        for _ in range(50):
            cand = theta + step * direction
            val = _penalized_loglik(X, y, cand[:-1], cand[-1], l2)
            if val >= obj:
                break
            step *= 0.5
        else:
            break
        theta, obj = cand, val
        history.append(obj)
    mu = expit(Xb @ theta)
    gnorm = float(np.linalg.norm(Xb.T @ (y - mu) - pen * theta))
    return Logistic(theta[:-1].copy(), float(theta[-1]), np.array(history), gnorm)


def fit_knn(X, y, k=5):
    return KNN(np.asarray(X, float), np.asarray(y, float), int(k))


def predict_knn(model, Q):
    """Positive fraction among the ``k`` nearest training points.

    Distance ties are broken by training index. ``k`` larger than the
    training set is clamped with a warning.
    """
    Q = np.atleast_2d(np.asarray(Q, float))
    k = model.k
    if k > len(model.X):
        warnings.warn(f"k={k} exceeds the {len(model.X)} training points; using k={len(model.X)}",
                      RuntimeWarning, stacklevel=2)
        k = len(model.X)
    d2 = (np.sum(Q * Q, axis=1)[:, None] - 2.0 * Q @ model.X.T
          + np.sum(model.X * model.X, axis=1)[None, :])
    d2 = np.maximum(d2, 0.0)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return model.y[idx].mean(axis=1)


# ---------------------------------------------------------------------------
# Panel features and rolling-evaluation adapter
# ---------------------------------------------------------------------------


def baseline_features(panel, lag_depth=2, fit_weeks=None, hotspot_lags=0):
    """``(I, T, L)`` features: the neighbourhood covariates of the mean model.

    ``hotspot_lags > 0`` appends the county's own hotspot flags for that many
    previous weeks. Entries for weeks without full history are NaN.
    """
    cov = build_covariates(panel, lag_depth, fit_weeks=fit_weeks)
    out = neighborhood_features(panel, cov)
    if hotspot_lags:
        I, T = panel.I, panel.T
        lags = np.full((I, T, hotspot_lags), np.nan)
        h = panel.hotspots.astype(float)
        for k in range(1, hotspot_lags + 1):
            lags[:, k:, k - 1] = h[:, :-k]
        out = np.concatenate([out, lags], axis=2)
    out = np.array(out, float)
    out[~cov.mask] = np.nan
    return out, cov.mask


def baseline_predictor(panel, kind, lag_depth=2, seed=0, epochs=100, l2=1e-4, iters=500, k=5,
                       hotspot_lags=0):
    """Adapter for :func:`stgp.detect.rolling_evaluate`."""
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")

    class BaselinePredictor:
        model = None
        feats = None

        def fit(self, last_week):
            F, mask = baseline_features(panel, lag_depth, fit_weeks=last_week,
                                       hotspot_lags=hotspot_lags)
            first = lag_depth
            Xtr = F[:, first:last_week].reshape(-1, F.shape[2])
            ytr = panel.hotspots[:, first:last_week].reshape(-1)
            mean, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
            sd = np.where(sd < 1e-12, 1.0, sd)
            self.feats = (F - mean) / sd
            Xtr = (Xtr - mean) / sd
            if kind == "perceptron":
                self.model = fit_perceptron(Xtr, 2 * ytr - 1, epochs=epochs, seed=seed)
            elif kind == "logistic":
                self.model = fit_logistic(Xtr, ytr, l2=l2, iters=iters)
            else:
                self.model = fit_knn(Xtr, ytr, k=k)

        def insample(self, last_week):
            first = lag_depth
            X = self.feats[:, first:last_week]
            p = self.model.predict_proba(X.reshape(-1, X.shape[2])).reshape(X.shape[:2])
            return p, first

        def predict(self, week):
            return self.model.predict_proba(self.feats[:, week - 1]), None

    return BaselinePredictor()
