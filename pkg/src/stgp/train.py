"""Model fitting: inducing-point initialization, the combined objective,
natural-gradient updates of ``q(u)``, the training loop and model files.

One training iteration draws a minibatch of county-weeks, evaluates the
hotspot ELBO and the ``delta``-weighted case ELBO on shared marginals, takes
an Adam ascent step on the kernel parameters, the inducing inputs and
``log sigma_eps``, and a natural-gradient step on ``(m, S)``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2

from .data import CaseTransform, atomic_write_text, build_covariates
from .errors import DataError, ModelFileError, NumericalError
from .kernel import CoordinateScaler, DeepKernelParams
from .mean import CovariateWeights, compute_mu, fit_omega, neighborhood_features
from .svgp import (
    BernoulliLikelihood,
    GaussianLikelihood,
    VariationalState,
    predict_cases,
    predict_hotspot_prob,
    predict_latent,
    sparse_elbo,
)

__all__ = [
    "TrainConfig",
    "TrainingData",
    "FittedModel",
    "Forecast",
    "init_inducing",
    "prepare_data",
    "combined_objective",
    "natgrad_step",
    "train",
    "refresh_posterior",
    "forecast",
    "save_model",
    "load_model",
    "write_trace",
]

log = logging.getLogger(__name__)

MODEL_FORMAT = "stgp-model"
MODEL_VERSION = 1
TRACE_COLUMNS = ("iteration", "elbo_h", "elbo_y", "combined")


@dataclass
class TrainConfig:
    delta: float = 1e-5
    iterations: int = 5000
    batch_size: int = 1024
    learning_rate: float = 1e-2
    natgrad_step: float = 0.1
    n_inducing: int = 500
    n_components: int = 4
    hidden: tuple = (64, 64, 64)
    seed: int = 0
    log_every: int = 1
    quadrature_order: int = 20
    ridge: float = 1e-3
    lag_depth: int = 2
    jitter: float = 1e-6
    train_inducing: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.natgrad_step <= 1.0:
            raise ValueError("natgrad_step must lie in (0, 1]")
        if self.n_inducing < 1 or self.n_components < 1:
            raise ValueError("n_inducing and n_components must be >= 1")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.quadrature_order < 1:
            raise ValueError("quadrature_order must be >= 1")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        return cls(**d)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Everything the optimizer needs, for the usable cells of ``weeks``.

    ``cells`` holds 0-based ``(county, week)`` index arrays; ``X`` the rescaled
    coordinates; ``h`` the hotspot flags; ``resid`` the case target
    ``y_std - mu``.
    """

    cells: tuple
    X: np.ndarray
    h: np.ndarray
    resid: np.ndarray

    @property
    def n(self):
        return len(self.h)


def usable_cells(covariates, last_week, first_week=1):
    """Cells with full covariate history and 1-based weeks in
    ``[first_week, last_week]``, as week-major ``(county, week)`` 0-based arrays."""
    mask = covariates.mask[:, first_week - 1:last_week]
    tt, ii = np.nonzero(mask.T)
    return ii, tt + first_week - 1


def prepare_data(panel, model, last_week, first_week=1):
    """Targets and coordinates for cells up to ``last_week`` (1-based)."""
    cov = build_covariates(panel, model.lag_depth, stats=model.covariate_stats)
    ii, tt = usable_cells(cov, last_week, first_week)
    if len(ii) == 0:
        raise DataError(f"no usable cells up to week {last_week} with lag depth {model.lag_depth}")
    y_std = model.transform.forward(panel.cases[ii, tt])
    mu = compute_mu(panel, cov, model.omega, cells=(ii, tt))
    raw = np.column_stack([tt + 1.0, panel.lonlat[ii]])
    return TrainingData((ii, tt), model.scaler.transform(raw),
                        panel.hotspots[ii, tt].astype(float), y_std - mu)


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    kernel: DeepKernelParams
    vs: VariationalState
    omega: CovariateWeights
    log_sigma_eps: float
    transform: CaseTransform
    scaler: CoordinateScaler
    covariate_stats: tuple
    lag_depth: int
    train_weeks: int
    fips: tuple
    config: TrainConfig
    trace: np.ndarray = field(default_factory=lambda: np.empty((0, 4)))

    @property
    def sigma_eps(self):
        return float(np.exp(self.log_sigma_eps))

    def copy(self):
        return FittedModel(
            self.kernel.copy(), self.vs.copy(), CovariateWeights(self.omega.omega.copy()),
            self.log_sigma_eps, CaseTransform(self.transform.mean, self.transform.sd),
            CoordinateScaler(self.scaler.center.copy(), self.scaler.half_range.copy()),
            tuple(np.array(a) for a in self.covariate_stats), self.lag_depth,
            self.train_weeks, tuple(self.fips), dataclasses.replace(self.config),
            self.trace.copy(),
        )

    def likelihoods(self):
        return (BernoulliLikelihood(self.config.quadrature_order),
                GaussianLikelihood(self.log_sigma_eps))

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kernel": self.kernel.to_dict(),
            "variational": self.vs.to_dict(),
            "omega": self.omega.omega.tolist(),
            "log_sigma_eps": self.log_sigma_eps,
            "transform": self.transform.to_dict(),
            "scaler": self.scaler.to_dict(),
            "covariate_stats": {"mean": list(map(float, self.covariate_stats[0])),
                                "sd": list(map(float, self.covariate_stats[1]))},
            "lag_depth": self.lag_depth,
            "train_weeks": self.train_weeks,
            "fips": list(self.fips),
            "config": self.config.to_dict(),
            "trace": self.trace.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != MODEL_FORMAT:
            raise ModelFileError("not a model file (format tag missing)")
        if d.get("version") != MODEL_VERSION:
            raise ModelFileError(
                f"model file version {d.get('version')} is not supported (expected {MODEL_VERSION})")
        trace = np.asarray(d["trace"], float).reshape(-1, 4)
        return cls(
            kernel=DeepKernelParams.from_dict(d["kernel"]),
            vs=VariationalState.from_dict(d["variational"]),
            omega=CovariateWeights(d["omega"]),
            log_sigma_eps=float(d["log_sigma_eps"]),
            transform=CaseTransform(float(d["transform"]["mean"]), float(d["transform"]["sd"])),
            scaler=CoordinateScaler.from_dict(d["scaler"]),
            covariate_stats=(np.asarray(d["covariate_stats"]["mean"], float),
                             np.asarray(d["covariate_stats"]["sd"], float)),
            lag_depth=int(d["lag_depth"]),
            train_weeks=int(d["train_weeks"]),
            fips=tuple(d["fips"]),
            config=TrainConfig.from_dict(d["config"]),
            trace=trace,
        )


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def init_inducing(X, M, seed=0):
    """k-means centroids (25 Lloyd iterations) of the rescaled coordinates."""
    X = np.asarray(X, dtype=float)
    N = len(X)
    if M > N:
        raise ValueError(f"cannot place {M} inducing points on {N} training points")
    if M < 1:
        raise ValueError("need at least one inducing point")
    if M == 1:
        return X.mean(axis=0, keepdims=True)
    Z, _ = kmeans2(X, M, iter=25, minit="points", missing="warn",
                   seed=np.random.default_rng(seed))
    return Z


def combined_objective(params, vs, X, h, resid, log_sigma, delta, scale=1.0,
                       order=20, grad=False, kernel_grad=True, z_grad=True):
    """``ELBO_h + delta * ELBO_y`` on shared marginals, KL weighted ``1 + delta``.

    Returns the :class:`~stgp.svgp.ELBOResult`; ``expected`` holds the two
    (scaled) expected log-likelihood sums in the order hotspot, case.
    """
    if len(X) == 0:
        raise ValueError("empty batch")
    terms = [(1.0, BernoulliLikelihood(order), h),
             (delta, GaussianLikelihood(log_sigma), resid)]
    return sparse_elbo(params, vs, X, terms, kl_weight=1.0 + delta, scale=scale,
                       grad=grad, z_grad=z_grad, kernel_grad=kernel_grad)


def natgrad_step(vs, grads, gamma, max_halvings=10):
    """One natural-gradient step on ``q(u)``.

    ``grads`` carries ``d_m`` and ``d_S`` (ELBO derivatives with respect to
    the mean and covariance). In natural parameters ``S^-1 m`` and
    ``-S^-1 / 2`` the step adds ``gamma`` times the gradient with respect to
    the expectation parameters ``(m, S + m m^T)``. If the new precision is
    not positive definite the step is halved, at most ``max_halvings`` times.
    """
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    d_m = np.asarray(grads.d_m, float)
    d_S = np.asarray(grads.d_S, float)
    if not np.any(d_m) and not np.any(d_S):
        return vs.copy()
    M = len(vs.m)
    eye = np.eye(M)
    S_inv = linalg.cho_solve((vs.L, True), eye)
    theta1 = S_inv @ vs.m
    g1 = d_m - 2.0 * d_S @ vs.m
    d_S = 0.5 * (d_S + d_S.T)
    step = gamma
    for _ in range(max_halvings + 1):
        prec = S_inv - 2.0 * step * d_S
        prec = 0.5 * (prec + prec.T)
        try:
            Lp = linalg.cholesky(prec, lower=True)
            S_new = linalg.cho_solve((Lp, True), eye)
            S_new = 0.5 * (S_new + S_new.T)
            L_new = linalg.cholesky(S_new, lower=True)
        except (linalg.LinAlgError, ValueError):
            step *= 0.5
            continue
        m_new = S_new @ (theta1 + step * g1)
        if np.all(np.isfinite(m_new)) and np.all(np.isfinite(L_new)):
            if step < gamma:
                log.debug("natural-gradient step reduced to %g", step)
            return VariationalState(vs.Z.copy(), m_new, L_new)
        step *= 0.5
    raise NumericalError(
        f"natural-gradient update left S indefinite after {max_halvings} step halvings")


class _Adam:
    """Adam ascent on a flat vector."""

    def __init__(self, size, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return x + self.lr * mh / (np.sqrt(vh) + self.eps)


def _pack_theta(model):
    return np.concatenate([model.kernel.pack(), model.vs.Z.ravel(), [model.log_sigma_eps]])


def _unpack_theta(model, theta, train_z):
    nk = len(model.kernel.pack())
    nz = model.vs.Z.size
    model.kernel = model.kernel.unpack(theta[:nk])
    if train_z:
        model.vs = VariationalState(theta[nk:nk + nz].reshape(model.vs.Z.shape),
                                    model.vs.m, model.vs.L)
    model.log_sigma_eps = float(theta[-1])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def initialize(panel, config, train_weeks=None):
    """Fit the mean model and build the initial :class:`FittedModel`."""
    T_tr = panel.T if train_weeks is None else int(train_weeks)
    if not config.lag_depth < T_tr <= panel.T:
        raise DataError(f"training weeks must lie in ({config.lag_depth}, {panel.T}], got {T_tr}")
    rng = np.random.default_rng(config.seed)
    cov = build_covariates(panel, config.lag_depth, fit_weeks=T_tr)
    transform = CaseTransform.fit(panel.cases[:, :T_tr])
    y_std = transform.forward(panel.cases)
    nf = neighborhood_features(panel, cov)
    omega = fit_omega(panel, cov, y_std, ridge=config.ridge, weeks=np.arange(T_tr), features=nf)
    scaler = CoordinateScaler.fit(panel.coords(np.arange(1, T_tr + 1))[0])
    kernel = DeepKernelParams.init(rng, n_components=config.n_components, hidden=config.hidden,
                                   jitter=config.jitter)
    model = FittedModel(kernel, None, omega, 0.0, transform, scaler,
                        (cov.feature_mean, cov.feature_sd), config.lag_depth, T_tr,
                        tuple(panel.fips), config)
    data = prepare_data(panel, model, T_tr)
    if config.n_inducing > data.n:
        raise DataError(f"n_inducing={config.n_inducing} exceeds the {data.n} usable training cells")
    sd = float(np.std(data.resid))
    model.log_sigma_eps = float(np.log(sd if sd > 1e-6 else 1.0))
    Z = init_inducing(data.X, config.n_inducing, seed=int(rng.integers(2**32)))
    model.vs = VariationalState.from_prior(Z, kernel)
    return model, data, rng


def train(panel, config, train_weeks=None, callback=None):
    """Run the training loop on weeks ``1..train_weeks`` (all weeks by default).

    Deterministic given ``config.seed``. If the objective turns non-finite the
    raised :class:`NumericalError` carries the last finite model as ``.model``.
    """
    model, data, rng = initialize(panel, config, train_weeks)
    N = data.n
    n = min(config.batch_size, N)
    scale = N / n
    adam = _Adam(len(_pack_theta(model)), config.learning_rate)
    trace = []
    for it in range(1, config.iterations + 1):
        idx = np.sort(rng.choice(N, n, replace=False)) if n < N else slice(None)
        try:
            res = combined_objective(model.kernel, model.vs, data.X[idx], data.h[idx],
                                     data.resid[idx], model.log_sigma_eps, config.delta,
                                     scale=scale, order=config.quadrature_order, grad=True,
                                     z_grad=config.train_inducing)
            if not (np.isfinite(res.value) and all(np.all(np.isfinite(np.asarray(g)))
                                                   for g in (res.d_m, res.d_S, res.d_kernel.pack()))):
                raise NumericalError("non-finite objective or gradient")
            if (it - 1) % config.log_every == 0:
                e_h, e_y = res.expected
                trace.append((it, e_h - res.kl, e_y - res.kl, res.value))
            vs_new = natgrad_step(model.vs, res, config.natgrad_step)
            grad_theta = np.concatenate([
                res.d_kernel.pack(),
                res.d_Z.ravel() if config.train_inducing else np.zeros(model.vs.Z.size),
                [res.d_log_sigma[1]],
            ])
            theta = adam.step(_pack_theta(model), grad_theta)
        except NumericalError as exc:
            model.trace = np.asarray(trace, float).reshape(-1, 4)
            err = NumericalError(f"training aborted at iteration {it}: {exc}")
            err.model = model
            raise err from exc
        model.vs = vs_new
        _unpack_theta(model, theta, config.train_inducing)
        if callback is not None:
            callback(it, res)
    model.trace = np.asarray(trace, float).reshape(-1, 4)
    return model


def refresh_posterior(model, panel, last_week, steps=20, gamma=None, reinit_inducing=True):
    """Condition ``q(u)`` on every usable cell up to ``last_week``.

    Kernel, ``omega`` and ``sigma_eps`` stay fixed. With ``reinit_inducing``
    the inducing inputs are re-placed by k-means over the new data so that
    they cover recent weeks; ``q(u)`` then restarts from the prior.
    """
    out = model.copy()
    data = prepare_data(panel, out, last_week)
    cfg = out.config
    gamma = cfg.natgrad_step if gamma is None else gamma
    if reinit_inducing:
        M = min(out.vs.M, data.n)
        Z = init_inducing(data.X, M, seed=cfg.seed + last_week)
        out.vs = VariationalState.from_prior(Z, out.kernel)
    for _ in range(steps):
        res = combined_objective(out.kernel, out.vs, data.X, data.h, data.resid,
                                 out.log_sigma_eps, cfg.delta, order=cfg.quadrature_order,
                                 grad=True, kernel_grad=False)
        out.vs = natgrad_step(out.vs, res, gamma)
    return out


@dataclass
class Forecast:
    """Predictions for a block of weeks; arrays are ``(I, n_weeks)``."""

    weeks: np.ndarray
    prob: np.ndarray
    mean_std: np.ndarray
    lower_std: np.ndarray
    upper_std: np.ndarray
    truth_std: np.ndarray
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray


def forecast(model, panel, weeks):
    """Hotspot probabilities and case predictions for the given 1-based weeks."""
    weeks = np.atleast_1d(np.asarray(weeks, int))
    cov = build_covariates(panel, model.lag_depth, stats=model.covariate_stats)
    I = panel.I
    ii = np.tile(np.arange(I), len(weeks))
    tt = np.repeat(weeks - 1, I)
    if np.any(tt < 0) or np.any(tt >= panel.T):
        raise DataError("forecast weeks outside the panel")
    mu = compute_mu(panel, cov, model.omega, cells=(ii, tt))
    X = model.scaler.transform(np.column_stack([tt + 1.0, panel.lonlat[ii]]))
    latent = predict_latent(X, model.kernel, model.vs, full_cov=False)
    prob = predict_hotspot_prob(X, model.kernel, model.vs, order=model.config.quadrature_order,
                                latent=latent)
    cp = predict_cases(X, mu, model.kernel, model.vs, model.sigma_eps, model.transform,
                       latent=latent)
    truth = model.transform.forward(panel.cases[ii, tt])
    shape = (len(weeks), I)
    r = lambda a: np.asarray(a).reshape(shape).T  # noqa: E731
    return Forecast(weeks, r(prob), r(cp.mean_std), r(cp.lower_std), r(cp.upper_std),
                    r(truth), r(cp.mean), r(cp.lower), r(cp.upper))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_model(model, path):
    atomic_write_text(path, json.dumps(model.to_dict(), sort_keys=True))


def load_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"corrupt or truncated model file {path}: {exc}") from exc
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ModelFileError(f"{path} does not contain a model")
    try:
        return FittedModel.from_dict(d)
    except ModelFileError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"model file {path} is incomplete: {exc}") from exc


def write_trace(model, path):
    lines = [",".join(TRACE_COLUMNS)]
    for it, eh, ey, c in model.trace:
        lines.append(f"{int(it)},{float(eh)!r},{float(ey)!r},{float(c)!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")
