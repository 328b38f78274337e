"""Covariate-driven mean of the case model.

``mu[i, t]`` averages ``eta[j, t] @ omega`` over the neighbourhood of ``i``
(the county itself plus its adjacent counties). ``eta`` already stacks the
lagged weeks, so one shared weight vector covers every lag.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DataError, NumericalError

__all__ = ["CovariateWeights", "neighborhood_features", "compute_mu", "fit_omega"]


@dataclass
class CovariateWeights:
    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        if not np.all(np.isfinite(self.omega)):
            raise ValueError("covariate weights must be finite")


def neighborhood_features(panel, covariates):
    """``(I, T, L)`` neighbourhood averages of ``eta`` (NaN where masked)."""
    eta = covariates.eta
    out = np.empty_like(eta)
    for i, nb in enumerate(panel.neighbors()):
        out[i] = eta[nb].mean(axis=0)
    return out


def compute_mu(panel, covariates, weights, cells=None, features=None):
    """Mean in standardized case units.

    With ``cells`` (a pair of index arrays ``(i, t)``, 0-based weeks) only
    those cells are returned and any masked cell raises; otherwise the full
    ``(I, T)`` array is returned with NaN where history is insufficient.
    """
    omega = weights.omega if isinstance(weights, CovariateWeights) else np.asarray(weights, float)
    nf = neighborhood_features(panel, covariates) if features is None else features
    if cells is None:
        mu = np.full(covariates.mask.shape, np.nan)
        mu[covariates.mask] = nf[covariates.mask] @ omega
        return mu
    ii, tt = (np.asarray(c) for c in cells)
    if not covariates.mask[ii, tt].all():
        raise DataError("insufficient history: covariates undefined for requested cells")
    return nf[ii, tt] @ omega


def fit_omega(panel, covariates, y_std, ridge=1e-3, weeks=None, features=None):
    """Ridge regression of standardized cases on neighbourhood-averaged covariates.

    ``weeks`` (0-based indices) restricts the fit; masked cells never enter.
    """
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    nf = neighborhood_features(panel, covariates) if features is None else features
    use = covariates.mask.copy()
    if weeks is not None:
        sel = np.zeros(use.shape[1], dtype=bool)
        sel[np.asarray(weeks)] = True
        use &= sel[None, :]
    D = nf[use]
    y = np.asarray(y_std, float)[use]
    if len(y) < D.shape[1]:
        raise DataError(f"need at least {D.shape[1]} usable cells to fit omega, have {len(y)}")
    G = D.T @ D + ridge * np.eye(D.shape[1])
    try:
        cf = linalg.cho_factor(G, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("normal equations are singular; use ridge > 0") from exc
    if ridge == 0 and np.linalg.cond(G) > 1e12:
        raise NumericalError("normal equations are singular; use ridge > 0")
    return CovariateWeights(linalg.cho_solve(cf, D.T @ y))
