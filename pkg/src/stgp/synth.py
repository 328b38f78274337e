"""Synthetic panels drawn from the generative model.

A latent field ``f ~ GP(0, k)`` is sampled on every county-week with a known
deep kernel. Cases follow ``z = base + f + eps`` in a log-standardized space
(``log1p(y) = log_mean + log_sd * z``) and hotspots are
``h ~ Bernoulli(sigmoid(f))``. Counties sit on a jittered grid whose rook
neighbours form the adjacency graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .data import CountyId, PanelDataset
from .errors import NumericalError
from .kernel import CoordinateScaler, DeepKernelParams, gram

__all__ = ["SynthConfig", "SynthResult", "synthesize", "grid_layout"]


@dataclass
class SynthConfig:
    n_counties: int = 50
    n_weeks: int = 40
    seed: int = 0
    latent_sd: float = 24.0
    bandwidth_weeks: float = 15.0
    spatial_length: float = 0.25
    n_components: int = 2
    hidden: tuple = (16, 16)
    psi_scale: float = 0.5
    noise: float = 1.0
    base_level: float = 0.0
    log_mean: float = 5.0
    log_sd: float = 0.25
    death_rate: float = 0.02
    lon_range: tuple = (-95.0, -80.0)
    lat_range: tuple = (30.0, 40.0)
    jitter: float = 1e-6
    kernel: DeepKernelParams | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.n_counties < 1 or self.n_weeks < 1:
            raise ValueError("panel must be non-empty")


@dataclass
class SynthResult:
    panel: PanelDataset
    f: np.ndarray  # (I, T) latent field
    z: np.ndarray  # (I, T) standardized cases before discretization
    kernel: DeepKernelParams
    scaler: CoordinateScaler


def grid_layout(n, lon_range, lat_range, rng):
    """Jittered grid positions and rook adjacency for ``n`` counties."""
    ny = max(1, int(math.floor(math.sqrt(n / 2.0))))
    nx = int(math.ceil(n / ny))
    dx = (lon_range[1] - lon_range[0]) / nx
    dy = (lat_range[1] - lat_range[0]) / ny
    pos, cell = [], {}
    for k in range(n):
        gx, gy = k % nx, k // nx
        cell[(gx, gy)] = k
        lon = lon_range[0] + (gx + 0.5 + rng.uniform(-0.25, 0.25)) * dx
        lat = lat_range[0] + (gy + 0.5 + rng.uniform(-0.25, 0.25)) * dy
        pos.append((lon, lat))
    edges = set()
    for (gx, gy), k in cell.items():
        for nb in ((gx + 1, gy), (gx, gy + 1)):
            if nb in cell:
                edges.add((k, cell[nb]))
                edges.add((cell[nb], k))
    return np.array(pos), frozenset(edges)


def _default_kernel(cfg, rng, time_half_range):
    params = DeepKernelParams.init(rng, n_components=cfg.n_components, hidden=cfg.hidden,
                                   jitter=cfg.jitter)
    for net in params.nets:
        net.weights[-1][:, :2] *= cfg.psi_scale
        net.biases[-1][:2] = 0.0
    scale2 = cfg.spatial_length**2 / (params.area / np.pi)
    params.log_scale = 0.5 * math.log(scale2)
    params.log_bandwidth = math.log(cfg.bandwidth_weeks / time_half_range)
    # k(x, x) = amplitude / (4 scale^2 area) for every x
    params.log_amplitude = (2.0 * math.log(max(cfg.latent_sd, 1e-300))
                            + math.log(4.0 * scale2 * params.area))
    return params


def synthesize(cfg):
    """Draw a panel from the model; fully determined by ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    I, T = cfg.n_counties, cfg.n_weeks
    if I * T > 3000:
        raise ValueError(f"I*T={I * T} is too large for a dense Gram factorization (max 3000)")
    lonlat, edges = grid_layout(I, cfg.lon_range, cfg.lat_range, rng)
    weeks = np.repeat(np.arange(1, T + 1), I)
    X = np.column_stack([weeks.astype(float), np.tile(lonlat, (T, 1))])
    scaler = CoordinateScaler.fit(X)
    kernel = cfg.kernel if cfg.kernel is not None else _default_kernel(cfg, rng, scaler.half_range[0])

    eps_f = rng.standard_normal(I * T)
    if cfg.latent_sd == 0 and cfg.kernel is None:
        f = np.zeros(I * T)
    else:
        K = gram(scaler.transform(X), None, kernel)
        try:
            Lk = linalg.cholesky(K, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(
                "Gram factorization failed while sampling; use a larger jitter") from exc
        f = Lk @ eps_f
    f = f.reshape(T, I).T

    z = cfg.base_level + f + cfg.noise * rng.standard_normal((I, T))
    cases = np.rint(np.maximum(0.0, np.expm1(cfg.log_mean + cfg.log_sd * z)))
    deaths = rng.binomial(cases.astype(np.int64), cfg.death_rate)
    hot = (rng.random((I, T)) < expit(f)).astype(np.int8)
    trend = np.tanh(f / max(cfg.latent_sd, 1e-12))
    coef = rng.uniform(-15.0, 15.0, size=6)
    mobility = trend[..., None] * coef + rng.normal(0.0, 5.0, size=(I, T, 6))

    width = len(str(I))
    counties = tuple(CountyId(f"99{k:0{max(width, 3)}d}", float(lonlat[k, 0]), float(lonlat[k, 1]))
                     for k in range(I))
    panel = PanelDataset(counties, cases, deaths, hot, mobility, edges)
    return SynthResult(panel, f, z, kernel, scaler)
