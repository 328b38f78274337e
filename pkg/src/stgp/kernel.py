"""Non-stationary spatio-temporal deep kernel.

The covariance between two spatio-temporal coordinates ``x = (t, s)`` and
``x' = (t', s')`` is

    k(x, x') = amp * nu(t, t') * sum_r g_r(s) g_r(s') v_r(s, s')

where ``nu`` is a squared-exponential kernel in time, ``g_r = sqrt(w_r)`` are
square roots of softmax mixture weights and ``v_r`` is the convolution of two
Gaussian smoothing kernels centred at ``s`` and ``s'``:

    v_r(s, s') = |S_r(s) + S_r(s')|^{-1/2} / (2 pi)
                 * exp(-1/2 (s' - s)^T (S_r(s) + S_r(s'))^{-1} (s' - s))

Each local covariance ``S_r(s)`` is an ellipse of fixed area whose focus
points ``+-psi_r(s)`` are produced, together with the raw mixture weight, by a
small tanh network ``R^2 -> R^3``.

All coordinates entering this module are already rescaled (see
:class:`CoordinateScaler`). Gradients are obtained by an explicit reverse pass
(:func:`gram_backward`) rather than a general autodiff engine.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax

__all__ = [
    "CoordinateScaler",
    "FeatureNet",
    "DeepKernelParams",
    "net_forward",
    "mixture_weights",
    "focus_to_covariance",
    "ellipse_axes",
    "spatial_component",
    "temporal_kernel",
    "kernel",
    "gram",
    "gram_diag",
    "gram_forward",
    "gram_backward",
    "kernel_grad",
]

TWO_PI = 2.0 * np.pi


@dataclass
class CoordinateScaler:
    """Affine map from raw ``(week, lon, lat)`` to roughly ``[-1, 1]``.

    Longitude and latitude share one scale so that distances keep their
    geometry; time gets its own.
    """

    center: np.ndarray
    half_range: np.ndarray

    @classmethod
    def fit(cls, coords):
        coords = np.asarray(coords, dtype=float)
        lo, hi = coords.min(axis=0), coords.max(axis=0)
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        spatial = max(half[1], half[2])
        half = np.array([half[0], spatial, spatial])
        half[half <= 0] = 1.0
        return cls(center=center, half_range=half)

    def transform(self, coords):
        return (np.asarray(coords, dtype=float) - self.center) / self.half_range

    def inverse(self, coords):
        return np.asarray(coords, dtype=float) * self.half_range + self.center

    def to_dict(self):
        return {"center": self.center.tolist(), "half_range": self.half_range.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], float), np.asarray(d["half_range"], float))


# ---------------------------------------------------------------------------
# Feature network
# ---------------------------------------------------------------------------


@dataclass
class FeatureNet:
    """Dense tanh network mapping a location to ``(psi_x, psi_y, w_raw)``.

    ``weights[l]`` has shape ``(fan_in, fan_out)``; the output layer is linear.
    """

    weights: list
    biases: list

    @classmethod
    def init(cls, rng, hidden=(64, 64, 64), n_in=2, n_out=3):
        sizes = [n_in, *hidden, n_out]
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, hidden=(64, 64, 64), n_in=2, n_out=3):
        sizes = [n_in, *hidden, n_out]
        return cls(
            [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
            [np.zeros(b) for b in sizes[1:]],
        )

    @property
    def hidden(self):
        return tuple(w.shape[1] for w in self.weights[:-1])

    def zeros_like(self):
        return FeatureNet([np.zeros_like(w) for w in self.weights],
                          [np.zeros_like(b) for b in self.biases])

    def forward(self, s):
        """Return the network output and the activations needed for backprop."""
        a = np.atleast_2d(np.asarray(s, dtype=float))
        acts = [a]
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w + b
            if l < last:
                a = np.tanh(a)
            acts.append(a)
        return a, acts

    def backward(self, acts, grad_out):
        """Backpropagate ``grad_out`` (n, 3); returns ``(grad_net, grad_input)``."""
        grads = self.zeros_like()
        delta = grad_out
        for l in range(len(self.weights) - 1, -1, -1):
            grads.weights[l] = acts[l].T @ delta
            grads.biases[l] = delta.sum(axis=0)
            delta = delta @ self.weights[l].T
            if l > 0:
                delta = delta * (1.0 - acts[l] ** 2)
        return grads, delta


def net_forward(net, s):
    """Evaluate a :class:`FeatureNet` at location(s) ``s``."""
    out, _ = net.forward(s)
    return out[0] if np.ndim(s) == 1 else out


def mixture_weights(w_raw):
    """Softmax over the component axis (last axis)."""
    return softmax(np.asarray(w_raw, dtype=float), axis=-1)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

_SCALARS = ("log_bandwidth", "log_scale", "log_area", "log_amplitude")


@dataclass
class DeepKernelParams:
    """Kernel hyperparameters; positive quantities are stored as logs.

    ``log_jitter`` is never trained and ``log_area`` only if ``train_area``.
    """

    nets: list
    log_bandwidth: float
    log_scale: float
    log_area: float = 0.0
    log_amplitude: float = 0.0
    log_jitter: float = float(np.log(1e-6))
    train_area: bool = False

    @classmethod
    def init(cls, rng, n_components=4, hidden=(64, 64, 64), area=1.0,
             bandwidth=0.5, spatial_range=2.0, amplitude=1.0, jitter=1e-6):
        """Defaults: bandwidth a quarter of the rescaled time range and a
        local covariance of roughly ``(0.1 * spatial_range)^2 * I``."""
        if not 1 <= n_components:
            raise ValueError("n_components must be >= 1")
        nets = [FeatureNet.init(rng, hidden) for _ in range(n_components)]
        scale2 = (0.1 * spatial_range) ** 2 / (area / np.pi)
        return cls(
            nets=nets,
            log_bandwidth=float(np.log(bandwidth)),
            log_scale=float(0.5 * np.log(scale2)),
            log_area=float(np.log(area)),
            log_amplitude=float(np.log(amplitude)),
            log_jitter=float(np.log(jitter)),
        )

    @property
    def n_components(self):
        return len(self.nets)

    @property
    def bandwidth(self):
        return float(np.exp(self.log_bandwidth))

    @property
    def scale(self):
        return float(np.exp(self.log_scale))

    @property
    def area(self):
        return float(np.exp(self.log_area))

    @property
    def amplitude(self):
        return float(np.exp(self.log_amplitude))

    @property
    def jitter(self):
        return float(np.exp(self.log_jitter))

    def copy(self):
        return copy.deepcopy(self)

    def zeros_like(self):
        return DeepKernelParams(
            nets=[n.zeros_like() for n in self.nets],
            log_bandwidth=0.0, log_scale=0.0, log_area=0.0, log_amplitude=0.0,
            log_jitter=0.0, train_area=self.train_area,
        )

    def _scalar_names(self):
        return [n for n in _SCALARS if n != "log_area" or self.train_area]

    def pack(self):
        """Flatten the trainable parameters into one vector."""
        parts = []
        for net in self.nets:
            for w, b in zip(net.weights, net.biases):
                parts.append(w.ravel())
                parts.append(b.ravel())
        parts.append(np.array([getattr(self, n) for n in self._scalar_names()]))
        return np.concatenate(parts)

    def unpack(self, vec):
        """Inverse of :meth:`pack`; returns a new instance."""
        n_expected = len(self.pack())
        if len(vec) != n_expected:
            raise ValueError(f"vector length {len(vec)} does not match parameter count {n_expected}")
        out = self.copy()
        i = 0
        for net in out.nets:
            for l in range(len(net.weights)):
                w, b = net.weights[l], net.biases[l]
                net.weights[l] = np.array(vec[i:i + w.size]).reshape(w.shape)
                i += w.size
                net.biases[l] = np.array(vec[i:i + b.size])
                i += b.size
        for n in self._scalar_names():
            setattr(out, n, float(vec[i]))
            i += 1
        return out

    def to_dict(self):
        return {
            "nets": [
                {"weights": [w.tolist() for w in n.weights],
                 "biases": [b.tolist() for b in n.biases]}
                for n in self.nets
            ],
            **{n: getattr(self, n) for n in (*_SCALARS, "log_jitter")},
            "train_area": self.train_area,
        }

    @classmethod
    def from_dict(cls, d):
        nets = [FeatureNet([np.asarray(w, float) for w in n["weights"]],
                           [np.asarray(b, float) for b in n["biases"]]) for n in d["nets"]]
        return cls(nets=nets, train_area=bool(d["train_area"]),
                   **{n: float(d[n]) for n in (*_SCALARS, "log_jitter")})


# ---------------------------------------------------------------------------
# Closed-form pieces
# ---------------------------------------------------------------------------


def _ellipse_entries(px, py, scale2, area):
    # (rho/2) cos 2a = (px^2 - py^2)/2 and (rho/2) sin 2a = px*py, so the
    # matrix is polynomial in psi and the psi = 0 angle never matters.
    rho = px * px + py * py
    q = np.sqrt(4.0 * area**2 + rho**2 * np.pi**2) / TWO_PI
    half = 0.5 * (px * px - py * py)
    off = px * py
    return scale2 * (q + half), scale2 * off, scale2 * (q - half), q


def focus_to_covariance(psi, scale, area):
    """Local covariance of the smoothing kernel whose ellipse has foci ``+-psi``.

    Returns an array of shape ``psi.shape[:-1] + (2, 2)``.
    """
    psi = np.asarray(psi, dtype=float)
    a, b, c, _ = _ellipse_entries(psi[..., 0], psi[..., 1], scale**2, area)
    return np.stack([np.stack([a, b], -1), np.stack([b, c], -1)], -2)


def ellipse_axes(psi, area):
    """Semi-major and semi-minor axes of the fixed-area ellipse with foci ``+-psi``."""
    psi = np.asarray(psi, dtype=float)
    rho = np.sum(psi**2, axis=-1)
    q = np.sqrt(4.0 * area**2 + rho**2 * np.pi**2) / TWO_PI
    return np.sqrt(q + 0.5 * rho), np.sqrt(q - 0.5 * rho)


def spatial_component(s, s2, cov, cov2):
    """Convolution of two Gaussian densities centred at ``s`` and ``s2``."""
    d = np.asarray(s2, float) - np.asarray(s, float)
    total = np.asarray(cov, float) + np.asarray(cov2, float)
    det = np.linalg.det(total)
    if not det > 0:
        raise np.linalg.LinAlgError("sum of local covariances is singular")
    quad = d @ np.linalg.solve(total, d)
    return float(np.exp(-0.5 * quad) / (TWO_PI * np.sqrt(det)))


def temporal_kernel(t, t2, bandwidth):
    dt = np.asarray(t, float) - np.asarray(t2, float)
    return np.exp(-0.5 * dt**2 / bandwidth**2)


# ---------------------------------------------------------------------------
# Gram matrices with an explicit reverse pass
# ---------------------------------------------------------------------------


@dataclass
class _Features:
    """Per-point quantities; spatial ones live on the unique locations."""

    t: np.ndarray  # (n,)
    s: np.ndarray  # (n, 2)
    inv: np.ndarray  # (n,) index into unique locations
    uniq: np.ndarray  # (u, 2)
    psi: np.ndarray  # (u, R, 2)
    w: np.ndarray  # (u, R)
    g: np.ndarray  # (u, R)
    ent: tuple  # local covariance entries a, b, c, each (u, R)
    q: np.ndarray  # (u, R)
    acts: list = field(default_factory=list)


def _features(params, X):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("coordinates must have shape (n, 3)")
    s = X[:, 1:3]
    uniq, inv = np.unique(s, axis=0, return_inverse=True)
    outs, acts = [], []
    for net in params.nets:
        out, a = net.forward(uniq)
        outs.append(out)
        acts.append(a)
    out = np.stack(outs, axis=1)  # (u, R, 3)
    psi = out[..., :2]
    w = softmax(out[..., 2], axis=1)
    a, b, c, q = _ellipse_entries(psi[..., 0], psi[..., 1], params.scale**2, params.area)
    return _Features(X[:, 0], s, inv.reshape(-1), uniq, psi, w, np.sqrt(w), (a, b, c), q, acts)


@dataclass
class _Tape:
    params: DeepKernelParams
    fp: _Features
    fq: _Features
    diag: bool
    K: np.ndarray
    cache: dict


def _onehot(inv, u):
    O = np.zeros((len(inv), u))
    O[np.arange(len(inv)), inv] = 1.0
    return O


def _pair_terms(sp, sq, ep, eq, gp, gq):
    """Spatial convolution terms for every pair of rows of ``sp`` and ``sq``.

    Inputs broadcast against each other; the last axis of the entries and
    weights is the component axis.
    """
    dx = sq[..., 0] - sp[..., 0]
    dy = sq[..., 1] - sp[..., 1]
    A = ep[0] + eq[0]
    B = ep[1] + eq[1]
    C = ep[2] + eq[2]
    det = A * C - B * B
    v1 = (C * dx - B * dy) / det
    v2 = (A * dy - B * dx) / det
    U = np.exp(-0.5 * (dx * v1 + dy * v2)) / (TWO_PI * np.sqrt(det))
    W = gp * gq * U
    return dict(A=A, B=B, C=C, det=det, v1=v1, v2=v2, U=U, W=W, gp=gp, gq=gq)


def gram_forward(params, X, X2=None, diag=False):
    """Kernel block plus a tape for :func:`gram_backward`.

    ``diag=True`` evaluates ``k(X[i], X[i])`` and ignores ``X2``. No jitter is
    added here; :func:`gram` and :func:`gram_diag` add it for self-covariances.
    The spatial factor is evaluated once per pair of distinct locations.
    """
    fp = _features(params, X)
    fq = fp if (X2 is None or X2 is X or diag) else _features(params, X2)
    bw2 = params.bandwidth**2
    amp = params.amplitude
    if diag:
        ent = [e[fp.inv] for e in fp.ent]
        g = fp.g[fp.inv]
        zero = np.zeros((len(fp.t), 1, 2))
        ch = _pair_terms(zero, zero, ent, ent, g, g)
        K = amp * ch["W"].sum(axis=-1)
        return K, _Tape(params, fp, fp, True, K, ch)
    dt = fp.t[:, None] - fq.t[None, :]
    T = np.exp(-0.5 * dt**2 / bw2)
    ch = _pair_terms(fp.uniq[:, None, None, :], fq.uniq[None, :, None, :],
                     [e[:, None, :] for e in fp.ent], [e[None, :, :] for e in fq.ent],
                     fp.g[:, None, :], fq.g[None, :, :])
    S = ch["W"].sum(axis=-1)[fp.inv][:, fq.inv]
    K = amp * T * S
    ch.update(dt=dt, T=T)
    return K, _Tape(params, fp, fq, False, K, ch)


def _point_backward(params, f, grad, d_t, d_s, d_ent, d_g, coords=True, per_point=None):
    """Chain per-location gradients through the ellipse map, softmax and nets.

    ``d_ent`` and ``d_g`` are ``(u, R)`` arrays on the unique locations.
    ``per_point`` returns the same quantities for every point; it is only
    called when coordinate gradients are needed and locations repeat.
    Returns the gradient with respect to the coordinates ``(n, 3)`` (``None``
    when ``coords`` is false).
    """
    da, db, dc = d_ent
    dg = d_g
    scale2, area = params.scale**2, params.area
    a, b, c = f.ent
    px, py = f.psi[..., 0], f.psi[..., 1]
    rho = px * px + py * py
    dq = rho / (2.0 * f.q)
    dpx = scale2 * (da * (dq * px + px) + db * py + dc * (dq * px - px))
    dpy = scale2 * (da * (dq * py - py) + db * px + dc * (dq * py + py))
    grad.log_scale += 2.0 * float(np.sum(da * a + db * b + dc * c))
    if params.train_area:
        dq_dlog_area = area * area / (np.pi**2 * f.q)
        grad.log_area += float(np.sum(scale2 * dq_dlog_area * (da + dc)))

    gdg = f.g * dg
    dwraw = 0.5 * (gdg - f.w * gdg.sum(axis=1, keepdims=True))
    out_grad = np.stack([dpx, dpy, dwraw], axis=2)  # (u, R, 3)

    u = len(f.uniq)
    split = coords and u < len(f.t)
    if split:
        # Shared locations: the input gradient must not be pooled, so chain
        # each point separately through d(out)/d(ent, g) at its location.
        pt = _per_point_out_grad(params, f, *per_point())
    ds = np.zeros((len(f.t) if split else u, 2))
    for r, net in enumerate(params.nets):
        if split:
            acts = [x[f.inv] for x in f.acts[r]]
            gnet, gin = net.backward(acts, pt[:, r, :])
        else:
            gnet, gin = net.backward(f.acts[r], out_grad[:, r, :])
        for l in range(len(gnet.weights)):
            grad.nets[r].weights[l] += gnet.weights[l]
            grad.nets[r].biases[l] += gnet.biases[l]
        ds += gin
    if not coords:
        return None
    gx = np.empty((len(f.t), 3))
    gx[:, 0] = d_t
    gx[:, 1:] = d_s + (ds if split else ds[f.inv])
    return gx


def _per_point_out_grad(params, f, d_ent, d_g):
    """Gradient wrt network outputs for every point (not pooled by location)."""
    scale2 = params.scale**2
    psi, q, w, g = f.psi[f.inv], f.q[f.inv], f.w[f.inv], f.g[f.inv]
    px, py = psi[..., 0], psi[..., 1]
    dq = (px * px + py * py) / (2.0 * q)
    da, db, dc = d_ent
    dpx = scale2 * (da * (dq * px + px) + db * py + dc * (dq * px - px))
    dpy = scale2 * (da * (dq * py - py) + db * px + dc * (dq * py + py))
    gdg = g * d_g
    dwraw = 0.5 * (gdg - w * gdg.sum(axis=1, keepdims=True))
    return np.stack([dpx, dpy, dwraw], axis=2)


def _pool(f, x):
    out = np.zeros((len(f.uniq),) + x.shape[1:])
    np.add.at(out, f.inv, x)
    return out


def gram_backward(tape, G, coords=True):
    """Vector-Jacobian product of a kernel block.

    Given the upstream gradient ``G`` (same shape as the block), returns
    ``(grad_params, grad_X, grad_X2)`` where ``grad_params`` is a
    :class:`DeepKernelParams` holding gradients with respect to the
    unconstrained internals. For symmetric blocks (``X2`` omitted) the two
    coordinate gradients are already summed into ``grad_X`` and ``grad_X2``
    is ``None``. ``coords`` may be a bool or a pair of bools (one per side)
    and disables the coordinate gradients where false.
    """
    c1, c2 = (coords, coords) if isinstance(coords, bool) else coords
    params, ch = tape.params, tape.cache
    G = np.asarray(G, dtype=float)
    grad = params.zeros_like()
    amp = params.amplitude
    fp, fq = tape.fp, tape.fq
    det, v1, v2, U, W = ch["det"], ch["v1"], ch["v2"], ch["U"], ch["W"]
    # unit sensitivities of the spatial sum to the local entries and weights
    Fa = W * 0.5 * (v1 * v1 - ch["C"] / det)
    Fb = W * (v1 * v2 + ch["B"] / det)
    Fc = W * 0.5 * (v2 * v2 - ch["A"] / det)

    H = G * tape.K
    grad.log_amplitude = float(H.sum())

    if tape.diag:
        E = (G * amp)[:, None]
        ent = (2 * E * Fa, 2 * E * Fb, 2 * E * Fc)
        dg = E * (ch["gq"] + ch["gp"]) * U
        d_t = np.zeros_like(fp.t)
        d_s = np.zeros((len(d_t), 2))
        gx = _point_backward(params, fp, grad, d_t, d_s, tuple(_pool(fp, e) for e in ent),
                             _pool(fp, dg), c1, per_point=lambda: (ent, dg))
        return grad, gx, None

    bw2 = params.bandwidth**2
    grad.log_bandwidth = float(np.sum(H * ch["dt"] ** 2) / bw2)
    dtp = -H * ch["dt"] / bw2
    E = G * amp * ch["T"]
    Op, Oq = _onehot(fp.inv, len(fp.uniq)), _onehot(fq.inv, len(fq.uniq))
    E_nq = E @ Oq  # (n, uq)
    E_pm = Op.T @ E  # (up, m)
    E_u = Op.T @ E_nq  # (up, uq)
    Vx = np.sum(W * v1, axis=-1)
    Vy = np.sum(W * v2, axis=-1)
    Dp = ch["gq"] * U  # d(sum)/d(g_p)
    Dq = ch["gp"] * U
    Eu = E_u[..., None]

    def side(axis):
        f = fp if axis == 0 else fq
        if axis == 0:
            d_t = dtp.sum(axis=1)
            d_s = np.stack([np.sum(E_nq * Vx[fp.inv], axis=1),
                            np.sum(E_nq * Vy[fp.inv], axis=1)], axis=1)
            ent = tuple((Eu * F).sum(axis=1) for F in (Fa, Fb, Fc))
            dg = (Eu * Dp).sum(axis=1)

            def per_point():
                return (tuple(np.einsum("nv,nvr->nr", E_nq, F[fp.inv]) for F in (Fa, Fb, Fc)),
                        np.einsum("nv,nvr->nr", E_nq, Dp[fp.inv]))
        else:
            d_t = -dtp.sum(axis=0)
            d_s = -np.stack([np.sum(E_pm * Vx[:, fq.inv], axis=0),
                             np.sum(E_pm * Vy[:, fq.inv], axis=0)], axis=1)
            ent = tuple((Eu * F).sum(axis=0) for F in (Fa, Fb, Fc))
            dg = (Eu * Dq).sum(axis=0)

            def per_point():
                return (tuple(np.einsum("um,umr->mr", E_pm, F[:, fq.inv]) for F in (Fa, Fb, Fc)),
                        np.einsum("um,umr->mr", E_pm, Dq[:, fq.inv]))
        return d_t, d_s, ent, dg, per_point

    if fq is fp:
        t0, s0, e0, g0, pp0 = side(0)
        t1, s1, e1, g1, pp1 = side(1)

        def both():
            (a0, b0), (a1, b1) = pp0(), pp1()
            return tuple(x + y for x, y in zip(a0, a1)), b0 + b1

        gx = _point_backward(params, fp, grad, t0 + t1, s0 + s1,
                             tuple(x + y for x, y in zip(e0, e1)), g0 + g1, c1, per_point=both)
        return grad, gx, None
    t0, s0, e0, g0, pp0 = side(0)
    gx = _point_backward(params, fp, grad, t0, s0, e0, g0, c1, per_point=pp0)
    t1, s1, e1, g1, pp1 = side(1)
    gx2 = _point_backward(params, fq, grad, t1, s1, e1, g1, c2, per_point=pp1)
    return grad, gx, gx2


def gram(X, X2=None, params=None):
    """Kernel matrix between ``X`` and ``X2``; adds jitter when ``X2`` is omitted."""
    K, _ = gram_forward(params, X, X2)
    if X2 is None:
        K = K + params.jitter * np.eye(len(K))
    return K


def gram_diag(X, params, jitter=True):
    """``k(x, x)`` for each row of ``X`` (plus jitter by default)."""
    K, _ = gram_forward(params, X, diag=True)
    return K + params.jitter if jitter else K


def kernel(x, x2, params):
    """Single kernel evaluation ``k(x, x2)`` without jitter."""
    K, _ = gram_forward(params, np.atleast_2d(x), np.atleast_2d(x2))
    return float(K[0, 0])


def kernel_grad(X, X2, params, G=None):
    """Reverse-mode gradient of ``sum(G * K(X, X2))``.

    With ``G`` omitted the gradient of the sum of all entries is returned.
    Pass ``X2=None`` for a symmetric self-block.
    """
    K, tape = gram_forward(params, X, X2)
    if G is None:
        G = np.ones_like(K)
    return gram_backward(tape, G)
