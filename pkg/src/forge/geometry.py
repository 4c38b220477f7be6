"""Hypersurfaces, their localization, the flattened surface psi and the
Lorentz-graph map between (t, x) and (s, y)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .core import ModelParams, chi


class GeometryError(RuntimeError):
    pass


def _pts(x, dim):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != dim:
        x = x[..., None] if dim == 1 else x
    return x


class Hypersurface:
    """A graph t = phi(x) with analytic (or spline) gradient.

    phi and grad take points of shape (..., N).
    """

    def __init__(self, dim: int, phi: Callable, grad: Callable, label: str = "custom"):
        self.dim = dim
        self._phi = phi
        self._grad = grad
        self.label = label

    def phi(self, x):
        return self._phi(_pts(x, self.dim))

    def grad(self, x):
        return self._grad(_pts(x, self.dim))

    @classmethod
    def zero(cls, dim):
        return cls(dim, lambda x: np.zeros(x.shape[:-1]), lambda x: np.zeros_like(x), "zero")

    @classmethod
    def linear(cls, dim, ell):
        e1 = np.eye(dim)[0]
        return cls(dim, lambda x: ell * x[..., 0],
                   lambda x: np.broadcast_to(ell * e1, x.shape).copy(), f"linear {ell}")

    @classmethod
    def quadratic(cls, dim, a, ell=0.0, axis_only=False):
        """phi = ell*x1 + a*|x|^2 (or a*x1^2 when axis_only)."""
        e1 = np.eye(dim)[0]

        def phi(x):
            q = x[..., 0] ** 2 if axis_only else np.sum(x * x, axis=-1)
            return ell * x[..., 0] + a * q

        def grad(x):
            g = np.zeros_like(x)
            if axis_only:
                g[..., 0] = 2 * a * x[..., 0]
            else:
                g = 2 * a * x
            return g + ell * e1

        return cls(dim, phi, grad, f"quadratic {a}")

    @classmethod
    def tabulated(cls, x_nodes, values):
        """One-dimensional surface from samples, cubic-spline interpolated."""
        sp = CubicSpline(np.asarray(x_nodes, float), np.asarray(values, float))
        dsp = sp.derivative()
        return cls(1, lambda x: sp(x[..., 0]), lambda x: dsp(x[..., 0])[..., None], "tabulated")

    def rotated(self, Q: np.ndarray) -> "Hypersurface":
        """Surface in coordinates x' = Q x (Q orthogonal)."""
        Q = np.asarray(Q, float)
        return Hypersurface(self.dim, lambda x: self._phi(x @ Q),
                            lambda x: self._grad(x @ Q) @ Q.T, self.label)


def householder_to_e1(v) -> np.ndarray:
    """Orthogonal Q with Q v = |v| e1 (identity if v is already along +e1)."""
    v = np.asarray(v, float)
    n = len(v)
    nv = np.linalg.norm(v)
    e1 = np.eye(n)[0]
    if nv == 0:
        return np.eye(n)
    u = v / nv - e1
    nu = np.linalg.norm(u)
    if nu < 1e-14:
        return np.eye(n)
    u = u / nu
    return np.eye(n) - 2.0 * np.outer(u, u)


def align_surface(surface: Hypersurface):
    """Rotate so that grad phi(0) = ell e1 with ell >= 0."""
    g0 = surface.grad(np.zeros(surface.dim))
    Q = householder_to_e1(g0)
    return surface.rotated(Q), Q


def _ball_samples(dim, radius, n_axis):
    ax = np.linspace(-radius, radius, n_axis)
    mesh = np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return mesh[np.sum(mesh ** 2, axis=-1) <= radius ** 2 * (1 + 1e-12)]


_DEFAULT_SAMPLES = {1: 4097, 2: 257, 3: 49, 4: 21}


@dataclass
class LocalizedSurface:
    surface: Hypersurface
    ell: float
    r: float

    @property
    def dim(self):
        return self.surface.dim

    def phi(self, x):
        x = _pts(x, self.dim)
        rr = np.sqrt(np.sum(x * x, axis=-1))
        lin = self.ell * x[..., 0]
        return (self.surface.phi(x) - lin) * chi(rr / self.r) + lin

    def grad(self, x):
        x = _pts(x, self.dim)
        rr = np.sqrt(np.sum(x * x, axis=-1))
        e1 = np.eye(self.dim)[0]
        c = chi(rr / self.r)
        dc = chi(rr / self.r, 1)
        safe = np.where(rr > 0, rr, 1.0)
        bracket = self.surface.phi(x) - self.ell * x[..., 0]
        g = (self.surface.grad(x) - self.ell * e1) * c[..., None]
        g = g + (bracket * dc / (self.r * safe))[..., None] * x
        return g + self.ell * e1


def gradient_bound(params: ModelParams, ell: float) -> float:
    return (1.0 - ell) * min(params.psi_bound, 0.5)


def localize(surface: Hypersurface, params: ModelParams, r_floor: float = 2.0 ** -30,
             n_axis: Optional[int] = None, margin: float = 1.1) -> LocalizedSurface:
    """Largest r = 2^-m (m >= 1) whose cutoff keeps grad phi~ close to ell e1."""
    dim = surface.dim
    if abs(float(surface.phi(np.zeros(dim)))) > 1e-14:
        raise GeometryError("phi(0) must vanish")
    g0 = np.atleast_1d(surface.grad(np.zeros(dim)))
    ell = float(g0[0])
    if ell < 0 or np.any(np.abs(g0[1:]) > 1e-12):
        raise GeometryError("grad phi(0) must be ell*e1 with ell >= 0; rotate first")
    if not ell < 1:
        raise GeometryError("surface is not space-like at 0")
    bound = gradient_bound(params, ell)
    n_axis = n_axis or _DEFAULT_SAMPLES[dim]
    r = 0.5
    while r >= r_floor:
        loc = LocalizedSurface(surface, ell, r)
        xs = _ball_samples(dim, 2 * r, n_axis)
        dev = np.max(np.linalg.norm(loc.grad(xs) - ell * np.eye(dim)[0], axis=-1))
        if dev * margin <= bound:
            if np.max(np.linalg.norm(surface.grad(xs[np.linalg.norm(xs, axis=-1) < r]), axis=-1),
                      initial=0.0) >= 1:
                raise GeometryError("|grad phi| >= 1 on the localization patch")
            loc.deviation = float(dev)
            loc.bound = bound
            return loc
        r /= 2
    raise GeometryError(f"no localization radius down to {r_floor} meets the gradient bound")


class SurfaceBundle:
    """Localized surface together with the flattened graph psi."""

    def __init__(self, local: LocalizedSurface, params: ModelParams, tol: float = 1e-12):
        self.local = local
        self.params = params
        self.dim = local.dim
        self.ell = local.ell
        self.r = local.r
        self.tol = tol
        ell = self.ell
        self.gamma = math.sqrt(1.0 - ell * ell)
        self.slope_lo = math.sqrt((1 - ell) / (1 + ell))
        self.slope_hi = math.sqrt((1 + ell) / (1 - ell))
        self.lambda_bound = params.psi_bound
        # psi vanishes once |X(y)| > 2r; X1 differs from y1 by at most the slope
        reach = 2 * self.r * (1 + ell) / self.gamma + 2 * self.r
        self.R_support = max(params.R, reach)

    def phi_tilde(self, x):
        return self.local.phi(x)

    def Phi(self, x1, ybar):
        x = np.concatenate([np.asarray(x1, float)[..., None], ybar], axis=-1)
        return (x1 - self.ell * self.local.phi(x)) / self.gamma

    def bracket(self, y):
        y = _pts(y, self.dim)
        ybar = y[..., 1:]
        y1 = y[..., 0]
        d = y1 - self.Phi(np.zeros(y1.shape), ybar)
        a, b = d / self.slope_lo, d / self.slope_hi
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        pad = 1e-12 * (1 + np.abs(hi - lo))
        return lo - pad, hi + pad

    def solve_X1(self, y, tol: Optional[float] = None, max_iter: int = 200):
        """X1(y) solving Phi(X1, ybar) = y1 by bracketed bisection."""
        tol = self.tol if tol is None else tol
        y = _pts(y, self.dim)
        if self.ell == 0.0:
            return y[..., 0].copy()
        y1 = y[..., 0]
        ybar = y[..., 1:]
        lo, hi = self.bracket(y)
        flo = self.Phi(lo, ybar) - y1
        fhi = self.Phi(hi, ybar) - y1
        if np.any(flo > 0) or np.any(fhi < 0):
            raise GeometryError("bracket does not straddle the root; Phi not monotone")
        width = tol / (2.0 * max(1.0, self.slope_hi))
        for _ in range(max_iter):
            mid = 0.5 * (lo + hi)
            fm = self.Phi(mid, ybar) - y1
            up = fm > 0
            hi = np.where(up, mid, hi)
            lo = np.where(up, lo, mid)
            if np.all(hi - lo <= width):
                break
        else:
            raise GeometryError("solve_X1 did not converge")
        x1 = 0.5 * (lo + hi)
        # one guarded secant polish
        flo = self.Phi(lo, ybar) - y1
        fhi = self.Phi(hi, ybar) - y1
        den = fhi - flo
        sec = np.where(den != 0, lo - flo * (hi - lo) / np.where(den != 0, den, 1.0), x1)
        sec = np.clip(sec, lo, hi)
        better = np.abs(self.Phi(sec, ybar) - y1) < np.abs(self.Phi(x1, ybar) - y1)
        return np.where(better, sec, x1)

    def X(self, y):
        y = _pts(y, self.dim)
        x = y.copy()
        x[..., 0] = self.solve_X1(y)
        return x

    def psi(self, y):
        x = self.X(y)
        return (self.local.phi(x) - self.ell * x[..., 0]) / self.gamma

    def psi_grad(self, y):
        """Gradient of psi from the chain-rule identities at x = X(y)."""
        x = self.X(y)
        g = self.local.grad(x)
        ell = self.ell
        d1 = (g[..., 0] - ell) / (1.0 - ell * g[..., 0])
        out = np.empty_like(g)
        out[..., 0] = d1
        out[..., 1:] = g[..., 1:] * (1.0 + ell * d1)[..., None] / self.gamma
        return out

    def psi_hessian(self, y, step: float = 1e-5):
        y = _pts(y, self.dim)
        H = np.empty(y.shape[:-1] + (self.dim, self.dim))
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = step
            H[..., :, i] = (self.psi_grad(y + e) - self.psi_grad(y - e)) / (2 * step)
        return 0.5 * (H + np.swapaxes(H, -1, -2))

    def psi_laplacian(self, y, step: float = 1e-5):
        return np.trace(self.psi_hessian(y, step), axis1=-2, axis2=-1)

    def verify(self, n_axis: Optional[int] = None) -> dict:
        """Check psi(0)=0, the gradient bound and compact support on a sample."""
        dim = self.dim
        n_axis = n_axis or _DEFAULT_SAMPLES[dim]
        R = self.R_support
        reach = 2 * self.r * (1 + self.ell) / self.gamma + 2 * self.r
        sets = []
        for half in (1.25 * R, 1.1 * reach):
            ax = np.linspace(-half, half, n_axis)
            sets.append(np.stack(np.meshgrid(*([ax] * dim), indexing="ij"), axis=-1).reshape(-1, dim))
        ys = np.concatenate(sets)
        g = self.psi_grad(ys)
        gmax = float(np.max(np.abs(g)))
        if abs(float(self.psi(np.zeros(dim)))) > 1e-12:
            raise GeometryError("psi(0) != 0")
        if gmax > self.lambda_bound:
            i = int(np.argmax(np.max(np.abs(g), axis=-1)))
            raise GeometryError(f"grad psi bound violated at y={ys[i]}: {gmax}")
        outside = np.linalg.norm(ys, axis=-1) >= R
        tail = float(np.max(np.abs(self.psi(ys[outside])), initial=0.0))
        if tail > 1e-12:
            raise GeometryError("psi is not supported inside R_support")
        return {"grad_psi_max": gmax, "bound": self.lambda_bound, "tail": tail}


def build_bundle(surface: Hypersurface, params: ModelParams, **kw) -> SurfaceBundle:
    if surface.dim != params.dim:
        raise GeometryError("surface and model dimensions differ")
    aligned, _ = align_surface(surface) if surface.dim > 1 else (surface, None)
    if surface.dim == 1 and float(np.atleast_1d(surface.grad(np.zeros(1)))[0]) < 0:
        flip = surface
        aligned = Hypersurface(1, lambda x: flip.phi(-x), lambda x: -flip.grad(-x), surface.label)
    local = localize(aligned, params, **kw)
    return SurfaceBundle(local, params)


class LorentzGraphMap:
    """(t, x) -> (s, y) combining a boost of speed ell with the graph shear."""

    def __init__(self, bundle: SurfaceBundle, tau0: float):
        self.b = bundle
        self.tau0 = float(tau0)
        self.ell = bundle.ell
        self.gamma = bundle.gamma

    def forward(self, t, x):
        x = _pts(x, self.b.dim)
        t = np.asarray(t, float)
        y = x.copy()
        y[..., 0] = (x[..., 0] - self.ell * (t - self.tau0)) / self.gamma
        s = self.b.psi(y) - (t - self.tau0 - self.ell * x[..., 0]) / self.gamma
        return s, y

    def inverse(self, s, y):
        y = _pts(y, self.b.dim)
        s = np.asarray(s, float)
        x = y.copy()
        X1 = self.b.solve_X1(y)
        x[..., 0] = X1 - self.ell * s / self.gamma
        t = self.tau0 + self.ell * x[..., 0] + self.gamma * (self.b.psi(y) - s)
        return t, x

    def jacobian_det(self, t, x, step: float = 1e-4):
        x = _pts(x, self.b.dim)
        t = np.asarray(t, float)
        n = self.b.dim + 1
        Jm = np.empty(t.shape + (n, n))
        for i in range(n):
            dt = step if i == 0 else 0.0
            dx = np.zeros(self.b.dim)
            if i > 0:
                dx[i - 1] = step
            sp, yp = self.forward(t + dt, x + dx)
            sm, ym = self.forward(t - dt, x - dx)
            Jm[..., 0, i] = (sp - sm) / (2 * step)
            Jm[..., 1:, i] = (yp - ym) / (2 * step)
        return np.linalg.det(Jm)


class InfluenceRegion:
    def __init__(self, bundle: SurfaceBundle, delta0: float):
        ell = bundle.ell
        self.b = bundle
        self.delta0 = float(delta0)
        self.tau0 = math.sqrt((1 - ell) / (1 + ell)) * delta0 / 6.0
        self.eps0 = (1 - ell) / (2 + ell) * self.tau0
        self.eps = min(self.eps0 / 4, bundle.r)

    def in_T(self, t, x):
        x = _pts(x, self.b.dim)
        t = np.asarray(t, float)
        rad = np.linalg.norm(x, axis=-1)
        return (t >= 0) & (t < self.tau0 + self.b.phi_tilde(x)) & (rad < self.tau0 + self.eps0 - t)

    @staticmethod
    def in_backward_cone(t, x, t0, x0, slope=1.0):
        x = np.asarray(x, float)
        return (np.asarray(t) < t0) & (np.linalg.norm(x - x0, axis=-1) < slope * (t0 - np.asarray(t)))

    @staticmethod
    def in_truncated_cone(t, x, x0, R, tau):
        x = np.asarray(x, float)
        t = np.asarray(t, float)
        return (t >= 0) & (t < tau) & (np.linalg.norm(x - x0, axis=-1) < R - t)


def eta_factor(sigma: float, delta: float, ell: float) -> float:
    return (1 - sigma + delta) * math.sqrt((1 - ell) / (1 + ell))


def max_sigma_prime(sigma: float, delta: float, ell: float) -> float:
    """Largest sigma' with (ell + sigma' c)/(1 - sigma' c) <= sigma - delta."""
    c = math.sqrt((1 + ell) / (1 - ell))
    m = sigma - delta
    if m <= ell:
        raise ValueError("need sigma - delta > ell")
    return (m - ell) / (c * (1 + m))


def cone_image_check(lmap: LorentzGraphMap, region: InfluenceRegion, x0, sigma: float,
                     sigma_prime: Optional[float] = None, eta: Optional[float] = None,
                     t: float = 0.0, delta: float = 0.1, samples: int = 20000, seed: int = 0):
    """Monte-Carlo check that the small cone L(s(t), sigma') lies in Lambda(K(t)).

    Returns (ok, worst margin, falsified (s', y) points).
    """
    b = lmap.b
    ell = b.ell
    if not ell < sigma <= 1:
        raise ValueError("need ell < sigma <= 1")
    x0 = np.atleast_1d(np.asarray(x0, float))
    if np.linalg.norm(x0) > region.eps0 / 4 + 1e-15:
        raise ValueError("x0 outside eps0/4")
    if sigma_prime is None:
        sigma_prime = max_sigma_prime(sigma, delta, ell)
    if eta is None:
        eta = eta_factor(sigma, delta, ell)
    T0 = lmap.tau0 + float(b.phi_tilde(x0))
    s0, y0 = lmap.forward(T0, x0)
    st = eta * (T0 - t)
    rng = np.random.default_rng(seed)
    sp = st * rng.random(samples) ** (1.0 / (b.dim + 1))
    dirs = rng.normal(size=(samples, b.dim))
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    rad = sigma_prime * sp * rng.random(samples) ** (1.0 / b.dim)
    ys = y0 + dirs * rad[:, None]
    tp, xs = lmap.inverse(sp, ys)
    m_time_lo = tp - t
    m_time_hi = T0 - tp
    m_space = sigma * (T0 - tp) - np.linalg.norm(xs - x0, axis=-1)
    margin = np.minimum(np.minimum(m_time_lo, m_time_hi), m_space)
    bad = margin <= 0
    pts = np.concatenate([sp[bad, None], ys[bad]], axis=-1)
    return bool(not np.any(bad)), float(np.min(margin)), pts


def roundtrip_checks(bundle: SurfaceBundle, tau0: float, points: int = 10000, seed: int = 0,
                     step: float = 1e-4) -> dict:
    """Largest errors of Lambda^-1(Lambda), |det J| - 1 and Phi(X1(y)) - y1 on random points.

    Points are uniform in t in [0, tau0] and x in the box |x_i| <= 2r.
    """
    rng = np.random.default_rng(seed)
    dim = bundle.dim
    lmap = LorentzGraphMap(bundle, tau0)
    t = rng.uniform(0.0, tau0, points)
    x = rng.uniform(-2 * bundle.r, 2 * bundle.r, (points, dim))
    s, y = lmap.forward(t, x)
    t2, x2 = lmap.inverse(s, y)
    inv = float(max(np.max(np.abs(t2 - t)), np.max(np.abs(x2 - x))))
    det = float(np.max(np.abs(np.abs(lmap.jacobian_det(t, x, step)) - 1.0)))
    X1 = bundle.solve_X1(y)
    phi_err = float(np.max(np.abs(bundle.Phi(X1, y[..., 1:]) - y[..., 0])))
    return {"points": points, "inverse": inv, "det": det, "solve_X1": phi_err,
            "tol": bundle.tol}
