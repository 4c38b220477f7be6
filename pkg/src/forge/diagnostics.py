"""Pullback to the original variables, the concentration functional and rate fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .ansatz import AnsatzStack, eval_V0
from .fitting import decay_fit
from .geometry import InfluenceRegion, LorentzGraphMap


class PullbackError(ValueError):
    pass


class GridTrajectory:
    """Linear interpolation of a solver trajectory in (s, y).

    With a stack, V0 is evaluated in closed form at the exact (s, y) and only
    v - V0 is interpolated; V0 ~ s^(-2/(p-1)) is badly resolved by a uniform
    s-grid near S_n, while the remainder is smooth there.
    """

    def __init__(self, traj, stack: Optional[AnsatzStack] = None):
        g = traj.grid
        axes = (np.asarray(traj.s),) + (g.axis,) * g.dim
        self.dim = g.dim
        self.stack = stack
        self.s_lo, self.s_hi = float(traj.s[0]), float(traj.s[-1])
        self.y_max = float(g.axis[-1])
        v, vs = traj.v, traj.vs
        if stack is not None:
            v = v - stack.V0(traj.s)
            vs = vs - stack.dV0(traj.s)
        vy = np.gradient(v, g.h, axis=1, edge_order=2)
        opts = dict(method="linear", bounds_error=False, fill_value=np.nan)
        self._v = RegularGridInterpolator(axes, v, **opts)
        self._vs = RegularGridInterpolator(axes, vs, **opts)
        self._vy = RegularGridInterpolator(axes, vy, **opts)

    def covers(self, s, y):
        return (s >= self.s_lo) & (s <= self.s_hi) & np.all(np.abs(y) <= self.y_max, axis=-1)

    def _pts(self, s, y):
        s = np.asarray(s, float)
        return np.concatenate([np.broadcast_to(s[..., None], y.shape[:-1] + (1,)), y], axis=-1)

    def _exact(self, s, y, deriv):
        if self.stack is None:
            return 0.0
        out = eval_V0(self.stack, s, y, deriv)
        return out[..., 0] if deriv == "grad" else out

    def v(self, s, y):
        return self._v(self._pts(s, y)) + self._exact(s, y, "")

    def v_s(self, s, y):
        return self._vs(self._pts(s, y)) + self._exact(s, y, "s")

    def v_y1(self, s, y):
        return self._vy(self._pts(s, y)) + self._exact(s, y, "grad")


class AnalyticTrajectory:
    """v = V0 in closed form (no correction, no error term)."""

    def __init__(self, stack: AnsatzStack, s_lo: float = 0.0, s_hi: float = math.inf):
        self.stack = stack
        self.dim = stack.params.dim
        self.s_lo, self.s_hi = s_lo, s_hi

    def covers(self, s, y):
        return (s > self.s_lo) & (s <= self.s_hi)

    def _safe(self, s):
        return np.where(s > 0, s, 1.0)

    def v(self, s, y):
        return eval_V0(self.stack, self._safe(s), y)

    def v_s(self, s, y):
        return eval_V0(self.stack, self._safe(s), y, "s")

    def v_y1(self, s, y):
        return eval_V0(self.stack, self._safe(s), y, "grad")[..., 0]


@dataclass
class PullbackField:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    ut: np.ndarray
    mask: np.ndarray        # True where the node is valid
    s: np.ndarray
    y: np.ndarray


def pullback(traj, lmap: LorentzGraphMap, t, x, region: Optional[InfluenceRegion] = None,
             delta0: Optional[float] = None) -> PullbackField:
    """u(t, x) = v(Lambda(t, x)) with d_t u by the chain rule.

    t and x broadcast against each other (x has a trailing dim axis). Nodes
    outside the trajectory coverage, outside the region T (if given) or with
    s outside (0, delta0/2) (if delta0 given) are masked, never extrapolated.
    """
    x = np.asarray(x, float)
    if traj.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    t = np.asarray(t, float)
    t, x = np.broadcast_to(t, np.broadcast_shapes(t.shape, x.shape[:-1])), x
    x = np.broadcast_to(x, t.shape + (x.shape[-1],))
    s, y = lmap.forward(t, x)
    mask = traj.covers(s, y)
    if region is not None:
        mask &= region.in_T(t, x)
    if delta0 is not None:
        mask &= (s > 0) & (s < delta0 / 2)
    s_eval = np.where(mask, s, traj.s_lo if np.isfinite(traj.s_lo) and traj.s_lo > 0 else 1.0)
    y_eval = np.where(mask[..., None], y, 0.0)
    v = traj.v(s_eval, y_eval)
    vs = traj.v_s(s_eval, y_eval)
    vy = traj.v_y1(s_eval, y_eval)
    b = lmap.b
    ell, gam = lmap.ell, lmap.gamma
    psi_y1 = b.psi_grad(y_eval)[..., 0] if ell != 0 else 0.0
    ut = -((1.0 + ell * psi_y1) * vs + ell * vy) / gam
    mask &= np.isfinite(v) & np.isfinite(ut)
    nan = np.nan
    return PullbackField(t, x, np.where(mask, v, nan), np.where(mask, ut, nan), mask, s, y)


def surface_time(lmap: LorentzGraphMap, x0) -> float:
    """tau0 + phi~(x0): the time where Lambda(., x0) reaches s = 0."""
    x0 = np.atleast_1d(np.asarray(x0, float))
    return float(lmap.tau0 + lmap.b.phi_tilde(x0[None])[0])


def blowup_series(traj, lmap, x0, d_values, region=None):
    """u(T - d, x0) for the distances d to the surface time T."""
    T = surface_time(lmap, x0)
    d = np.asarray(d_values, float)
    x = np.broadcast_to(np.atleast_1d(np.asarray(x0, float)), d.shape + (lmap.b.dim,))
    pb = pullback(traj, lmap, T - d, x, region)
    return pb


def blowup_rate_fit(traj, lmap, x0, d_lo: float, d_hi: Optional[float] = None,
                    points: int = 41, p: float = 3.0, region=None):
    """Fit of log u(T - d, x0) against log d over [d_lo, d_hi] (one decade by default)."""
    d_hi = 10 * d_lo if d_hi is None else d_hi
    d = np.geomspace(d_lo, d_hi, points)
    pb = blowup_series(traj, lmap, x0, d, region)
    if not np.all(pb.mask):
        raise PullbackError(f"{int(np.sum(~pb.mask))} nodes of the fit window are masked")
    return decay_fit("u(t,x0)", d, pb.u, (d_lo, d_hi), predicted=-2 / (p - 1)), pb


def chain_rule_error(traj, lmap, t, x, dt: float) -> float:
    """max |d_t u (chain rule) - central difference of u with step dt|."""
    pb = pullback(traj, lmap, t, x)
    up = pullback(traj, lmap, np.asarray(t) + dt, x).u
    um = pullback(traj, lmap, np.asarray(t) - dt, x).u
    fd = (up - um) / (2 * dt)
    ok = pb.mask & np.isfinite(fd)
    return float(np.max(np.abs(pb.ut[ok] - fd[ok])))


def _ball_rule(dim: int, radius, nodes: int):
    """Trapezoid nodes and weights on the ball |z| < radius (tensor grid, masked)."""
    z = np.linspace(-1.0, 1.0, nodes)
    w = np.full(nodes, z[1] - z[0])
    w[0] = w[-1] = 0.5 * (z[1] - z[0])
    mesh = np.stack(np.meshgrid(*([z] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    wt = np.prod(np.stack(np.meshgrid(*([w] * dim), indexing="ij"), axis=-1).reshape(-1, dim), axis=-1)
    inside = np.sum(mesh ** 2, axis=-1) <= 1.0 + 1e-12
    return mesh[inside], wt[inside]


def concentration(traj, lmap: LorentzGraphMap, x0, sigma: float, t_list, floor: float,
                  region: Optional[InfluenceRegion] = None, nodes_x: int = 65,
                  nodes_t: int = 200) -> np.ndarray:
    """(1/(T-t)) int_t^{T-floor} dt' int_{|x-x0| < sigma (T-t')} |d_t u|^2 dx.

    T = tau0 + phi~(x0). The t'-integral stops at distance `floor` from the
    surface: the trajectory only covers s >= S_n and the inner integral is
    not integrable up to T for the exact profile. Trapezoid rules in t'
    (geometric nodes in T - t') and in x (local nodes on the ball).
    """
    ell = lmap.ell
    if not sigma > ell:
        raise PullbackError(f"sigma={sigma} must exceed the slope l={ell}")
    if not sigma <= 1:
        raise PullbackError("sigma must be at most 1")
    x0 = np.atleast_1d(np.asarray(x0, float))
    if region is not None and np.linalg.norm(x0) >= region.eps:
        raise PullbackError(f"|x0| must be below eps={region.eps:g}")
    dim = lmap.b.dim
    T = surface_time(lmap, x0)
    z, wz = _ball_rule(dim, 1.0, nodes_x)
    out = []
    for t in np.atleast_1d(t_list):
        D = T - t
        if not D > floor:
            raise PullbackError(f"t={t} is within the floor of the surface time")
        d = np.geomspace(floor, D, nodes_t)
        rad = sigma * d
        pts = x0 + rad[:, None, None] * z[None]
        tt = np.broadcast_to((T - d)[:, None], pts.shape[:-1])
        pb = pullback(traj, lmap, tt, pts)
        if not np.all(pb.mask):
            raise PullbackError(f"{int(np.sum(~pb.mask))} quadrature nodes are outside coverage")
        inner = np.sum(pb.ut ** 2 * wz, axis=-1) * rad ** dim
        out.append(np.trapezoid(inner, d) / D)
    return np.array(out)


def concentration_oracle(kappa0: float, p: float, sigma: float, D, floor: float) -> np.ndarray:
    """Closed form of the functional for u = kappa0 (T-t)^(-2/(p-1)) in one dimension."""
    D = np.asarray(D, float)
    q = 2 * (2 / (p - 1) + 1) - 1            # |d_t u|^2 ~ (T-t)^-(2e+2); times 2 sigma (T-t)
    c = 2 * sigma * kappa0 ** 2 * (2 / (p - 1)) ** 2
    # int_floor^D c d^(-q) dd
    if abs(q - 1) < 1e-12:
        I = c * np.log(D / floor)
    else:
        I = c * (floor ** (1 - q) - D ** (1 - q)) / (q - 1)
    return I / D
