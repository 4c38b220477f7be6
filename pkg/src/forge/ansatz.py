"""The blow-up ansatz V0 + sum chi_j v_j on a (log s) x (uniform x) grid.

Spatial derivatives are taken with the same central stencils the solver
uses, so the residuals E_j are the discrete defects the solver sees.
s-derivatives of V0 and v_j are analytic; the v_j themselves come from
cumulative quadratures stored per s-node and spline-interpolated in log s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.interpolate import CubicSpline

from .core import ModelParams, Nonlinearity, chi, eval_A
from .fitting import DecayFit, decay_fit
from .geometry import SurfaceBundle
from .grid import SpatialGrid, dot_grad, grad, hessian, laplacian, nodes_per_octave, s_nodes


class AnsatzError(RuntimeError):
    pass


@dataclass
class GridSpec:
    h: float = 0.0025
    L: Optional[float] = None
    s_min: float = 1e-4
    s_max: float = 1.0
    per_decade: float = 64

    def spatial(self, dim: int, R: float) -> SpatialGrid:
        L = self.L if self.L is not None else 2.0 * max(R, 2.0)
        if L < R:
            raise AnsatzError("grid extent must cover the support of psi")
        return SpatialGrid(dim, L, self.h)


@dataclass
class Level:
    j: int
    r: float
    s_top: float        # s_j
    s_prev: float       # s_{j-1}
    I1: np.ndarray      # (n_s, *shape), NaN above s_prev
    I2: np.ndarray
    chi_j: np.ndarray
    n_valid: int = 0
    _splines: Optional[tuple] = field(default=None, repr=False)

    def splines(self, u):
        if self._splines is None:
            m = self.n_valid
            self._splines = (CubicSpline(u[:m], self.I1[:m], axis=0),
                             CubicSpline(u[:m], self.I2[:m], axis=0))
        return self._splines


class AnsatzStack:
    """Container for V0, the corrections v_j and their residuals."""

    def __init__(self, params: ModelParams, bundle: SurfaceBundle, gspec: GridSpec):
        self.params = params
        self.bundle = bundle
        self.gspec = gspec
        self.grid = gspec.spatial(params.dim, bundle.R_support)
        self.s = s_nodes(gspec.s_min, gspec.s_max, gspec.per_decade)
        self.u = np.log(self.s)
        self.du = float(self.u[1] - self.u[0])
        self.K = nodes_per_octave(self.s)
        self.nl = Nonlinearity(params.p)
        g = self.grid
        pts = g.points
        p = params.p
        self.grad_psi = np.moveaxis(bundle.psi_grad(pts), -1, 0)
        self.lap_psi = bundle.psi_laplacian(pts)
        self.a = 1.0 - np.sum(self.grad_psi ** 2, axis=0)
        self.kappa = params.kappa0 * self.a ** (1.0 / (p - 1.0))
        self.A = eval_A(params, pts, derivs=False)
        self.chi_core = chi(g.radius)
        self.coef = -1.0 / (3 * p + 1) * np.sqrt(2 * (p + 1) / self.a)
        self.levels: list[Level] = []
        self._E_nodes = None
        self.shrink_log: list[dict] = []

    # ------------------------------------------------------------ V0
    @property
    def e(self) -> float:
        return -2.0 / (self.params.p - 1.0)

    def _s(self, s):
        s = np.atleast_1d(np.asarray(s, float))
        return s.reshape(s.shape + (1,) * self.params.dim)

    def V0(self, s):
        return self.kappa * (self._s(s) + self.A) ** self.e

    def dV0(self, s):
        e = self.e
        return e * self.kappa * (self._s(s) + self.A) ** (e - 1)

    def ddV0(self, s):
        e = self.e
        return e * (e - 1) * self.kappa * (self._s(s) + self.A) ** (e - 2)

    def Q(self, s, V0=None):
        V0 = self.V0(s) if V0 is None else V0
        return (1.0 - self.chi_core + V0) ** (self.params.p + 1)

    def dQ(self, s, V0=None, dV0=None):
        V0 = self.V0(s) if V0 is None else V0
        dV0 = self.dV0(s) if dV0 is None else dV0
        p = self.params.p
        return (p + 1) * dV0 * (1.0 - self.chi_core + V0) ** p

    # ------------------------------------------------- discrete operator
    def op_mixed(self, ds_field):
        """2 grad(psi).grad(d_s V) + lap(psi) d_s V, discrete."""
        h, N = self.grid.h, self.params.dim
        return 2.0 * dot_grad(self.grad_psi, ds_field, h, N) + self.lap_psi * ds_field

    def lap(self, f):
        return laplacian(f, self.grid.h, self.params.dim)

    def E0(self, s, V0=None, dV0=None):
        V0 = self.V0(s) if V0 is None else V0
        dV0 = self.dV0(s) if dV0 is None else dV0
        return self.op_mixed(dV0) + self.lap(V0)

    # ------------------------------------------------------- levels
    def _level_v(self, lev: Level, s, V0, dV0):
        if np.any(np.asarray(s) > lev.s_prev * (1 + 1e-12)):
            raise AnsatzError(f"v_{lev.j} undefined above s={lev.s_prev}")
        u = np.log(np.atleast_1d(np.asarray(s, float)))
        sp1, sp2 = lev.splines(self.u)
        I1, I2 = sp1(u), sp2(u)
        p = self.params.p
        v = self.coef * (V0 ** ((p + 1) / 2) * I1 + V0 ** (-p) * I2)
        dv = self.coef * dV0 * ((p + 1) / 2 * V0 ** ((p - 1) / 2) * I1 - p * V0 ** (-p - 1) * I2)
        return v, dv

    def _advance(self, E, V, dV, V0, w, dw, chi_j):
        """E_j from E_{j-1} after adding w = chi_j v_j (and its s-derivative)."""
        nl = self.nl
        Vn = V + w
        nonlin = nl.f_remainder2(V, w) + nl.fp_increment(V0, V - V0) * w
        En = (1.0 - chi_j) * E + self.op_mixed(dw) + self.lap(w) + nonlin
        return En, Vn, dV + dw

    def fields(self, s, level: Optional[int] = None, keep_levels: bool = False) -> dict:
        """All ansatz fields at the s-values given (leading axis)."""
        level = len(self.levels) if level is None else level
        V0, dV0 = self.V0(s), self.dV0(s)
        E = self.E0(s, V0, dV0)
        V, dV = V0.copy(), dV0.copy()
        out = {"V0": V0, "dV0": dV0, "E0": E}
        for lev in self.levels[:level]:
            v, dv = self._level_v(lev, s, V0, dV0)
            if keep_levels:
                out[f"v{lev.j}"] = v
                out[f"dv{lev.j}"] = dv
                out[f"E{lev.j - 1}"] = E
            E, V, dV = self._advance(E, V, dV, V0, lev.chi_j * v, lev.chi_j * dv, lev.chi_j)
        out.update(V=V, dV=dV, E=E)
        return out

    def ddV(self, s, level: Optional[int] = None) -> np.ndarray:
        """d_ss V_j from the level identities a d_ss v = f'(V0) v + E_{j-1}."""
        f = self.fields(s, level, keep_levels=True)
        out = self.ddV0(s)
        fp = self.nl.fp(f["V0"])
        for lev in self.levels[: (len(self.levels) if level is None else level)]:
            out = out + lev.chi_j * (fp * f[f"v{lev.j}"] + f[f"E{lev.j - 1}"]) / self.a
        return out

    @property
    def J(self) -> int:
        return len(self.levels)

    @property
    def s_top(self) -> float:
        return self.levels[-1].s_top if self.levels else 1.0

    def r_list(self):
        return [lev.r for lev in self.levels]

    def s_list(self):
        return [lev.s_top for lev in self.levels]

    def index_of(self, s_val: float) -> int:
        i = int(np.argmin(np.abs(self.u - math.log(s_val))))
        if abs(self.u[i] - math.log(s_val)) > 1e-9:
            raise AnsatzError(f"s={s_val} is not an s-node")
        return i


def _tail(g, s_min, du):
    """Power-law extension of int_0^{s_min} g ds from the first two nodes."""
    g0, g1 = g[0], g[1]
    same = (g0 * g1 > 0)
    ratio = np.where(same, g1 / np.where(same, g0, 1.0), 1.0)
    a = np.where(same, np.log(np.abs(ratio)) / du, 0.0)
    a = np.maximum(a, -0.5)
    return g0 * s_min / (a + 1.0)


R_FLOOR = 1e-14
S_FLOOR = 1e-6


def build_level(stack: AnsatzStack, quad: str = "simpson", r_floor: float = R_FLOOR,
                margin: float = 0.95, policy: str = "greedy") -> Level:
    """Add level j = len(levels)+1 and select (r_j, s_j) by halving."""
    p = stack.params.p
    j = stack.J + 1
    if j > stack.params.J:
        raise AnsatzError("all levels already built")
    prev_s = stack.s_top
    prev_r = stack.levels[-1].r if stack.levels else 1.0
    i_prev = stack.index_of(prev_s)
    n = i_prev + 1
    sv = stack.s[:n]
    if stack._E_nodes is None:
        f0 = stack.fields(sv, 0)
        stack._E_nodes = (f0["E"], f0["V"], f0["dV"])
    E, V, dV = stack._E_nodes
    E, V, dV = E[:n], V[:n], dV[:n]
    V0, dV0 = stack.V0(sv), stack.dV0(sv)
    sb = stack._s(sv)
    g1 = V0 ** (-p) * E
    g2 = V0 ** ((p + 1) / 2) * E
    if quad == "simpson":
        C1 = cumulative_simpson(g1 * sb, dx=stack.du, axis=0, initial=0.0)
        C2 = cumulative_simpson(g2 * sb, dx=stack.du, axis=0, initial=0.0)
    else:
        from scipy.integrate import cumulative_trapezoid
        C1 = cumulative_trapezoid(g1 * sb, dx=stack.du, axis=0, initial=0.0)
        C2 = cumulative_trapezoid(g2 * sb, dx=stack.du, axis=0, initial=0.0)
    I1 = _tail(g1, stack.s[0], stack.du) + C1
    I2 = C2[-1] - C2
    v = stack.coef * (V0 ** ((p + 1) / 2) * I1 + V0 ** (-p) * I2)

    # shrink loop over (s_j, r_j)
    b1 = 2.0 ** (-j - 2) * V0
    b2 = 2.0 ** (-j) * (1 + V0) ** (-(p - 1) / 4) * V0
    rho = np.abs(v) / np.minimum(b1, b2)
    axes = tuple(range(1, rho.ndim))
    chosen = None
    r_cands = []
    r = prev_r
    while r >= r_floor:
        r_cands.append(r)
        r /= 2
    worst = {}
    for r in r_cands:
        cj = chi(stack.A / r)
        worst[r] = np.maximum.accumulate(np.max(cj * rho, axis=axes))
    if policy == "joint":
        # halve r and s together
        i_top, m = i_prev, 0
        while m < len(r_cands) and i_top >= 1:
            if worst[r_cands[m]][i_top] <= margin:
                chosen = (r_cands[m], i_top)
                break
            m += 1
            i_top -= stack.K
    else:
        # largest s first, then the largest r passing at that s
        i_top = i_prev
        while i_top >= 1 and stack.s[i_top] >= S_FLOOR and chosen is None:
            for r in r_cands:
                if worst[r][i_top] <= margin:
                    chosen = (r, i_top)
                    break
            if chosen is None:
                i_top -= stack.K
    if chosen is None:
        raise AnsatzError(f"shrink loop for level {j} reached the floor")
    r, i_top = chosen
    stack.shrink_log.append({"j": j, "r": r, "s": float(stack.s[i_top]),
                             "worst": float(worst[r][i_top])})
    full_I1 = np.full((stack.s.size,) + stack.grid.shape, np.nan)
    full_I2 = np.full_like(full_I1, np.nan)
    full_I1[:n] = I1
    full_I2[:n] = I2
    lev = Level(j, r, float(stack.s[i_top]), prev_s, full_I1, full_I2, chi(stack.A / r), n_valid=n)
    stack.levels.append(lev)
    # residual on nodes up to s_j
    m = i_top + 1
    w = lev.chi_j * v[:m]
    dv = stack.coef * dV0[:m] * ((p + 1) / 2 * V0[:m] ** ((p - 1) / 2) * I1[:m]
                                 - p * V0[:m] ** (-p - 1) * I2[:m])
    dw = lev.chi_j * dv
    En, Vn, dVn = stack._advance(E[:m], V[:m], dV[:m], V0[:m], w, dw, lev.chi_j)
    stack._E_nodes = (En, Vn, dVn)
    return lev


def build_stack(params: ModelParams, bundle: SurfaceBundle, gspec: Optional[GridSpec] = None,
                levels: Optional[int] = None, quad: str = "simpson",
                policy: str = "greedy", r_floor: float = R_FLOOR) -> AnsatzStack:
    stack = AnsatzStack(params, bundle, gspec or GridSpec())
    for _ in range(params.J if levels is None else levels):
        build_level(stack, quad=quad, policy=policy, r_floor=r_floor)
    return stack


# ------------------------------------------------------------ checks

def ode_identity_V0(stack: AnsatzStack, s=None, n_s: int = 100, n_x: int = 100,
                    radius: float = 1.2) -> dict:
    """Relative defects of a d_ss V0 = V0^p, analytic and by log-s differences.

    Checks run on n_s s-nodes times n_x spatial nodes with |x| <= radius. In
    the far field V0 hardly varies in s and the differenced form is pure
    round-off, so it is left out.
    """
    p = stack.params.p
    sel = np.flatnonzero(stack.grid.radius.ravel() <= radius)
    sel = sel[np.linspace(0, sel.size - 1, min(n_x, sel.size)).astype(int)]
    a = stack.a.ravel()[sel]
    if s is None:
        idx = np.unique(np.linspace(1, stack.s.size - 2, n_s).astype(int))
    else:
        idx = np.unique(np.clip(np.searchsorted(stack.s, np.asarray(s)), 1, stack.s.size - 2))

    def flat(F):
        return F.reshape(F.shape[0], -1)[:, sel]

    sv = stack.s[idx]
    V0 = flat(stack.V0(sv))
    an = np.max(np.abs(a * flat(stack.ddV0(sv)) - V0 ** p) / V0 ** p)
    ref = np.sqrt(2 * V0 ** (p + 1) / (p + 1))
    first = np.max(np.abs(np.sqrt(a) * flat(stack.dV0(sv)) + ref) / ref)
    # discrete: d_ss = s^-2 (d_uu - d_u) on the log grid
    du = stack.du
    Vm, Vp = flat(stack.V0(stack.s[idx - 1])), flat(stack.V0(stack.s[idx + 1]))
    duu = (Vp - 2 * V0 + Vm) / du ** 2
    d1 = (Vp - Vm) / (2 * du)
    dd = (duu - d1) / stack._s(sv) ** 2
    disc = np.max(np.abs(a * dd - V0 ** p) / V0 ** p)
    return {"analytic": float(an), "first_order": float(first), "discrete": float(disc),
            "points": int(V0.size)}


def correction_ode_residual(stack: AnsatzStack, j: int) -> float:
    """max_s [max_x |a d_ss v_j - f'(V0) v_j - E_{j-1}| / max_x |E_{j-1}|] at interior nodes."""
    lev = stack.levels[j - 1]
    n = lev.n_valid
    sv = stack.s[:n]
    f = stack.fields(sv, j, keep_levels=True)
    v = f[f"v{j}"]
    E = f[f"E{j - 1}"]
    du = stack.du
    duu = (v[2:] - 2 * v[1:-1] + v[:-2]) / du ** 2
    d1 = (v[2:] - v[:-2]) / (2 * du)
    dd = (duu - d1) / stack._s(sv[1:-1]) ** 2
    res = stack.a * dd - stack.nl.fp(f["V0"][1:-1]) * v[1:-1] - E[1:-1]
    interior = stack.grid.interior
    axes = tuple(range(1, res.ndim))
    num = np.max(np.abs(np.where(interior, res, 0.0)), axis=axes)
    den = np.max(np.abs(np.where(interior, E[1:-1], 0.0)), axis=axes)
    ok = den > 0
    if not np.any(ok):
        return 0.0
    return float(np.max(num[ok] / den[ok]))


def sandwich_check(stack: AnsatzStack) -> dict:
    """Pass fraction of both sandwich inequalities at s-nodes up to s_J."""
    p = stack.params.p
    J = stack.J
    i = stack.index_of(stack.s_top)
    f = stack.fields(stack.s[: i + 1])
    d = np.abs(f["V"] - f["V0"])
    V0 = f["V0"]
    c1 = d <= 0.25 * (1 - 2.0 ** -J) * V0
    c2 = d <= (1 - 2.0 ** -J) * (1 + V0) ** (-(p - 1) / 4) * V0
    return {"frac1": float(np.mean(c1)), "frac2": float(np.mean(c2)),
            "max_ratio1": float(np.max(d / (0.25 * (1 - 2.0 ** -J) * V0))),
            "positive": bool(np.all(f["V"] > 0))}


def residual_norm_series(stack: AnsatzStack, j: Optional[int] = None, weight: str = "Q",
                         window=(1e-3, 1e-1)) -> tuple:
    """L2-in-x norm of (Q^1/2) E_j and of d_s E_j per s-node with their fits."""
    j = stack.J if j is None else j
    s_hi = stack.levels[j - 1].s_top if j > 0 else 1.0
    i = stack.index_of(s_hi)
    sv = stack.s[: i + 1]
    f = stack.fields(sv, j)
    E = f["E"]
    wgt = np.sqrt(stack.Q(sv, f["V0"])) if weight == "Q" else 1.0
    norm = stack.grid.l2(wgt * E)
    dE = (E[2:] - E[:-2]) / (2 * stack.du * stack._s(sv[1:-1]))
    dnorm = stack.grid.l2(dE)
    lam = stack.params.lam
    fit = decay_fit(f"|Q^1/2 E_{j}|", sv, norm, window, predicted=-1 + lam) \
        if np.all(norm[(sv >= window[0]) & (sv <= window[1])] > 0) else None
    dfit = decay_fit(f"|d_s E_{j}|", sv[1:-1], dnorm, window, predicted=-1 + lam) \
        if np.all(dnorm[(sv[1:-1] >= window[0]) & (sv[1:-1] <= window[1])] > 0) else None
    return sv, norm, fit, sv[1:-1], dnorm, dfit


def level_decay(stack: AnsatzStack, region: str = "core", window=(1e-3, 1e-1)) -> list:
    """Fitted exponents of sup |v_j(s)| for each level over the region."""
    mask = stack.grid.radius < 1.0 if region == "core" else stack.grid.radius <= stack.params.R
    out = []
    for lev in stack.levels:
        i = stack.index_of(lev.s_top)
        sv = stack.s[: i + 1]
        f = stack.fields(sv, lev.j, keep_levels=True)
        v = np.abs(np.where(mask, f[f"v{lev.j}"], 0.0))
        sup = np.max(v.reshape(v.shape[0], -1), axis=1)
        if np.all(sup[(sv >= window[0]) & (sv <= window[1])] > 0):
            out.append(decay_fit(f"sup v_{lev.j}", sv, sup, window))
        else:
            out.append(None)
    return out


def _spatial_derivs(f, h, dim):
    """(|f|, |grad f|, max |hessian entry|) for fields with a leading s-axis."""
    g = grad(f, h, dim)
    H = hessian(f, h, dim)
    return np.abs(f), np.sqrt(np.sum(g ** 2, axis=0)), np.max(np.abs(H.reshape((-1,) + f.shape)), axis=0)


def bound_constants(stack: AnsatzStack, s_lo: float = 1e-3) -> dict:
    """Fitted constants max(LHS / envelope) for the ansatz bounds (alpha, |beta| <= 2)."""
    p, k = stack.params.p, stack.params.k
    h, N = stack.grid.h, stack.params.dim
    R = stack.params.R
    rad = stack.grid.radius
    near = rad <= R
    far = rad > R
    q = (p - 1) / 2
    J = stack.J
    i = stack.index_of(stack.s_top)
    i0 = int(np.searchsorted(stack.s, s_lo))
    sv = stack.s[i0: i + 1]
    f = stack.fields(sv, J, keep_levels=True)
    V0 = f["V0"]
    out = {}
    interior = stack.grid.interior

    def cmax(lhs, env, mask):
        m = mask & interior
        r = np.where(m, lhs / env, 0.0)
        return float(np.max(r))

    # (V1) rho = 1, alpha in {0,1,2}, |beta| <= 2
    for alpha, F in ((0, V0), (1, f["dV0"]), (2, stack.ddV0(sv))):
        for beta, D in enumerate(_spatial_derivs(F, h, N)):
            out[f"V1 a={alpha} b={beta}"] = cmax(D, V0 ** (1 + (alpha + beta / k) * q), near)
    # (V2) E0, alpha 0
    for beta, D in enumerate(_spatial_derivs(f["E0"], h, N)):
        out[f"V2 b={beta}"] = cmax(D, V0 ** ((p + 1) / 2 + ((1 + beta) / k) * q), near)
    safe = np.where(rad > 0, rad, 1.0)
    # (V3)/(V4) far field
    for alpha, F in ((0, V0), (1, f["dV0"])):
        for beta, D in enumerate(_spatial_derivs(F, h, N)):
            out[f"V3 a={alpha} b={beta}"] = cmax(D, safe ** (-(2 / (p - 1) + alpha) * k - beta), far)
    out["V4 b=0"] = cmax(np.abs(f["E0"]), safe ** (-(2 / (p - 1)) * k - 2), far)
    # (v4) per level
    for lev in stack.levels:
        jj = lev.j
        for beta, D in enumerate(_spatial_derivs(f[f"v{jj}"], h, N)):
            out[f"v4 j={jj} b={beta}"] = cmax(D, V0 ** (1 + (-jj + (jj + beta) / k) * q), near)
    # (v5bis)
    out["v5bis"] = cmax(np.abs(f["dV"] - f["dV0"]), V0 ** (1 + (p - 1) / (2 * k)), near | far)
    # (v1) E_J, (v2)/(v3) far field
    for beta, D in enumerate(_spatial_derivs(f["E"], h, N)):
        out[f"v1 b={beta}"] = cmax(D, V0 ** ((p + 1) / 2 + (-J + (1 + J + beta) / k) * q), near)
    out["v2 b=0"] = cmax(np.abs(f["V"]), safe ** (-(2 / (p - 1)) * k), far)
    out["v3 b=0"] = cmax(np.abs(f["E"]), safe ** (-(2 / (p - 1)) * k - 2), far)
    return out


def verify_bound_constants(stack: AnsatzStack, refined: Optional[AnsatzStack] = None,
                        s_lo: float = 1e-3) -> dict:
    base = bound_constants(stack, s_lo)
    rep = {"sandwich": sandwich_check(stack), "constants": {}}
    ref = bound_constants(refined, s_lo) if refined is not None else {}
    for key, c in base.items():
        row = {"C": c}
        if key in ref:
            c2 = ref[key]
            ratio = max(c, c2) / min(c, c2) if min(c, c2) > 0 else (1.0 if max(c, c2) == 0 else math.inf)
            row.update(C_refined=c2, ratio=ratio, stable=bool(ratio <= 2.0))
        rep["constants"][key] = row
    return rep


# ---------------------------------------------------- pointwise forms

def kappa_at(stack_or_bundle, params: ModelParams, x):
    b = stack_or_bundle.bundle if isinstance(stack_or_bundle, AnsatzStack) else stack_or_bundle
    g = b.psi_grad(x)
    return params.kappa0 * (1 - np.sum(g * g, axis=-1)) ** (1 / (params.p - 1))


def eval_V0(stack: AnsatzStack, s, x, deriv: str = ""):
    """Pointwise V0 with optional derivative: '', 's', 'ss', 'grad', 'lap'."""
    P = stack.params
    x = np.asarray(x, float)
    if x.ndim == 0 or (P.dim == 1 and x.shape[-1] != 1):
        x = x[..., None]
    if np.any(np.asarray(s) <= 0):
        raise AnsatzError("V0 needs s > 0")
    e = -2 / (P.p - 1)
    kap = kappa_at(stack, P, x)
    A, gA, HA = eval_A(P, x)
    W = s + A
    if deriv == "":
        return kap * W ** e
    if deriv == "s":
        return e * kap * W ** (e - 1)
    if deriv == "ss":
        return e * (e - 1) * kap * W ** (e - 2)
    hk = 1e-5
    eye = np.eye(P.dim)
    gk = np.stack([(kappa_at(stack, P, x + hk * eye[i]) - kappa_at(stack, P, x - hk * eye[i])) / (2 * hk)
                   for i in range(P.dim)], axis=-1)
    if deriv == "grad":
        return gk * (W ** e)[..., None] + (kap * e * W ** (e - 1))[..., None] * gA
    if deriv == "lap":
        h2 = 1e-4
        lk = sum((kappa_at(stack, P, x + h2 * eye[i]) - 2 * kap + kappa_at(stack, P, x - h2 * eye[i])) / h2 ** 2
                 for i in range(P.dim))
        lA = np.trace(HA, axis1=-2, axis2=-1)
        return (lk * W ** e + 2 * e * W ** (e - 1) * np.sum(gk * gA, axis=-1)
                + kap * (e * (e - 1) * W ** (e - 2) * np.sum(gA * gA, axis=-1) + e * W ** (e - 1) * lA))
    raise ValueError(f"unknown derivative {deriv!r}")


def eval_E0(stack: AnsatzStack, s, x):
    """Pointwise E0 = 2 grad psi . grad d_s V0 + lap psi d_s V0 + lap V0."""
    P = stack.params
    x = np.asarray(x, float)
    if x.ndim == 0 or (P.dim == 1 and x.shape[-1] != 1):
        x = x[..., None]
    e = -2 / (P.p - 1)
    b = stack.bundle
    gpsi = b.psi_grad(x)
    lpsi = b.psi_laplacian(x)
    kap = kappa_at(stack, P, x)
    A, gA, _ = eval_A(P, x)
    W = s + A
    hk = 1e-5
    eye = np.eye(P.dim)
    gk = np.stack([(kappa_at(stack, P, x + hk * eye[i]) - kappa_at(stack, P, x - hk * eye[i])) / (2 * hk)
                   for i in range(P.dim)], axis=-1)
    dsV = e * kap * W ** (e - 1)
    g_dsV = e * (gk * (W ** (e - 1))[..., None] + (kap * (e - 1) * W ** (e - 2))[..., None] * gA)
    return 2 * np.sum(gpsi * g_dsV, axis=-1) + lpsi * dsV + eval_V0(stack, s, x, "lap")


def dtV0_concentration(stack: AnsatzStack, x0, sigma: float, s_list, nodes: int = 64):
    """s^e * ||d_s V0(s)||_{L2(|x-x0| < sigma s)} with e = (N+2-(N-2)p)/(2(p-1))."""
    P = stack.params
    x0 = np.atleast_1d(np.asarray(x0, float))
    if np.linalg.norm(x0) >= 1:
        raise AnsatzError("x0 must lie in the core |x0| < 1")
    if sigma <= 0:
        raise AnsatzError("sigma must be positive")
    N, p = P.dim, P.p
    ex = (N + 2 - (N - 2) * p) / (2 * (p - 1))
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    out = []
    for s in np.atleast_1d(s_list):
        rad = sigma * s
        if np.max(np.abs(x0)) + rad > stack.grid.L:
            raise AnsatzError("ball exits the grid")
        if N == 1:
            pts = x0 + rad * gx[:, None]
            wts = rad * gw
        elif N == 2:
            rr = 0.5 * rad * (gx + 1)
            rw = 0.5 * rad * gw * rr
            th = 2 * np.pi * np.arange(2 * nodes) / (2 * nodes)
            R_, T_ = np.meshgrid(rr, th, indexing="ij")
            pts = x0 + np.stack([R_ * np.cos(T_), R_ * np.sin(T_)], -1).reshape(-1, 2)
            wts = (rw[:, None] * np.full(th.size, 2 * np.pi / th.size)[None, :]).ravel()
        else:
            m = min(nodes, 24)
            cx, cw = np.polynomial.legendre.leggauss(m)
            mesh = np.stack(np.meshgrid(*([cx] * N), indexing="ij"), -1).reshape(-1, N)
            ww = np.prod(np.stack(np.meshgrid(*([cw] * N), indexing="ij"), -1).reshape(-1, N), -1)
            keep = np.sum(mesh ** 2, -1) < 1
            pts = x0 + rad * mesh[keep]
            wts = rad ** N * ww[keep]
        d = eval_V0(stack, s, pts, "s")
        out.append(s ** ex * math.sqrt(float(np.sum(wts * d * d))))
    return np.array(out)
