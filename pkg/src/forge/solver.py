"""Time integration of the regularized transformed equation and its energies.

The unknown is w = v - V_J with zero data at S_n, driven by the ansatz
residual E_J. The mixed term 2 grad(psi).grad(d_s w) + lap(psi) d_s w is
skew-adjoint and is treated by a central (two-level implicit) average; the
resulting matrix is factored once.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ansatz import AnsatzStack
from .core import Nonlinearity
from .grid import SpatialGrid, grad, hessian


class SolverError(RuntimeError):
    pass


class CFLError(SolverError):
    pass


# ------------------------------------------------------------ operators

def _d1_1d(n, h):
    D = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [-1, 1], shape=(n, n), format="lil") / (2 * h)
    D[0, :] = 0
    D[-1, :] = 0
    return D.tocsr()


def _d2_1d(n, h):
    D = sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1],
                 shape=(n, n), format="lil") / h ** 2
    D[0, :] = 0
    D[-1, :] = 0
    return D.tocsr()


def _axis_op(op1, n, dim, axis):
    mats = [sp.identity(n, format="csr")] * dim
    mats[axis] = op1
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


class WaveOperator:
    """a d_ss u - B d_s u - lap_h u = G on a grid with Dirichlet u = 0.

    B u = 2 grad(psi).grad_h u + lap(psi) u. Arrays are flattened in C order.
    """

    def __init__(self, grid: SpatialGrid, a, grad_psi, lap_psi):
        self.grid = grid
        n, dim, h = grid.n, grid.dim, grid.h
        self.shape = grid.shape
        self.a = np.broadcast_to(np.asarray(a, float), grid.shape).ravel().copy()
        self.boundary = ~grid.interior.ravel()
        self.lap = sum(_axis_op(_d2_1d(n, h), n, dim, i) for i in range(dim)).tocsr()
        gp = np.asarray(grad_psi, float).reshape(dim, -1)
        lp = np.asarray(lap_psi, float).ravel()
        self.flat = not (np.any(gp) or np.any(lp))
        if self.flat:
            self.B = None
        else:
            B = sp.diags(lp)
            for i in range(dim):
                B = B + 2.0 * sp.diags(gp[i]) @ _axis_op(_d1_1d(n, h), n, dim, i)
            B = sp.diags((~self.boundary).astype(float)) @ B
            self.B = B.tocsr()
        self._lu = None

    def Bu(self, u):
        return np.zeros_like(u) if self.B is None else self.B @ u

    def factor(self, ds: float):
        if self.B is None:
            self._lu = None
            return
        M = sp.diags(self.a) - 0.5 * ds * self.B
        self._lu = spla.splu(M.tocsc())

    def solve(self, rhs):
        if self._lu is None:
            return rhs / self.a
        return self._lu.solve(rhs)

    def accel(self, u, ut, G):
        """d_ss u isolated from the equation."""
        out = (self.Bu(ut) + self.lap @ u + G) / self.a
        out[self.boundary] = 0.0
        return out


def max_speed(a, grad_psi) -> float:
    """Largest characteristic speed (1+|grad psi|)/a^(1/2) on the grid."""
    g = np.sqrt(np.sum(np.asarray(grad_psi) ** 2, axis=0))
    return float(np.max((1.0 + g) / np.sqrt(a)))


def cfl_step(h: float, a, grad_psi, cfl: float) -> float:
    if not 0 < cfl <= 0.5:
        raise CFLError(f"CFL number {cfl} outside (0, 0.5]")
    return cfl * h / max_speed(a, grad_psi)


def _edge_layers(grid: SpatialGrid) -> np.ndarray:
    """Flat indices of the second-outermost layer (the outermost is pinned to 0)."""
    m = np.zeros(grid.shape, dtype=bool)
    inner = np.zeros(grid.shape, dtype=bool)
    m[(slice(1, -1),) * grid.dim] = True
    inner[(slice(2, -2),) * grid.dim] = True
    return np.flatnonzero((m & ~inner).ravel())


def integrate(op: WaveOperator, u0, ut0, s0: float, ds: float, nsteps: int,
              rhs: Callable, on_step: Optional[Callable] = None,
              boundary_tol: Optional[float] = None):
    """Second-order two-step scheme.

    rhs(s, u) returns the source G. on_step(k, s, u, ut, G) is called for
    every level k = 0..nsteps with the central velocity (one-sided at the end).
    Returns the final (u, ut).
    """
    op.factor(ds)
    bnd = op.boundary
    u_prev = np.asarray(u0, float).ravel().copy()
    ut_prev = np.asarray(ut0, float).ravel().copy()
    u_prev[bnd] = 0.0
    G0 = rhs(s0, u_prev)
    u = u_prev + ds * ut_prev + 0.5 * ds * ds * op.accel(u_prev, ut_prev, G0)
    u[bnd] = 0.0
    if on_step is not None:
        on_step(0, s0, u_prev, ut_prev, G0)
    G = rhs(s0 + ds, u)
    layer = _edge_layers(op.grid) if boundary_tol is not None else None
    for k in range(1, nsteps):
        r = op.a * (2 * u - u_prev) + ds * ds * (op.lap @ u + G)
        if op.B is not None:
            r = r - 0.5 * ds * (op.B @ u_prev)
        r[bnd] = 0.0
        u_next = op.solve(r)
        u_next[bnd] = 0.0
        if not np.all(np.isfinite(u_next)):
            raise SolverError(f"non-finite values at step {k + 1}")
        if on_step is not None:
            on_step(k, s0 + k * ds, u, (u_next - u_prev) / (2 * ds), G)
        if layer is not None:
            peak = np.max(np.abs(u_next))
            if peak > 0 and np.max(np.abs(u_next[layer])) > boundary_tol * peak:
                raise SolverError(f"boundary activity above threshold at step {k + 1}")
        u_prev, u = u, u_next
        G = rhs(s0 + (k + 1) * ds, u)
    # end velocity from u_prev = u - ds u_t + ds^2/2 u_ss
    ut_end = (u - u_prev) / ds
    ut_end = ut_end + 0.5 * ds * op.accel(u, ut_end, G)
    if on_step is not None:
        on_step(nsteps, s0 + nsteps * ds, u, ut_end, G)
    return u, ut_end


# ----------------------------------------------------------- w-problem

@dataclass
class SolverConfig:
    n: int = 100
    delta0: float = 0.05          # s_end = S_n + delta0, capped at s_J
    cfl: float = 0.25
    B_n: Optional[float] = None   # default sup |V_J| on [S_n, s_J]
    boundary_tol: Optional[float] = 1e-6
    omega: float = 0.1
    save_every: int = 1
    linear: bool = False          # drop f_n(V_J+w) - f_n(V_J)

    @property
    def S_n(self) -> float:
        return 1.0 / self.n


def truncation_level(stack: AnsatzStack, S_n: float, samples: int = 33) -> float:
    """sup |V_J| over s in [S_n, s_J], sampled geometrically."""
    sv = np.geomspace(S_n, stack.s_top, samples)
    return float(np.max(np.abs(stack.fields(sv)["V"])))


@dataclass
class EnergyReport:
    dim: int
    rows: list = field(default_factory=list)
    gate: Optional[np.ndarray] = None

    def add(self, **row):
        self.rows.append(row)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows], float)

    @property
    def columns(self) -> list:
        return (["step", "s", "N", "E"] + [f"K{i}" for i in range(self.dim + 1)]
                + ["K", "M", "coercivity_margin"])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(self.columns)
            for r in self.rows:
                wr.writerow([r["step"]] + [repr(float(r[c])) for c in self.columns[1:]])


@dataclass
class Trajectory:
    """Checkpoints of v = V_J + w and its s-derivative on the spatial grid."""
    grid: SpatialGrid
    s: np.ndarray
    v: np.ndarray
    vs: np.ndarray
    w: np.ndarray
    ws: np.ndarray
    S_n: float
    meta: dict = field(default_factory=dict)


class Energies:
    """Discrete versions of the weighted functionals of the w-equation."""

    def __init__(self, stack: AnsatzStack, nl: Nonlinearity):
        self.stack = stack
        self.nl = nl
        self.grid = stack.grid
        self.lam = stack.params.lam
        self.a = stack.a

    def __call__(self, s, w, ws, wss, fields=None):
        st, g = self.stack, self.grid
        h, N = g.h, g.dim
        f = st.fields([s]) if fields is None else fields
        V0, dV0, VJ = f["V0"][0], f["dV0"][0], f["V"][0]
        Q = st.Q([s], V0)[0]
        dQ = st.dQ([s], V0, dV0)[0]
        Qh = np.sqrt(Q)
        T1 = Qh * ws - 0.5 * dQ / Qh * w            # Q d_s(Q^-1/2 w)
        T2 = Q ** 2 * np.sum(grad(w / Qh, h, N) ** 2, axis=0)
        T3 = self.lam / 16 * s ** -2 * Q * w ** 2
        NN = g.integrate(T1 ** 2 + T2 + T3)
        nonlin = 2 * Q * (self.nl.F_remainder3(VJ, w)
                          + 0.5 * self.nl.fp_increment(V0, VJ - V0) * w ** 2)
        EE = g.integrate(self.a * T1 ** 2 + T2 + T3 - nonlin)
        gws = grad(ws, h, N)
        gw = grad(w, h, N)
        Hw = hessian(w, h, N)
        K = [g.integrate(self.a * wss ** 2 + np.sum(gws ** 2, axis=0))]
        for l in range(N):
            K.append(g.integrate(self.a * gws[l] ** 2 + np.sum(Hw[l] ** 2, axis=0)))
        H2 = g.integrate(w ** 2 + np.sum(gw ** 2, axis=0) + np.sum(Hw ** 2, axis=(0, 1)))
        H1 = g.integrate(ws ** 2 + np.sum(gws ** 2, axis=0))
        L2ss = g.integrate(wss ** 2)
        Ksum = float(sum(K))
        return {"N": math.sqrt(max(NN, 0.0)), "E": float(EE),
                **{f"K{i}": float(k) for i, k in enumerate(K)}, "K": Ksum,
                "M": math.sqrt(H2 + H1 + L2ss), "M_no_ss": math.sqrt(H2 + H1),
                "coercivity_margin": float(2 * EE + Ksum - NN)}


def aux_G(stack: AnsatzStack, s: float) -> np.ndarray:
    """G = f'(V0) Q^1/2 - a d_ss(Q^1/2) with Q^1/2 = m^((p+1)/2), m = 1 - chi + V0."""
    p = stack.params.p
    V0, dV0, ddV0 = stack.V0([s])[0], stack.dV0([s])[0], stack.ddV0([s])[0]
    m = 1.0 - stack.chi_core + V0
    q = (p + 1) / 2
    dd_Qh = q * (q - 1) * m ** (q - 2) * dV0 ** 2 + q * m ** (q - 1) * ddV0
    return p * V0 ** (p - 1) * m ** q - stack.a * dd_Qh


def solve(cfg: SolverConfig, stack: AnsatzStack, bundle=None):
    """Integrate w from zero data at S_n; returns (Trajectory, EnergyReport)."""
    S_n = cfg.S_n
    if not S_n < stack.s_top:
        raise SolverError(f"stack horizon s_J={stack.s_top:g} does not exceed S_n={S_n:g}")
    s_end = min(S_n + cfg.delta0, stack.s_top)
    g = stack.grid
    B_n = cfg.B_n if cfg.B_n is not None else truncation_level(stack, S_n)
    if B_n < 1:
        raise SolverError(f"B_n={B_n:g} < 1; increase n")
    nl = Nonlinearity(stack.params.p, B_n)
    op = WaveOperator(g, stack.a, stack.grad_psi, stack.lap_psi)
    ds0 = cfl_step(g.h, stack.a, stack.grad_psi, cfg.cfl)
    nsteps = max(2, int(math.ceil((s_end - S_n) / ds0)))
    ds = (s_end - S_n) / nsteps
    shape = g.shape
    energies = Energies(stack, nl)
    report = EnergyReport(g.dim)
    cache = {}

    def fields_at(s):
        key = round((s - S_n) / ds)
        if key not in cache:
            cache.clear()
            cache[key] = stack.fields([s])
        return cache[key]

    def rhs(s, w):
        f = fields_at(s)
        E = f["E"][0].ravel()
        if cfg.linear:
            return E
        return nl.f_increment(f["V"][0].ravel(), w) + E

    saved = {"s": [], "w": [], "ws": []}
    gated = []

    def on_step(k, s, w, ws, G):
        wr, wsr = w.reshape(shape), ws.reshape(shape)
        wss = op.accel(w, ws, G).reshape(shape)
        row = energies(s, wr, wsr, wss, fields_at(s))
        report.add(step=k, s=s, **row)
        gated.append(row["N"] <= cfg.omega and row["M"] <= cfg.omega)
        if k % cfg.save_every == 0 or k == nsteps:
            saved["s"].append(s)
            saved["w"].append(wr.copy())
            saved["ws"].append(wsr.copy())

    zero = np.zeros(g.n ** g.dim)
    integrate(op, zero, zero, S_n, ds, nsteps, rhs, on_step, cfg.boundary_tol)
    s_arr = np.array(saved["s"])
    W, WS = np.array(saved["w"]), np.array(saved["ws"])
    f = stack.fields(s_arr)
    traj = Trajectory(g, s_arr, f["V"] + W, f["dV"] + WS, W, WS, S_n,
                      meta={"n": cfg.n, "ds": ds, "steps": nsteps, "B_n": B_n,
                            "s_end": s_end, "gated_steps": int(np.sum(gated))})
    report.gate = np.array(gated)
    return traj, report


# --------------------------------------------------------------- audits

def energy_step_audit(report: EnergyReport, params, omega: float = 0.1) -> dict:
    """Coercivity, energy-increment and M^2 <= C (N^2 + K) checks on a completed run.

    The estimates only hold while N, M <= omega; those steps form the gate.
    Coercivity is also reported over all steps.
    """
    s = report.column("s")
    N, M, K, E = (report.column(c) for c in ("N", "M", "K", "E"))
    margin = report.column("coercivity_margin")
    gate = (N <= omega) & (M <= omega)
    lam, p = params.lam, params.p
    dE = np.gradient(E, s)
    excess = dE - lam / 4 / s * N ** 2
    basis = s ** (-1 + lam) * N + s ** -0.5 * N ** 2 + (N ** (p + 1) + M ** (p + 1)) / s
    use = gate if np.any(gate) else np.ones_like(gate)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(basis > 0, excess / basis, np.where(excess > 0, np.inf, 0.0))
        m_ratio = np.where(N ** 2 + K > 0, M ** 2 / (N ** 2 + K), 0.0)
    return {
        "steps": int(s.size),
        "gated_steps": int(np.sum(gate)),
        "coercivity_ok_gated": bool(np.all(margin[gate] >= 0)),
        "coercivity_ok_all": bool(np.all(margin >= 0)),
        "coercivity_min_margin": float(np.min(margin)),
        "energy_C": float(max(0.0, np.max(ratio[use]))),
        "energy_C_on_gate": bool(np.any(gate)),
        "m_ratio_C": float(np.max(m_ratio)),
    }


def growth_fit(report: EnergyReport, S_n: float, ds: float, lam: float,
               key: str = "M", lead: int = 4):
    """Fit of M^2 against (s - S_n) over the first resolved decade [lead*ds, 10*lead*ds]."""
    from .fitting import decay_fit
    s = report.column("s")
    y = report.column(key) ** 2
    x = s - S_n
    lo = lead * ds
    return decay_fit(f"{key}^2", x, y, (lo * (1 - 1e-9), 10 * lo * (1 + 1e-9)), predicted=lam)


def lower_bound_check(traj: Trajectory, stack: AnsatzStack, c_g: float = 2.0,
                      region: Optional[np.ndarray] = None) -> dict:
    """|v_s|^2 - |grad v|^2 - |d_s V0|^2/4 >= -(C + g^2) with g^2 = c_g(|w_s|^2 + |grad w|^2).

    Returns the smallest C that makes the inequality hold on the trajectory
    and the largest discrete H1 norm of g.
    """
    g = traj.grid
    h, N = g.h, g.dim
    C = 0.0
    gH1 = 0.0
    mask = np.ones(g.shape, bool) if region is None else region
    for i, s in enumerate(traj.s):
        dV0 = stack.dV0([s])[0]
        gv = grad(traj.v[i], h, N)
        gw = grad(traj.w[i], h, N)
        lhs = traj.vs[i] ** 2 - np.sum(gv ** 2, axis=0) - 0.25 * dV0 ** 2
        g2 = c_g * (traj.ws[i] ** 2 + np.sum(gw ** 2, axis=0))
        C = max(C, float(np.max(np.where(mask, -(lhs + g2), -np.inf))))
        gg = np.sqrt(g2)
        gH1 = max(gH1, float(np.sqrt(g.integrate(gg ** 2 + np.sum(grad(gg, h, N) ** 2, axis=0)))))
    return {"C": max(C, 0.0), "sup_g_H1": gH1}


def q_weight_constants(stack: AnsatzStack, s_values) -> dict:
    """Fitted constants in |d_s Q| <= C s^-1 Q, |grad Q| <= C s^-1/k Q,
    |lap Q| <= C s^-2/k Q and |grad d_s Q| <= C s^(-1-1/k) Q."""
    k = stack.params.k
    h, N = stack.grid.h, stack.params.dim
    inner = stack.grid.interior
    out = {"dsQ": 0.0, "gradQ": 0.0, "lapQ": 0.0, "graddsQ": 0.0}
    for s in s_values:
        Q = stack.Q([s])[0]
        dQ = stack.dQ([s])[0]
        gQ = np.sqrt(np.sum(grad(Q, h, N) ** 2, axis=0))
        lQ = np.abs(sum(hessian(Q, h, N)[i, i] for i in range(N)))
        gdQ = np.sqrt(np.sum(grad(dQ, h, N) ** 2, axis=0))
        for key, val, env in (("dsQ", np.abs(dQ), s ** -1), ("gradQ", gQ, s ** (-1 / k)),
                              ("lapQ", lQ, s ** (-2 / k)), ("graddsQ", gdQ, s ** (-1 - 1 / k))):
            out[key] = max(out[key], float(np.max(np.where(inner, val / (env * Q), 0.0))))
    return out


# ------------------------------------------------------ property runs

def mms_error(m: int, T: float = 1.0, cfl: float = 0.4, curved: bool = False) -> float:
    """L2 error at s=T of v* = cos(s) sin(x) on [-pi, pi] with h = pi/m.

    With psi = 0 the source vanishes; with curved=True psi = 0.2 sin x and
    the matching source is added.
    """
    h = math.pi / m
    g = SpatialGrid(1, math.pi, h)
    x = g.axis
    gp = 0.2 * np.cos(x) if curved else np.zeros_like(x)
    lp = -0.2 * np.sin(x) if curved else np.zeros_like(x)
    a = 1 - gp ** 2
    op = WaveOperator(g, a, gp[None], lp)
    n = int(round(T / (cfl * h)))
    ds = T / n

    def rhs(s, u):
        if not curved:
            return np.zeros_like(u)
        return (-a * np.cos(s) + np.cos(s)) * np.sin(x) + 2 * gp * np.sin(s) * np.cos(x) \
            + lp * np.sin(s) * np.sin(x)

    u, _ = integrate(op, np.sin(x), np.zeros_like(x), 0.0, ds, n, rhs)
    return float(np.sqrt(np.sum((u - np.cos(T) * np.sin(x)) ** 2) * h))


def zero_data_run(grid: SpatialGrid, steps: int = 50, cfl: float = 0.4) -> float:
    """max |v| after integrating zero data with psi = 0 and f = 0."""
    zero = np.zeros(grid.n ** grid.dim)
    op = WaveOperator(grid, 1.0, np.zeros((grid.dim,) + grid.shape), np.zeros(grid.shape))
    u, ut = integrate(op, zero, zero, 0.0, cfl * grid.h, steps, lambda s, u: np.zeros_like(u))
    return float(max(np.max(np.abs(u)), np.max(np.abs(ut))))


def linear_energy_drift(grid: SpatialGrid, T: float = 1.0, cfl: float = 0.25, width: float = 0.2):
    """Relative drift of int (d_s v)^2 + |grad v|^2 for v_ss = lap v, Gaussian data."""
    h, N = grid.h, grid.dim
    r2 = grid.radius ** 2
    u0 = np.exp(-r2 / width ** 2).ravel()
    op = WaveOperator(grid, 1.0, np.zeros((N,) + grid.shape), np.zeros(grid.shape))
    n = int(round(T / (cfl * h)))
    energy = []

    def on_step(k, s, u, ut, G):
        U = u.reshape(grid.shape)
        gsum = sum(np.sum(np.diff(U, axis=i) ** 2) for i in range(N)) / h ** 2
        energy.append(h ** N * (np.sum(ut ** 2) + gsum))

    integrate(op, u0, np.zeros_like(u0), 0.0, T / n, n, lambda s, u: np.zeros_like(u), on_step)
    e = np.array(energy)
    return float(np.max(np.abs(e - e[0])) / e[0]), e


def truncation_inertness(stack: AnsatzStack, cfg: SolverConfig, factor: float = 2.0) -> dict:
    """Runs with B_n and factor*B_n; reports max|v| / B_n and the relative change."""
    B = cfg.B_n if cfg.B_n is not None else truncation_level(stack, cfg.S_n)
    runs = []
    for b in (B, factor * B):
        c = SolverConfig(**{**cfg.__dict__, "B_n": b})
        runs.append(solve(c, stack)[0])
    vmax = float(np.max(np.abs(runs[0].v)))
    rel = float(np.max(np.abs(runs[0].v - runs[1].v)) / np.max(np.abs(runs[0].v)))
    return {"B_n": B, "max_v_over_B": vmax / B, "rel_change": rel}


def cone_uniqueness_test(h: float, R_cone: float = 1.0, tau: float = 0.5, x0=None,
                         p: float = 3.0, dim: int = 1, L: float = 3.0, cfl: float = 0.25,
                         bump: float = 1.0, power: int = 6, identical: bool = False) -> dict:
    """Two runs of v_ss - lap v = f_B(v) from data agreeing on B(x0, R_cone).

    The second extension adds bump*(|x-x0| - R_cone - 4h)_+^power (tapered near
    the grid edge). power >= 6 keeps the difference smooth enough (C^5) for the
    scheme's O(h^2) error bound to hold at the front. Returns the largest deviation inside the truncated cone
    {|x - x0| < R_cone - t} over all steps and the largest deviation overall.
    """
    if not tau < R_cone:
        raise SolverError("need tau < R_cone")
    grid = SpatialGrid(dim, L, h)
    x0 = np.zeros(dim) if x0 is None else np.asarray(x0, float)
    if R_cone + np.max(np.abs(x0)) >= L - 0.5:
        raise SolverError("cone exits the grid")
    pts = grid.points
    d = np.sqrt(np.sum((pts - x0) ** 2, axis=-1))
    base = 0.5 * np.exp(-np.sum(pts ** 2, axis=-1))
    taper = np.clip(L - 0.25 - np.max(np.abs(pts), axis=-1), 0, None) ** 4
    ext = np.clip(d - R_cone - 4 * h, 0, None) ** power * taper
    ext = bump * ext / np.max(ext)
    nl = Nonlinearity(p, 2.0)
    op = WaveOperator(grid, 1.0, np.zeros((dim,) + grid.shape), np.zeros(grid.shape))
    n = int(math.ceil(tau / (cfl * h)))
    ds = tau / n
    tracks = []
    for data in (base, base if identical else base + ext):
        hist = []
        integrate(op, data.ravel(), np.zeros(data.size), 0.0, ds, n,
                  lambda s, u: nl.f(u), lambda k, s, u, ut, G: hist.append(u.copy()))
        tracks.append(np.array(hist))
    diff = np.abs(tracks[0] - tracks[1]).reshape((n + 1,) + grid.shape)
    t = np.arange(n + 1) * ds
    inside = d[None] < (R_cone - t.reshape((-1,) + (1,) * dim))
    return {"h": h, "ds": ds, "inside": float(np.max(np.where(inside, diff, 0.0))),
            "outside": float(np.max(diff))}
