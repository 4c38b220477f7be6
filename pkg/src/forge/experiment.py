"""End-to-end pipeline: geometry, ansatz checks, solves, pullback, side tests.

Each stage writes CSV/JSON reports under its own subdirectory of the output
directory and returns a list of Gate results. `run_experiment` collects them
into gates.csv and summary.json; the exit status is 1 when any gate fails.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import io
from .ansatz import (AnsatzError, AnsatzStack, GridSpec, build_stack, correction_ode_residual,
                     ode_identity_V0, residual_norm_series, sandwich_check, verify_bound_constants)
from .config import ExperimentConfig, surface_from_spec, surface_spec
from .core import Nonlinearity, derive_params, sample_taylor_bounds
from .diagnostics import GridTrajectory, blowup_rate_fit, concentration, concentration_oracle
from .geometry import InfluenceRegion, LorentzGraphMap, build_bundle, roundtrip_checks
from .solver import (SolverConfig, cone_uniqueness_test, energy_step_audit, growth_fit,
                     lower_bound_check, q_weight_constants, solve, truncation_inertness)

log = logging.getLogger("forge")


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class Gate:
    stage: str
    name: str
    passed: bool
    value: float
    threshold: str
    note: str = ""


class Context:
    """Lazily built shared objects for one config."""

    def __init__(self, cfg: ExperimentConfig, out: Path, stack_dir: Optional[Path] = None):
        self.cfg = cfg
        self.out = Path(out)
        self.stack_dir = stack_dir
        m = cfg.model
        self.params = derive_params(m.N, m.p, m.k, m.R)
        self._bundle = None
        self._stack = None
        self._traj_pullback = {}

    @property
    def bundle(self):
        if self._bundle is None:
            surf = surface_from_spec(self.params.dim, surface_spec(self.cfg))
            self._bundle = build_bundle(surf, self.params)
        return self._bundle

    def gspec(self, h_factor: float = 1.0, s_factor: float = 1.0) -> GridSpec:
        g = self.cfg.grid
        return GridSpec(g.h * h_factor, g.L, g.s_min, g.s_max, g.per_decade * s_factor)

    def region(self) -> InfluenceRegion:
        return InfluenceRegion(self.bundle, self.cfg.pullback.delta0)

    def build(self, gspec: GridSpec, levels=None) -> AnsatzStack:
        """Stack for gspec, reused through FORGE_CACHE when set."""
        cache = io.cache_dir()
        key = None
        if cache is not None and levels is None:
            key = self.cfg.digest("model", "surface") + "-" + _gkey(gspec)
            d = cache / key
            if (d / io.MANIFEST).exists():
                try:
                    return io.load_stack(d, self.bundle)
                except io.ManifestError as exc:
                    log.warning("ignoring cached stack %s: %s", d, exc)
        st = build_stack(self.params, self.bundle, gspec, levels=levels)
        if key is not None:
            io.save_stack(st, cache / key, surface_spec(self.cfg))
        return st

    @property
    def stack(self) -> AnsatzStack:
        if self._stack is None:
            if self.stack_dir is not None:
                self._stack = io.load_stack(self.stack_dir, self.bundle)
            else:
                self._stack = self.build(self.gspec())
        return self._stack


def _gkey(g: GridSpec) -> str:
    return f"h{g.h:g}-L{g.L}-s{g.s_min:g}-{g.s_max:g}-d{g.per_decade:g}"


# ---------------------------------------------------------------- stages

def stage_params(ctx: Context) -> list:
    P = ctx.params
    again = derive_params(P.dim, P.p, ctx.cfg.model.k, P.R)
    io.write_json(ctx.out / "params.json", P.as_dict())
    return [Gate("params", "derive_deterministic", again == P, 0.0, "bit-identical")]


def stage_geometry(ctx: Context) -> list:
    b = ctx.bundle
    out = ctx.out / "geometry"
    rep = b.verify()
    reg = ctx.region()
    rt = roundtrip_checks(b, reg.tau0, seed=ctx.cfg.seed)
    io.write_csv(out / "bundle.csv", ["quantity", "value", "bound"], [
        ["grad_psi_max", rep["grad_psi_max"], rep["bound"]],
        ["psi_tail", rep["tail"], 1e-12],
        ["localization_r", b.r, ""],
        ["ell", b.ell, ""],
        ["R_support", b.R_support, ""],
        ["tau0", reg.tau0, ""],
        ["eps0", reg.eps0, ""],
        ["eps", reg.eps, ""],
    ])
    io.write_csv(out / "roundtrip.csv", ["check", "max_error", "bound"], [
        ["inverse", rt["inverse"], 1e-10],
        ["abs_det_minus_1", rt["det"], 1e-4],
        ["solve_X1", rt["solve_X1"], rt["tol"]],
    ])
    return [
        Gate("geometry", "grad_psi_bound", rep["grad_psi_max"] <= rep["bound"],
             rep["grad_psi_max"], f"<= {rep['bound']:.4g}"),
        Gate("geometry", "map_inverse", rt["inverse"] <= 1e-10, rt["inverse"], "<= 1e-10"),
        Gate("geometry", "map_det", rt["det"] <= 1e-4, rt["det"], "<= 1e-4"),
        Gate("geometry", "solve_X1", rt["solve_X1"] <= rt["tol"], rt["solve_X1"],
             f"<= {rt['tol']:g}"),
    ]


def stage_ansatz(ctx: Context) -> list:
    st = ctx.stack
    out = ctx.out / "ansatz"
    lam = ctx.params.lam
    gates = []
    io.write_csv(out / "levels.csv", ["j", "r", "s_top", "worst_ratio"],
                 [[e["j"], e["r"], e["s"], e["worst"]] for e in st.shrink_log]
                 or [[lev.j, lev.r, lev.s_top, ""] for lev in st.levels])

    ode = ode_identity_V0(st)
    gates.append(Gate("ansatz", "profile_ode_analytic", ode["analytic"] <= 1e-12,
                      ode["analytic"], "<= 1e-12"))
    gates.append(Gate("ansatz", "profile_ode_discrete", ode["discrete"] <= 1e-3,
                      ode["discrete"], "<= 1e-3"))

    # corrections on the base and on a doubled s-grid
    refined = None
    try:
        refined = ctx.build(ctx.gspec(s_factor=2.0))
    except AnsatzError as exc:
        log.warning("refined stack failed: %s", exc)
    rows = []
    for j in range(1, min(2, st.J) + 1):
        r0 = correction_ode_residual(st, j)
        r1 = correction_ode_residual(refined, j) if refined is not None and refined.J >= j else math.nan
        gain = math.nan if math.isnan(r1) else (r0 / r1 if r1 > 0 else math.inf)
        rows.append([j, r0, r1, gain])
        gates.append(Gate("ansatz", f"correction_ode_j{j}", r0 <= 1e-2, r0, "<= 1e-2"))
        gates.append(Gate("ansatz", f"correction_ode_j{j}_refinement", gain >= 3.0, gain, ">= 3"))
    io.write_csv(out / "correction_ode.csv", ["j", "residual", "residual_refined", "gain"], rows)

    sv, norm, fit, sd, dnorm, dfit = residual_norm_series(st, window=(1e-3, 1e-1))
    io.write_csv(out / "residual_series.csv", ["s", "Q_weighted_L2"], zip(sv, norm))
    thr = -1 + lam - 0.15
    ok = fit is not None and fit.slope >= thr and fit.rms <= 0.1
    gates.append(Gate("ansatz", "residual_decay", ok, fit.slope if fit else math.nan,
                      f">= {thr:.4f}, rms <= 0.1",
                      f"rms={fit.rms:.3g} window={fit.window[0]:.3g}..{fit.window[1]:.3g}" if fit else ""))

    sw = sandwich_check(st)
    gates.append(Gate("ansatz", "sandwich", sw["frac1"] == 1.0 and sw["frac2"] == 1.0,
                      min(sw["frac1"], sw["frac2"]), "== 1", f"max_ratio={sw['max_ratio1']:.3g}"))

    lb = verify_bound_constants(st, refined if refined is not None and refined.J == st.J else None)
    io.write_csv(out / "bound_constants.csv", ["bound", "C", "C_refined", "ratio", "stable"],
                 [[k, r["C"], r.get("C_refined", ""), r.get("ratio", ""), r.get("stable", "")]
                  for k, r in lb["constants"].items()])
    finite = all(math.isfinite(r["C"]) for r in lb["constants"].values())
    gates.append(Gate("ansatz", "bound_constants_finite", finite, float(finite), "all finite"))
    io.write_json(out / "checks.json", {"ode_V0": ode, "sandwich": sw,
                                        "residual_fit": fit.as_dict() if fit else None,
                                        "ds_residual_fit": dfit.as_dict() if dfit else None})
    return gates


def _solve_one(ctx: Context, n: int):
    sc = ctx.cfg.solver
    cfg = SolverConfig(n=n, delta0=sc.delta0, cfl=sc.cfl, omega=sc.omega,
                       boundary_tol=sc.boundary_tol)
    traj, rep = solve(cfg, ctx.stack)
    return cfg, traj, rep


def stage_solve(ctx: Context, pool: Optional[ThreadPoolExecutor] = None) -> list:
    st, P = ctx.stack, ctx.params
    sc = ctx.cfg.solver
    out = ctx.out / "solve"
    mapper = pool.map if pool is not None else map
    runs = list(mapper(lambda n: _solve_one(ctx, n), sc.n))
    gates, fits, audits = [], [], {}
    thr = P.lam - 0.15
    for cfg, traj, rep in runs:
        d = out / f"n{cfg.n}"
        d.mkdir(parents=True, exist_ok=True)
        rep.write_csv(d / "energy.csv")
        io.save_trajectory(traj, d / "trajectory")
        a = energy_step_audit(rep, P, sc.omega)
        a["lower_bound"] = lower_bound_check(traj, st)
        a["meta"] = traj.meta
        audits[cfg.n] = a
        for key in ("M", "M_no_ss"):
            f = growth_fit(rep, cfg.S_n, traj.meta["ds"], P.lam, key)
            fits.append([cfg.n, key, f.slope, math.exp(f.intercept), f.rms, f.window[0], f.window[1]])
            if key == "M":
                gates.append(Gate("solve", f"growth_exponent_n{cfg.n}", f.slope >= thr, f.slope,
                                  f">= {thr:.4f}"))
        gates.append(Gate("solve", f"coercivity_n{cfg.n}", a["coercivity_ok_all"],
                          a["coercivity_min_margin"], ">= 0 at every step",
                          f"steps with N,M <= omega: {a['gated_steps']}"))
    io.write_csv(out / "growth_fits.csv",
                 ["n", "quantity", "slope", "prefactor", "rms", "x_lo", "x_hi"], fits)
    pre = {r[0]: r[3] for r in fits if r[1] == "M"}
    if len(pre) >= 2:
        vals = list(pre.values())
        ratio = max(vals) / min(vals)
        gates.append(Gate("solve", "growth_prefactor_uniform", ratio <= 2.0, ratio, "<= 2"))
    # overlap convergence between successive n
    conv = []
    ordered = sorted(runs, key=lambda r: r[0].n)
    for (c1, t1, _), (c2, t2, _) in zip(ordered, ordered[1:]):
        g1 = GridTrajectory(t1)
        y = t1.grid.points
        diff = 0.0
        for i, s in enumerate(t2.s):
            if t1.s[0] <= s <= t1.s[-1]:
                d = np.abs(g1.v(np.full(y.shape[:-1], s), y) - t2.v[i])
                diff = max(diff, float(np.nanmax(d)))
        conv.append([c1.n, c2.n, max(t1.s[0], t2.s[0]), min(t1.s[-1], t2.s[-1]), diff])
    io.write_csv(out / "overlap.csv", ["n", "n_next", "s_lo", "s_hi", "max_abs_diff"], conv)
    if sc.truncation_check and runs:
        cfg0 = runs[0][0]
        ti = truncation_inertness(st, cfg0)
        audits["truncation"] = ti
        # chi(|u|/B_n) = 1 for |u| <= B_n, so max|v| = B_n still sees the untruncated f
        ok = ti["max_v_over_B"] <= 1 and ti["rel_change"] <= 1e-10
        gates.append(Gate("solve", "truncation_inert", ok, ti["rel_change"],
                          "<= 1e-10 with max|v| <= B_n",
                          f"max|v|/B_n={ti['max_v_over_B']:.3g}"))
    audits["q_weight"] = q_weight_constants(st, np.geomspace(1.0 / max(sc.n), st.s_top, 5))
    io.write_json(out / "audit.json", {str(k): v for k, v in audits.items()})
    return gates


def _pullback_traj(ctx: Context, h_factor: float):
    if h_factor not in ctx._traj_pullback:
        st = ctx.stack if h_factor == 1.0 else ctx.build(ctx.gspec(h_factor=h_factor))
        sc = ctx.cfg.solver
        cfg = SolverConfig(n=sc.n_pullback, delta0=sc.delta0, cfl=sc.cfl, omega=sc.omega,
                           boundary_tol=sc.boundary_tol)
        traj, _ = solve(cfg, st)
        ctx._traj_pullback[h_factor] = (GridTrajectory(traj, st), traj)
    return ctx._traj_pullback[h_factor]


def stage_pullback(ctx: Context) -> list:
    pc = ctx.cfg.pullback
    P = ctx.params
    out = ctx.out / "pullback"
    region = ctx.region()
    lmap = LorentzGraphMap(ctx.bundle, region.tau0)
    gt, traj = _pullback_traj(ctx, 1.0)
    floor = pc.floor_factor * traj.S_n
    d_hi = floor * 10 ** pc.decades
    x0 = np.asarray(pc.x0, float)
    gates = []
    fit, pb = blowup_rate_fit(gt, lmap, x0, floor, d_hi, p=P.p, region=region)
    pred = -2 / (P.p - 1)
    io.write_csv(out / "blowup.csv", ["distance", "t", "u", "ut"],
                 zip(np.geomspace(floor, d_hi, pb.t.size), pb.t, pb.u, pb.ut))
    gates.append(Gate("pullback", "blowup_exponent", abs(fit.slope - pred) <= 0.05, fit.slope,
                      f"{pred:.3f} +- 0.05", f"rms={fit.rms:.3g}"))
    mono = bool(np.all(np.diff(pb.u[::-1]) > 0))
    gates.append(Gate("pullback", "blowup_monotone", mono, float(mono), "u increasing toward T"))

    D = np.geomspace(1.5 * floor, d_hi, 8)
    T = region.tau0 + float(ctx.bundle.phi_tilde(x0[None])[0])
    rows = []
    refined = None
    if pc.refine:
        try:
            refined = _pullback_traj(ctx, 0.5)[0]
        except Exception as exc:   # reported as a failed gate below
            log.warning("refined pullback run failed: %s", exc)
    flat = ctx.bundle.ell == 0 and ctx.cfg.surface.kind == "zero"
    for sg in pc.sigma:
        c = concentration(gt, lmap, x0, sg, T - D, floor, region=region)
        # refinement halves h (and ds) and doubles both quadrature rules
        c2 = concentration(refined, lmap, x0, sg, T - D, floor, region=region,
                           nodes_x=129, nodes_t=400) \
            if refined is not None else np.full_like(c, np.nan)
        orc = concentration_oracle(P.kappa0, P.p, sg, D, floor) if flat and P.dim == 1 \
            else np.full_like(c, np.nan)
        for i in range(D.size):
            rows.append([sg, D[i], T - D[i], c[i], c2[i], orc[i]])
        m, m2 = float(np.min(c)), float(np.min(c2))
        change = abs(m2 - m) / m if m > 0 else math.inf
        gates.append(Gate("pullback", f"concentration_min_sigma{sg:g}", m > 0, m, "> 0"))
        gates.append(Gate("pullback", f"concentration_refinement_sigma{sg:g}", change <= 0.2,
                          change, "<= 0.2"))
    io.write_csv(out / "concentration.csv",
                 ["sigma", "distance", "t", "value", "value_refined", "oracle_profile"], rows)
    io.write_json(out / "fits.json", {"blowup": fit.as_dict(), "tau0": region.tau0,
                                      "eps": region.eps, "floor": floor})
    return gates


def stage_cone(ctx: Context) -> list:
    cc = ctx.cfg.cone
    rows = [cone_uniqueness_test(h, cc.R_cone, cc.tau, dim=1, L=cc.L, cfl=ctx.cfg.solver.cfl,
                                 power=cc.power, p=ctx.params.p) for h in cc.h]
    io.write_csv(ctx.out / "cone" / "cone.csv", ["h", "ds", "inside", "outside"],
                 [[r["h"], r["ds"], r["inside"], r["outside"]] for r in rows])
    hs = np.array([r["h"] for r in rows])
    ins = np.array([r["inside"] for r in rows])
    order = float(np.polyfit(np.log(hs), np.log(ins), 1)[0]) if np.all(ins > 0) else math.inf
    outside = min(r["outside"] for r in rows)
    return [Gate("cone-test", "inside_order", order >= 1.9, order, ">= 1.9"),
            Gate("cone-test", "outside_order_one", outside >= 0.1, outside, ">= 0.1")]


def stage_taylor(ctx: Context) -> list:
    tc = ctx.cfg.taylor
    nl = Nonlinearity(ctx.params.p)
    kw = dict(u_range=(tc.u_min, tc.u_max), v_range=(tc.v_min, tc.v_max), seed=ctx.cfg.seed)
    a = sample_taylor_bounds(nl, tc.trials, **kw)
    b = sample_taylor_bounds(nl, 2 * tc.trials, **kw)
    rows, gates = [], []
    for k in a:
        ch = abs(b[k] - a[k]) / a[k] if a[k] > 0 else 0.0
        rows.append([k, a[k], b[k], ch])
        gates.append(Gate("taylor-sample", k, math.isfinite(a[k]) and ch <= 0.1, ch,
                          "finite, change <= 0.1", f"C={a[k]:.6g}"))
    io.write_csv(ctx.out / "taylor" / "taylor.csv",
                 ["inequality", "C", "C_doubled", "rel_change"], rows)
    return gates


STAGES: dict[str, Callable] = {
    "ansatz-verify": stage_ansatz,
    "solve": stage_solve,
    "pullback": stage_pullback,
    "cone-test": stage_cone,
    "taylor-sample": stage_taylor,
}


def run_stage(name: str, ctx: Context, **kw) -> list:
    t0 = time.perf_counter()
    log.info("stage %s", name)
    try:
        fn = {"params": stage_params, "geometry": stage_geometry, **STAGES}[name]
        gates = fn(ctx, **kw)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)
    return gates


def write_gates(out: Path, gates: list):
    io.write_csv(out / "gates.csv", ["stage", "gate", "passed", "value", "threshold", "note"],
                 [[g.stage, g.name, g.passed, g.value, g.threshold, g.note] for g in gates])


def run_experiment(cfg: ExperimentConfig, out=None, stages=None, stack_dir=None) -> tuple[int, list]:
    """Run the selected stages; returns (exit status, gates)."""
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, stack_dir)
    wanted = stages if stages is not None else ["params", "geometry"] + list(cfg.experiments)
    gates = []
    for name in ("params", "geometry"):
        if name in wanted:
            gates += run_stage(name, ctx)
    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        # side tests do not need the stack and can overlap the main pipeline
        side = {n: pool.submit(run_stage, n, ctx) for n in ("cone-test", "taylor-sample")
                if n in wanted and cfg.workers > 1}
        for name in ("ansatz-verify", "solve", "pullback", "cone-test", "taylor-sample"):
            if name not in wanted:
                continue
            if name in side:
                continue
            gates += run_stage(name, ctx, pool=pool) if name == "solve" else run_stage(name, ctx)
        for name in ("cone-test", "taylor-sample"):
            if name in side:
                gates += side[name].result()
    if "ansatz-verify" in wanted and stack_dir is None:
        io.save_stack(ctx.stack, out / "ansatz" / "stack", surface_spec(cfg))
    write_gates(out, gates)
    failed = [g for g in gates if not g.passed]
    io.write_json(out / "summary.json", {
        "name": cfg.name, "config_digest": cfg.digest(), "seed": cfg.seed,
        "stages": [s for s in wanted], "gates": len(gates), "failed": [f"{g.stage}/{g.name}" for g in failed],
        "status": "fail" if failed else "pass"})
    return (1 if failed else 0), gates
