import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.grid import SpatialGrid
from forge.solver import (CFLError, SolverConfig, SolverError, WaveOperator, cfl_step,
                          cone_uniqueness_test, growth_fit, integrate, linear_energy_drift,
                          mms_error, q_weight_constants, solve, truncation_inertness,
                          zero_data_run)


@pytest.mark.parametrize("curved", [False, True])
def test_mms_second_order(curved):
    e1, e2 = mms_error(40, curved=curved), mms_error(80, curved=curved)
    assert math.log2(e1 / e2) >= 1.9


def test_zero_data_stays_zero():
    assert zero_data_run(SpatialGrid(1, 2.0, 0.01)) == 0.0
    assert zero_data_run(SpatialGrid(2, 1.0, 0.05), steps=20) == 0.0


def test_linear_energy_conserved():
    drift, e = linear_energy_drift(SpatialGrid(1, 3.0, 0.0025))
    assert drift <= 1e-3
    assert e.size > 100


@given(cfl=st.floats(0.51, 5.0))
def test_cfl_rejected(cfl):
    with pytest.raises(CFLError):
        cfl_step(0.01, np.ones(3), np.zeros((1, 3)), cfl)


def test_cfl_accounts_for_psi():
    a = np.array([0.96])
    gp = np.array([[0.2]])
    assert cfl_step(0.01, a, gp, 0.25) == pytest.approx(0.25 * 0.01 * math.sqrt(0.96) / 1.2)


def test_boundary_monitor_trips():
    g = SpatialGrid(1, 0.5, 0.01)
    op = WaveOperator(g, 1.0, np.zeros((1,) + g.shape), np.zeros(g.shape))
    u0 = np.exp(-(g.axis / 0.1) ** 2)
    with pytest.raises(SolverError, match="boundary"):
        integrate(op, u0, np.zeros_like(u0), 0.0, 0.0025, 400, lambda s, u: np.zeros_like(u),
                  boundary_tol=1e-6)


def test_solver_refuses_short_stack(flat_stack):
    with pytest.raises(SolverError):
        solve(SolverConfig(n=10), flat_stack)


def test_energy_report_columns(solves):
    _, traj, rep = solves[100]
    assert rep.columns == ["step", "s", "N", "E", "K0", "K1", "K", "M", "coercivity_margin"]
    assert len(rep.rows) == traj.meta["steps"] + 1
    assert rep.column("s")[0] == pytest.approx(0.01)


def test_w_starts_at_zero(solves):
    _, traj, _ = solves[100]
    assert np.all(traj.w[0] == 0) and np.all(traj.ws[0] == 0)


def test_truncation_inert(flat_stack):
    from forge.solver import truncation_level
    B = 2 * truncation_level(flat_stack, 0.01)
    r = truncation_inertness(flat_stack, SolverConfig(n=100, B_n=B))
    assert r["max_v_over_B"] < 1
    assert r["rel_change"] <= 1e-10


def test_q_weight_constants_refinement_stable(flat_stack, small_stack):
    s = [0.02, 0.04]
    a = q_weight_constants(flat_stack, s)
    b = q_weight_constants(small_stack, s)
    for k in a:
        assert np.isfinite(a[k]) and a[k] > 0
        assert max(a[k], b[k]) / min(a[k], b[k]) <= 2.0


def test_growth_exponent_stable_in_n(p13, solves):
    """Fitted exponent of M^2 moves by at most 0.05 when n is doubled."""
    slopes = [growth_fit(rep, cfg.S_n, tr.meta["ds"], p13.lam).slope
              for cfg, tr, rep in (solves[100], solves[200])]
    assert abs(slopes[1] - slopes[0]) <= 0.05, slopes


def test_overlap_difference_decreases(flat_stack, solves):
    from forge.diagnostics import GridTrajectory
    runs = [solves[100][1], solves[200][1], solve(SolverConfig(n=400), flat_stack)[0]]
    diffs = []
    for a, b in zip(runs, runs[1:]):
        ga = GridTrajectory(a)
        y = a.grid.points
        d = 0.0
        for i, s in enumerate(b.s):
            if a.s[0] <= s <= a.s[-1]:
                d = max(d, float(np.nanmax(np.abs(ga.v(np.full(y.shape[:-1], s), y) - b.v[i]))))
        diffs.append(d)
    assert diffs[1] < diffs[0], diffs


def test_cone_outside_deviation_order_one():
    r = cone_uniqueness_test(0.01)
    assert r["outside"] >= 0.1
    assert cone_uniqueness_test(0.01, identical=True)["outside"] == 0.0
