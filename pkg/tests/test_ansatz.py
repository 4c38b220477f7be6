import math

import numpy as np
import pytest

from forge.ansatz import (AnsatzError, GridSpec, eval_E0, eval_V0, ode_identity_V0,
                          residual_norm_series, sandwich_check)
from forge.core import chi
from forge.grid import nodes_per_octave, s_nodes


def test_s_grid_octaves():
    s = s_nodes(1e-4, 1.0, 64)
    K = nodes_per_octave(s)
    assert K == 19
    assert s[-1] == 1.0 and np.all(np.diff(s) > 0)
    assert s[-1 - K] == pytest.approx(0.5, rel=1e-14)


def test_grid_extent_must_cover_support():
    with pytest.raises(AnsatzError):
        GridSpec(L=1.0).spatial(1, 2.0)


def test_analytic_s_derivatives(small_stack):
    st = small_stack
    s = np.array([0.05, 0.2])
    near = st.A <= 0.1
    errs = []
    for h in (2e-3, 1e-3):
        d1 = (st.V0(s + h) - st.V0(s - h)) / (2 * h)
        d2 = (st.V0(s + h) - 2 * st.V0(s) + st.V0(s - h)) / h ** 2
        errs.append((np.max(np.abs(d1 - st.dV0(s))[:, near] / np.abs(st.dV0(s))[:, near]),
                     np.max(np.abs(d2 - st.ddV0(s))[:, near] / np.abs(st.ddV0(s))[:, near])))
    for k in range(2):
        assert math.log2(errs[0][k] / errs[1][k]) >= 1.9


def test_level_derivative_second_order(small_stack):
    st = small_stack
    s0 = 0.1
    errs = []
    for h in (2e-3, 1e-3):
        fp = st.fields([s0 + h])["V"][0]
        fm = st.fields([s0 - h])["V"][0]
        d = st.fields([s0])["dV"][0]
        errs.append(np.max(np.abs((fp - fm) / (2 * h) - d)))
    assert errs[1] < 1e-12 or math.log2(errs[0] / errs[1]) >= 1.9


def test_pointwise_V0_matches_grid(small_stack):
    st = small_stack
    x = st.grid.points
    for s in (0.01, 0.3):
        assert np.allclose(eval_V0(st, s, x), st.V0([s])[0], rtol=1e-13)
        assert np.allclose(eval_V0(st, s, x, "s"), st.dV0([s])[0], rtol=1e-13)


def test_pointwise_E0_matches_grid(small_stack):
    st = small_stack
    s = 0.2
    pts = st.grid.points
    grid_E0 = st.E0([s])[0]
    inner = st.grid.interior & (st.grid.radius < 3.5)
    rel = np.abs(eval_E0(st, s, pts) - grid_E0)[inner] / (1 + np.abs(grid_E0[inner]))
    assert np.max(rel) < 5e-2


def test_V_positive_and_chi_plateaus(flat_stack):
    st = flat_stack
    f = st.fields(st.s[:: 4][st.s[::4] <= st.s_top])
    assert np.all(f["V"] > 0)
    for lev in st.levels:
        assert np.all(lev.chi_j[st.A <= lev.r] == 1.0)
        assert np.all(lev.chi_j[st.A >= 2 * lev.r] == 0.0)
        assert np.all(lev.chi_j[st.grid.radius <= 1.0] == 1.0)


def test_far_field_freeze(flat_stack):
    st = flat_stack
    r1 = st.levels[0].r
    far = (st.grid.radius > st.bundle.R_support) & (st.A >= 2 * r1)
    assert far.sum() > 100
    f = st.fields([st.s_top])
    assert np.array_equal(f["V"][0][far], f["V0"][0][far])
    assert np.array_equal(f["E"][0][far], f["E0"][0][far])


def test_level_undefined_above_previous_top(flat_stack):
    st = flat_stack
    with pytest.raises(AnsatzError):
        st.fields([0.5 * (st.levels[-1].s_prev + 1.0)] if st.levels[-1].s_prev < 1 else [2.0])


def test_shrink_log(flat_stack):
    log = flat_stack.shrink_log
    assert [e["j"] for e in log] == [1, 2, 3, 4]
    assert all(e["worst"] <= 0.95 for e in log)
    r = [e["r"] for e in log]
    assert all(b <= a for a, b in zip(r, r[1:]))
    s = [e["s"] for e in log]
    assert all(b <= a for a, b in zip(s, s[1:]))


def test_shrink_regression(flat_stack):
    """Default N=1, p=3 stack at h = 0.0025, 64 nodes per decade."""
    assert flat_stack.s_list() == [1.0, 1.0, 1.0, 0.0625]
    assert flat_stack.r_list()[0] == pytest.approx(1.22e-4, rel=1e-2)


def test_quadrature_convergence(flat_stack, refined_s_stack):
    for j in (1, 2):
        sups = []
        for st in (flat_stack, refined_s_stack):
            lev = st.levels[j - 1]
            sv = st.s[: lev.n_valid][st.s[: lev.n_valid] >= 1e-3]
            v = st.fields(sv, j, keep_levels=True)[f"v{j}"]
            sups.append(np.max(np.abs(v)))
        assert abs(sups[1] - sups[0]) <= 0.01 * sups[1]


def test_identities_small_stack(small_stack):
    r = ode_identity_V0(small_stack)
    assert r["analytic"] < 1e-12
    assert r["first_order"] < 1e-12


def test_sandwich_small_stack(small_stack):
    sw = sandwich_check(small_stack)
    assert sw["frac1"] == 1.0 and sw["frac2"] == 1.0 and sw["positive"]


def test_residual_series_deterministic(small_stack):
    a = residual_norm_series(small_stack, window=(1e-3, 1e-1))
    b = residual_norm_series(small_stack, window=(1e-3, 1e-1))
    assert np.array_equal(a[1], b[1])
    if a[2] is not None:
        assert a[2].slope == b[2].slope


def test_chi_j_is_chi_of_A_over_r(small_stack):
    lev = small_stack.levels[0]
    assert np.array_equal(lev.chi_j, chi(small_stack.A / lev.r))
