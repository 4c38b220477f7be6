import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.core import derive_params
from forge.geometry import (GeometryError, Hypersurface, InfluenceRegion, LorentzGraphMap,
                            build_bundle, cone_image_check, householder_to_e1, localize,
                            roundtrip_checks)


@pytest.fixture(scope="module")
def tilted():
    """phi = 0.3 x + x^2 in one dimension."""
    P = derive_params(1, 3)
    return build_bundle(Hypersurface.quadratic(1, 1.0, ell=0.3), P)


@pytest.fixture(scope="module")
def tilted2d():
    P = derive_params(2, 3)
    return build_bundle(Hypersurface.quadratic(2, 0.5, ell=0.2), P)


def test_localization_radius_regression(tilted):
    assert tilted.r == 2.0 ** -9
    assert tilted.ell == pytest.approx(0.3)
    assert tilted.local.deviation <= tilted.local.bound


def test_flat_surface_keeps_largest_radius():
    b = build_bundle(Hypersurface.zero(1), derive_params(1, 3))
    assert b.r == 0.5
    assert np.all(b.psi(np.linspace(-3, 3, 11)[:, None]) == 0)


def test_verify_reports(tilted, tilted2d):
    for b in (tilted, tilted2d):
        rep = b.verify()
        assert rep["grad_psi_max"] <= rep["bound"]
        assert rep["tail"] <= 1e-12


def test_not_spacelike_rejected():
    with pytest.raises(GeometryError):
        localize(Hypersurface.linear(1, 1.2), derive_params(1, 3))


def test_householder():
    v = np.array([0.1, -0.3, 0.2])
    Q = householder_to_e1(v)
    assert np.allclose(Q @ v, [np.linalg.norm(v), 0, 0])
    assert np.allclose(Q @ Q.T, np.eye(3))


def test_rotation_aligns_gradient():
    P = derive_params(2, 3)
    s = Hypersurface(2, lambda x: 0.1 * x[..., 1] + 0.2 * x[..., 0] ** 2,
                     lambda x: np.stack([0.4 * x[..., 0], np.full(x.shape[:-1], 0.1)], -1))
    b = build_bundle(s, P)
    assert b.ell == pytest.approx(0.1)


def test_bracket_straddles(tilted2d):
    rng = np.random.default_rng(0)
    y = rng.uniform(-0.05, 0.05, (2000, 2))
    lo, hi = tilted2d.bracket(y)
    f_lo = tilted2d.Phi(lo, y[:, 1:]) - y[:, 0]
    f_hi = tilted2d.Phi(hi, y[:, 1:]) - y[:, 0]
    assert np.all(f_lo <= 0) and np.all(f_hi >= 0)


def test_X1_slope_bounds(tilted):
    y = np.linspace(-0.01, 0.01, 4001)[:, None]
    X1 = tilted.solve_X1(y)
    q = np.diff(X1) / np.diff(y[:, 0])
    eps = 1e-6
    assert np.min(q) >= tilted.slope_lo - eps
    assert np.max(q) <= tilted.slope_hi + eps


@given(t=st.floats(0, 0.02), x=st.floats(-0.004, 0.004))
@settings(max_examples=200, deadline=None)
def test_map_roundtrip_property(tilted, t, x):
    lm = LorentzGraphMap(tilted, 0.02)
    s, y = lm.forward(t, [x])
    t2, x2 = lm.inverse(s, y)
    assert abs(float(t2) - t) < 1e-12
    assert abs(float(x2[0]) - x) < 1e-12


def test_roundtrip_checks(tilted, tilted2d):
    for b in (tilted, tilted2d):
        r = roundtrip_checks(b, 0.02, points=10000)
        assert r["inverse"] <= 1e-10
        assert r["solve_X1"] <= b.tol
    assert roundtrip_checks(tilted2d, 0.02)["det"] <= 1e-4
    # r = 2^-9 patch: the step must be small against r for the FD determinant
    assert roundtrip_checks(tilted, 0.02, step=5e-5)["det"] <= 1e-4


def test_det_converges_second_order(tilted):
    lm = LorentzGraphMap(tilted, 0.02)
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 0.02, 50)
    x = rng.uniform(-2e-3, 2e-3, (50, 1))
    d1 = np.max(np.abs(np.abs(lm.jacobian_det(t, x, 5e-5)) - 1))
    d2 = np.max(np.abs(np.abs(lm.jacobian_det(t, x, 2.5e-5)) - 1))
    assert math.log2(d1 / d2) >= 1.9


def test_surface_maps_to_s_zero(tilted2d):
    lm = LorentzGraphMap(tilted2d, 0.01)
    rng = np.random.default_rng(3)
    x = rng.uniform(-0.01, 0.01, (500, 2))
    s, _ = lm.forward(0.01 + tilted2d.phi_tilde(x), x)
    assert np.max(np.abs(s)) < 1e-13


def test_region_bound(tilted):
    reg = InfluenceRegion(tilted, 0.12)
    lm = LorentzGraphMap(tilted, reg.tau0)
    rng = np.random.default_rng(4)
    t = rng.uniform(0, reg.tau0 * 1.2, 20000)
    x = rng.uniform(-(reg.tau0 + reg.eps0), reg.tau0 + reg.eps0, (20000, 1))
    inside = reg.in_T(t, x)
    s, _ = lm.forward(t[inside], x[inside])
    assert inside.sum() > 1000
    assert np.all(s > 0) and np.max(s) < reg.delta0 / 2


def test_cone_estimates(tilted):
    """s' bound and the |x - x0| bound along backward cones."""
    reg = InfluenceRegion(tilted, 0.12)
    lm = LorentzGraphMap(tilted, reg.tau0)
    ell = tilted.ell
    rng = np.random.default_rng(5)
    x0 = np.array([0.0])
    T0 = reg.tau0 + float(tilted.phi_tilde(x0[None])[0])
    _, y0 = lm.forward(T0, x0)
    tp = rng.uniform(0, T0, 5000)
    x = x0 + rng.uniform(-1, 1, (5000, 1)) * (T0 - tp)[:, None]
    s, y = lm.forward(tp, x)
    dx = np.abs(x - x0)[:, 0]
    c = math.sqrt((1 + ell) / (1 - ell))
    assert np.all(s <= c * (T0 - tp + dx) + 1e-14)
    assert np.all(dx <= np.abs(y - y0)[:, 0] + ell * (T0 - tp) + 1e-14)


def test_cone_image(tilted):
    reg = InfluenceRegion(tilted, 0.12)
    lm = LorentzGraphMap(tilted, reg.tau0)
    ok, margin, bad = cone_image_check(lm, reg, [0.0], 0.7, samples=5000)
    assert ok and len(bad) == 0
