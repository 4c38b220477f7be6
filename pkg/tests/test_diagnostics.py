import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.ansatz import AnsatzStack, GridSpec
from forge.core import derive_params
from forge.diagnostics import (AnalyticTrajectory, GridTrajectory, PullbackError, blowup_rate_fit,
                               chain_rule_error, concentration, concentration_oracle, pullback)
from forge.fitting import FitError, decay_fit, fit_exponent
from forge.geometry import Hypersurface, InfluenceRegion, LorentzGraphMap, build_bundle


# ------------------------------------------------------------------ fits

def test_fit_exact_power_law():
    x = np.geomspace(1, 100, 20)
    slope, icpt, rms = fit_exponent(x, 3 * x ** 2)
    assert slope == pytest.approx(2.0, abs=1e-12)
    assert icpt == pytest.approx(math.log(3), abs=1e-12)
    assert rms < 1e-12


def test_fit_perturbed_power_law():
    x = np.geomspace(1, 100, 40)
    slope, _, _ = fit_exponent(x, x ** 2 * (1 + 0.01 * np.sin(np.log(x))))
    assert abs(slope - 2.0) <= 0.01


def test_fit_preconditions():
    with pytest.raises(FitError):
        fit_exponent([1.0], [2.0])
    with pytest.raises(FitError):
        fit_exponent(np.linspace(1, 5, 10), np.ones(10))
    with pytest.raises(FitError):
        fit_exponent(np.geomspace(1, 100, 10), -np.ones(10))


@given(c=st.floats(1e-6, 1e6), a=st.floats(-3, 3))
@settings(max_examples=60)
def test_fit_scale_equivariance(c, a):
    x = np.geomspace(1e-3, 1, 12)
    y = x ** a * (1 + 0.1 * np.cos(3 * np.log(x)))
    s1, i1, r1 = fit_exponent(x, y)
    s2, i2, r2 = fit_exponent(x, c * y)
    assert s2 == pytest.approx(s1, abs=1e-9)
    assert i2 - i1 == pytest.approx(math.log(c), abs=1e-9)


def test_decay_fit_short_window_flagged():
    x = np.geomspace(1, 5, 10)
    f = decay_fit("y", x, x ** 2, (1, 5))
    assert f.low_confidence and f.slope == pytest.approx(2.0)


# --------------------------------------------------------------- pullback

@pytest.fixture(scope="module")
def tilted_light():
    """Levels-free stack on a coarse grid over the tilted surface."""
    P = derive_params(1, 3)
    b = build_bundle(Hypersurface.quadratic(1, 0.004, ell=0.2), P)
    return AnsatzStack(P, b, GridSpec(h=0.05, s_min=1e-3, per_decade=8)), b


def test_flat_pullback_is_time_reflection(flat_stack, flat_bundle):
    lm = LorentzGraphMap(flat_bundle, 0.02)
    at = AnalyticTrajectory(flat_stack)
    t = np.linspace(0, 0.015, 7)
    x = np.full((7, 1), 0.003)
    pb = pullback(at, lm, t, x)
    expect = at.v(0.02 - t, x)
    assert np.allclose(pb.u, expect, rtol=1e-14)
    assert np.allclose(pb.s, 0.02 - t)


def test_chain_rule_second_order(tilted_light):
    stack, b = tilted_light
    lm = LorentzGraphMap(b, 0.02)
    at = AnalyticTrajectory(stack)
    t = np.linspace(0.0, 0.012, 5)
    x = np.full((5, 1), 0.001)
    e1 = chain_rule_error(at, lm, t, x, 2e-4)
    e2 = chain_rule_error(at, lm, t, x, 1e-4)
    assert math.log2(e1 / e2) >= 1.9


def test_masking_respects_region(flat_stack, flat_bundle, rng):
    reg = InfluenceRegion(flat_bundle, 0.12)
    lm = LorentzGraphMap(flat_bundle, reg.tau0)
    at = AnalyticTrajectory(flat_stack)
    t = rng.uniform(-0.01, 0.04, 4000)
    x = rng.uniform(-0.05, 0.05, (4000, 1))
    pb = pullback(at, lm, t, x, region=reg, delta0=reg.delta0)
    assert 0 < pb.mask.sum() < 4000
    ok = pb.mask
    assert np.all(reg.in_T(t[ok], x[ok]))
    assert np.all((pb.s[ok] > 0) & (pb.s[ok] < reg.delta0 / 2))
    assert np.all(np.isnan(pb.u[~ok]))


def test_grid_trajectory_masks_outside_coverage(pullback_setup):
    region, lmap, traj = pullback_setup
    gt = GridTrajectory(traj)
    pb = pullback(gt, lmap, np.array([0.0, lmap.tau0 - 1e-4]), np.zeros((2, 1)))
    assert pb.mask.tolist() == [True, False]


def test_analytic_blowup_rate(flat_stack, flat_bundle):
    lm = LorentzGraphMap(flat_bundle, 0.02)
    fit, pb = blowup_rate_fit(AnalyticTrajectory(flat_stack), lm, [0.0], 1e-3)
    assert fit.slope == pytest.approx(-1.0, abs=1e-10)
    assert np.all(np.diff(pb.u) < 0)


def test_blowup_fit_rejects_masked_window(pullback_setup, flat_stack):
    region, lmap, traj = pullback_setup
    with pytest.raises(PullbackError):
        blowup_rate_fit(GridTrajectory(traj, flat_stack), lmap, [0.0], 1e-4)


def test_concentration_oracle_regression(p13):
    assert concentration_oracle(p13.kappa0, 3, 0.5, 1e-2, 1e-3) == pytest.approx(9.9e7, rel=1e-12)
    assert concentration_oracle(p13.kappa0, 3, 0.9, 1e-2, 1e-3) == pytest.approx(1.782e8, rel=1e-12)


def test_concentration_matches_oracle(flat_stack, flat_bundle, p13):
    lm = LorentzGraphMap(flat_bundle, 0.02)
    at = AnalyticTrajectory(flat_stack)
    D = np.array([1e-2, 5e-3])
    for sg in (0.5, 0.9):
        c = concentration(at, lm, [0.0], sg, 0.02 - D, 1e-3)
        assert np.allclose(c, concentration_oracle(p13.kappa0, 3, sg, D, 1e-3), rtol=1e-3)
    far = concentration(at, lm, [0.0], 0.5, [0.0], 1e-3)
    assert np.isfinite(far[0]) and far[0] > 0


def test_concentration_rejections(flat_stack, flat_bundle):
    reg = InfluenceRegion(flat_bundle, 0.12)
    lm = LorentzGraphMap(flat_bundle, reg.tau0)
    at = AnalyticTrajectory(flat_stack)
    with pytest.raises(PullbackError):
        concentration(at, lm, [0.0], 0.0, [0.0], 1e-3)
    with pytest.raises(PullbackError):
        concentration(at, lm, [0.0], 1.2, [0.0], 1e-3)
    with pytest.raises(PullbackError):
        concentration(at, lm, [0.9 * reg.eps0], 0.5, [0.0], 1e-3, region=reg)


def test_sigma_below_slope_rejected(tilted_light):
    stack, b = tilted_light
    lm = LorentzGraphMap(b, 0.02)
    with pytest.raises(PullbackError, match="slope"):
        concentration(AnalyticTrajectory(stack), lm, [0.0], 0.15, [0.0], 1e-3)


def test_pullback_grows_toward_surface(pullback_setup, flat_stack):
    region, lmap, traj = pullback_setup
    gt = GridTrajectory(traj, flat_stack)
    d = np.geomspace(1.05e-3, 1.05e-2, 30)
    pb = pullback(gt, lmap, lmap.tau0 - d, np.zeros((30, 1)), region=region)
    assert np.all(pb.mask)
    assert np.all(np.diff(pb.u) < 0)
    assert pb.u[0] > 1000
