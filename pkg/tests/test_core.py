import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from forge.core import (DomainError, Nonlinearity, ParamError, chi, derive_params, eval_A,
                        sample_taylor_bounds, taylor_ratios)


@pytest.mark.parametrize("N,p,expect", [
    (1, 3, (4, 11, 1 / 3, 14)),
    (3, 5, (3, 9, 1 / 5, 17)),
    (2, 2, (6, 15, 1 / 2, 16)),
])
def test_param_table(N, p, expect):
    P = derive_params(N, p)
    assert (P.J, P.q0, P.k) == (expect[0], expect[1], expect[3])
    assert P.lam == pytest.approx(expect[2], abs=1e-15)


def test_kappa0_p3():
    assert derive_params(1, 3).kappa0 == pytest.approx(math.sqrt(2), rel=1e-15)


@given(N=st.integers(1, 4), p=st.floats(1.05, 3.0))
@settings(max_examples=60, deadline=None)
def test_derive_deterministic_and_constraints(N, p):
    P = derive_params(N, p)
    assert derive_params(N, p) == P
    assert P.q0 == 2 * P.J + 3
    assert P.k >= P.q0 + 1
    assert P.k >= 2 * (p + 1 + P.lam * (p - 1)) / (P.lam * (p - 1)) - 1e-9
    assert 0 < P.lam <= 1 / p


def test_param_errors():
    with pytest.raises(ParamError, match="dim outside 1..4"):
        derive_params(5, 3)
    with pytest.raises(ParamError):
        derive_params(1, 1.0)
    with pytest.raises(ParamError):
        derive_params(3, 6.0)
    with pytest.raises(ParamError):
        derive_params(1, 3, k=13)
    assert derive_params(1, 3, k=20).k == 20


@given(r=st.floats(-5, 5))
def test_chi_range_and_plateaus(r):
    c = float(chi(r))
    assert 0.0 <= c <= 1.0
    if abs(r) <= 1:
        assert c == 1.0
    if abs(r) >= 2:
        assert c == 0.0
    assert float(chi(-r)) == c


@given(a=st.floats(1.0, 2.0), b=st.floats(1.0, 2.0))
def test_chi_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert chi(lo) >= chi(hi)


def test_chi_derivatives_match_differences():
    r = np.linspace(1.05, 1.95, 19)
    for h in (1e-3, 5e-4):
        d1 = (chi(r + h) - chi(r - h)) / (2 * h)
        assert np.max(np.abs(d1 - chi(r, 1))) < 50 * h ** 2
    d2 = (chi(r + 1e-4) - 2 * chi(r) + chi(r - 1e-4)) / 1e-8
    assert np.max(np.abs(d2 - chi(r, 2))) < 1e-3


@given(angle=st.floats(0, 2 * math.pi), x=st.floats(-3, 3), y=st.floats(-3, 3))
@settings(max_examples=80)
def test_A_rotation_invariant(angle, x, y):
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    pt = np.array([x, y])
    a1 = eval_A(14, pt, derivs=False)
    a2 = eval_A(14, R @ pt, derivs=False)
    assert a2 == pytest.approx(a1, rel=1e-12, abs=1e-300)


def test_A_gradient_second_order():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-2.8, 2.8, (400, 2))
    r = np.linalg.norm(pts, axis=-1)
    pts = pts[(np.abs(r - 1) > 0.05) & (np.abs(r - 2) > 0.05)]
    _, g, _ = eval_A(6, pts)
    errs = []
    for h in (1e-3, 5e-4):
        fd = np.stack([(eval_A(6, pts + h * e, False) - eval_A(6, pts - h * e, False)) / (2 * h)
                       for e in np.eye(2)], -1)
        errs.append(np.max(np.abs(fd - g) / (1 + np.abs(g))))
    assert math.log2(errs[0] / errs[1]) >= 1.9


def test_A_vanishes_in_core():
    assert np.all(eval_A(14, np.array([[0.3], [-0.99]]), False) == 0)


@given(u=st.floats(-50, 50), B=st.floats(1, 100))
def test_truncation_exact_below_level(u, B):
    nl, nt = Nonlinearity(3.0), Nonlinearity(3.0, B)
    if abs(u) <= B:
        assert nt.f(u) == nl.f(u)


def test_F_derivative_is_f():
    for nl in (Nonlinearity(3.0), Nonlinearity(3.0, 2.0), Nonlinearity(1.5)):
        u = np.linspace(0.2, 3.5, 23)
        errs = []
        for h in (1e-3, 5e-4):
            fd = (nl.F(u + h) - nl.F(u - h)) / (2 * h)
            errs.append(np.max(np.abs(fd - nl.f(u))))
        assert errs[1] < 1e-9 or math.log2(errs[0] / errs[1]) >= 1.9


@given(V=st.floats(1, 100), t=st.floats(-0.4, 0.4))
@settings(max_examples=100)
def test_remainders_match_direct_forms(V, t):
    nl = Nonlinearity(3.0)
    w = t * V
    d_inc = nl.f(V + w) - nl.f(V)
    assert float(nl.f_increment(V, w)) == pytest.approx(d_inc, rel=1e-9, abs=1e-9 * V ** 3)
    exact = 3 * V * w ** 2 + w ** 3
    assert float(nl.f_remainder2(V, w)) == pytest.approx(exact, rel=1e-9, abs=1e-12)
    exact3 = V * w ** 3 + w ** 4 / 4
    assert float(nl.F_remainder3(V, w)) == pytest.approx(exact3, rel=1e-9, abs=1e-12)


def test_remainder_no_cancellation():
    nl = Nonlinearity(3.0)
    V, w = 1e3, 1e-9
    assert float(nl.f_remainder2(V, w)) == pytest.approx(3 * V * w * w, rel=1e-12)


def test_fpp_domain_error_for_small_p():
    with pytest.raises(DomainError):
        Nonlinearity(1.5).fpp(np.array([0.0, 1.0]))


def test_taylor_sampling_reproducible():
    nl = Nonlinearity(3.0)
    a = sample_taylor_bounds(nl, 5000, seed=3)
    assert a == sample_taylor_bounds(nl, 5000, seed=3)
    assert all(np.isfinite(v) and v > 0 for v in a.values())


def test_taylor_ratio_spot_values():
    r = taylor_ratios(Nonlinearity(3.0), np.array([1.0]), np.array([1.0]))
    # F(2)-F(1)-f(1)-f'(1)/2 = 5/4 against |v|^4 + u|v|^3 = 2
    assert r["taylor0"][0] == pytest.approx(0.625)
