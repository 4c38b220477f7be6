"""Scalar ingredients: model parameters, the cutoff chi, the bump A and the
power nonlinearity with its truncated variant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

# Gauss-Legendre nodes on [0, 1] for integral remainders.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class ParamError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ModelParams:
    dim: int
    p: float
    J: int
    q0: int
    k: int
    lam: float
    kappa0: float
    R: float = 2.0

    @property
    def pbar(self) -> float:
        return min(2.0, self.p)

    @property
    def psi_bound(self) -> float:
        """Sup bound imposed on the gradient of psi."""
        return self.lam * (self.p - 1.0) / (8.0 * (self.p + 1.0))

    def as_dict(self) -> dict:
        return {"dim": self.dim, "p": self.p, "J": self.J, "q0": self.q0,
                "k": self.k, "lambda": self.lam, "kappa0": self.kappa0, "R": self.R}


def k_lower_bounds(p: float, q0: int, lam: float) -> tuple[float, float]:
    return q0 + 1.0, 2.0 * (p + 1.0 + lam * (p - 1.0)) / (lam * (p - 1.0))


def derive_params(N: int, p: float, k: Optional[int] = None, R: float = 2.0) -> ModelParams:
    """Derived constants for dimension N and exponent p.

    k defaults to the smallest admissible integer; an override must not be
    below it.
    """
    if int(N) != N or not 1 <= N <= 4:
        raise ParamError(f"dim outside 1..4 (got {N})")
    N = int(N)
    p = float(p)
    if not p > 1.0:
        raise ParamError(f"p must exceed 1 (got {p})")
    if N >= 3 and p > (N + 2.0) / (N - 2.0):
        raise ParamError(f"p={p} above (N+2)/(N-2) for N={N}")
    J = int(math.floor((2.0 * p + 2.0) / (p - 1.0)))
    q0 = 2 * J + 3
    lam = min(0.5 * (J - (p + 3.0) / (p - 1.0)), 1.0 / p)
    if not lam > 0:
        raise ParamError(f"computed lambda={lam} is not positive")
    b1, b2 = k_lower_bounds(p, q0, lam)
    # small slack so that exact integers are not pushed up by round-off
    kmin = int(math.ceil(max(b1, b2) - 1e-9))
    if k is None:
        k = kmin
    elif k < kmin:
        raise ParamError(f"k={k} below the admissible minimum {kmin}")
    kappa0 = (2.0 * (p + 1.0) / (p - 1.0) ** 2) ** (1.0 / (p - 1.0))
    if R < 2.0:
        raise ParamError("support radius R must be at least 2")
    return ModelParams(N, p, J, q0, int(k), lam, kappa0, float(R))


# ---------------------------------------------------------------- cutoff

def chi(r, deriv: int = 0):
    """Cutoff profile and its first two derivatives.

    chi = 1 on [0,1], 0 on [2, inf); in between it is the logistic of
    q(r) = 1/(2-r) - 1/(r-1), which equals g(2-r)/(g(2-r)+g(r-1)) with
    g(t) = exp(-1/t). Extended evenly to negative r.
    """
    r = np.asarray(r, dtype=float)
    sgn = np.where(r < 0, -1.0, 1.0)
    a = np.abs(r)
    inner = (a > 1.0) & (a < 2.0)
    t = np.where(inner, a, 1.5)
    q = 1.0 / (2.0 - t) - 1.0 / (t - 1.0)
    c = expit(-q)
    if deriv == 0:
        out = np.where(a <= 1.0, 1.0, np.where(inner, c, 0.0))
        return out
    dq = 1.0 / (2.0 - t) ** 2 + 1.0 / (t - 1.0) ** 2
    m = c * (1.0 - c)
    d1 = -m * dq
    if deriv == 1:
        return np.where(inner, d1, 0.0) * sgn
    if deriv == 2:
        ddq = 2.0 / (2.0 - t) ** 3 - 2.0 / (t - 1.0) ** 3
        d2 = -(1.0 - 2.0 * c) * d1 * dq - m * ddq
        return np.where(inner, d2, 0.0)
    raise ValueError("chi derivatives available to order 2")


# ------------------------------------------------------------------ bump

def _radial_A(r, k: int):
    """A as a function of r = |x| with its first two radial derivatives."""
    r = np.asarray(r, dtype=float)
    g0 = np.zeros_like(r)
    g1 = np.zeros_like(r)
    g2 = np.zeros_like(r)
    mid = (r > 1.0) & (r <= 2.0)
    far = r > 2.0
    if np.any(mid):
        rm = r[mid]
        b = rm - chi(rm)
        b1 = 1.0 - chi(rm, 1)
        b2 = -chi(rm, 2)
        g0[mid] = b ** k
        g1[mid] = k * b ** (k - 1) * b1
        g2[mid] = k * (k - 1) * b ** (k - 2) * b1 ** 2 + k * b ** (k - 1) * b2
    if np.any(far):
        rf = r[far]
        g0[far] = rf ** k
        g1[far] = k * rf ** (k - 1)
        g2[far] = k * (k - 1) * rf ** (k - 2)
    return g0, g1, g2


def eval_A(params_or_k, x, derivs: bool = True):
    """Bump A at points x of shape (..., N).

    Returns (value, gradient (..., N), hessian (..., N, N)) or just the value.
    """
    k = params_or_k.k if isinstance(params_or_k, ModelParams) else int(params_or_k)
    x = np.asarray(x, dtype=float)
    r = np.sqrt(np.sum(x * x, axis=-1))
    g0, g1, g2 = _radial_A(r, k)
    if not derivs:
        return g0
    N = x.shape[-1]
    safe = np.where(r > 0, r, 1.0)
    xh = x / safe[..., None]
    grad = g1[..., None] * xh
    P = xh[..., :, None] * xh[..., None, :]
    eye = np.eye(N)
    # g1/r is finite: g1 vanishes for r <= 1
    hess = g2[..., None, None] * P + (g1 / safe)[..., None, None] * (eye - P)
    return g0, grad, hess


# ---------------------------------------------------------- nonlinearity

@dataclass(frozen=True)
class Nonlinearity:
    p: float
    B: Optional[float] = None
    pbar: float = field(init=False)

    def __post_init__(self):
        if self.B is not None and not self.B > 0:
            raise ValueError("truncation level must be positive")
        object.__setattr__(self, "pbar", min(2.0, self.p))

    # untruncated pieces
    def _f(self, u):
        return np.abs(u) ** (self.p - 1.0) * u

    def _fp(self, u):
        return self.p * np.abs(u) ** (self.p - 1.0)

    def _fpp(self, u):
        u = np.asarray(u, dtype=float)
        if self.p < 2.0 and np.any(u == 0):
            raise DomainError("f'' undefined at u=0 for p<2")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = self.p * (self.p - 1.0) * np.abs(u) ** (self.p - 2.0) * np.sign(u)
        return np.where(u == 0, 0.0, out) if self.p >= 2.0 else out

    def f(self, u):
        u = np.asarray(u, dtype=float)
        if self.B is None:
            return self._f(u)
        return self._f(u) * chi(np.abs(u) / self.B)

    def fp(self, u):
        u = np.asarray(u, dtype=float)
        if self.B is None:
            return self._fp(u)
        a = np.abs(u) / self.B
        return self._fp(u) * chi(a) + self._f(u) * chi(a, 1) * np.sign(u) / self.B

    def fpp(self, u):
        u = np.asarray(u, dtype=float)
        if self.B is None:
            return self._fpp(u)
        a = np.abs(u) / self.B
        s = np.sign(u)
        return (self._fpp(u) * chi(a) + 2.0 * self._fp(u) * chi(a, 1) * s / self.B
                + self._f(u) * chi(a, 2) / self.B ** 2)

    def F(self, u):
        u = np.asarray(u, dtype=float)
        au = np.abs(u)
        if self.B is None:
            return au ** (self.p + 1.0) / (self.p + 1.0)
        B = self.B
        lo = np.minimum(au, B)
        out = lo ** (self.p + 1.0) / (self.p + 1.0)
        # transition piece [B, min(|u|, 2B)] by Gauss-Legendre
        hi = np.clip(au, B, 2.0 * B)
        span = hi - B
        nodes = B + span[..., None] * _GL_X
        vals = nodes ** self.p * chi(nodes / B)
        out = out + span * np.sum(vals * _GL_W, axis=-1)
        return out

    # cancellation-free increments, valid when V and V+w share a sign
    def _stable(self, V, w):
        V = np.asarray(V, dtype=float)
        w = np.asarray(w, dtype=float)
        return np.abs(w) < 0.5 * np.abs(V)

    def f_increment(self, V, w):
        """f(V+w) - f(V)."""
        V, w = np.broadcast_arrays(np.asarray(V, float), np.asarray(w, float))
        ok = self._stable(V, w)
        th = V[..., None] + _GL_X * w[..., None]
        stable = w * np.sum(self.fp(th) * _GL_W, axis=-1)
        return np.where(ok, stable, self.f(V + w) - self.f(V))

    def f_remainder2(self, V, w):
        """f(V+w) - f(V) - f'(V) w."""
        V, w = np.broadcast_arrays(np.asarray(V, float), np.asarray(w, float))
        ok = self._stable(V, w)
        Vs = np.where(ok, V, 1.0)
        th = Vs[..., None] + _GL_X * np.where(ok, w, 0.0)[..., None]
        stable = w * w * np.sum(self.fpp(th) * (1.0 - _GL_X) * _GL_W, axis=-1)
        direct = self.f(V + w) - self.f(V) - self.fp(V) * w
        return np.where(ok, stable, direct)

    def fp_increment(self, V, d):
        """f'(V+d) - f'(V)."""
        V, d = np.broadcast_arrays(np.asarray(V, float), np.asarray(d, float))
        ok = self._stable(V, d)
        Vs = np.where(ok, V, 1.0)
        th = Vs[..., None] + _GL_X * np.where(ok, d, 0.0)[..., None]
        stable = d * np.sum(self.fpp(th) * _GL_W, axis=-1)
        return np.where(ok, stable, self.fp(V + d) - self.fp(V))

    def F_remainder3(self, V, w):
        """F(V+w) - F(V) - f(V) w - f'(V) w^2 / 2."""
        V, w = np.broadcast_arrays(np.asarray(V, float), np.asarray(w, float))
        ok = self._stable(V, w)
        Vs = np.where(ok, V, 1.0)
        th = Vs[..., None] + _GL_X * np.where(ok, w, 0.0)[..., None]
        stable = 0.5 * w ** 3 * np.sum(self.fpp(th) * (1.0 - _GL_X) ** 2 * _GL_W, axis=-1)
        direct = self.F(V + w) - self.F(V) - self.f(V) * w - 0.5 * self.fp(V) * w * w
        return np.where(ok, stable, direct)


# ------------------------------------------------------ Taylor sampling

TAYLOR_KEYS = ("taylor0", "taylor1", "taylor10", "taylor")


def taylor_ratios(nl: Nonlinearity, u, v):
    """LHS/RHS of the four Taylor inequalities at samples (u > 0, v)."""
    p, pb = nl.p, nl.pbar
    u = np.asarray(u, float)
    v = np.asarray(v, float)
    av = np.abs(v)
    F, f = nl.F, nl.f
    rhs0 = av ** (p + 1) + u ** (p - pb) * av ** (pb + 1)
    lhs0 = np.abs(F(u + v) - F(u) - f(u) * v - 0.5 * nl.fp(u) * v * v)
    lhs1 = np.abs((f(u + v) - f(u) - nl.fp(u) * v) * v)
    lhs10 = np.abs(nl.fp(u + v) - nl.fp(u))
    rhs10 = av ** p / u + u ** (p - 2) * av
    lhsT = np.abs(f(u + v) - f(u) - nl.fp(u) * v - 0.5 * nl.fpp(u) * v * v)
    rhsT = av ** (p + 1) / u + u ** (p - pb - 1) * av ** (pb + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = {
            "taylor0": np.where(rhs0 > 0, lhs0 / rhs0, 0.0),
            "taylor1": np.where(rhs0 > 0, lhs1 / rhs0, 0.0),
            "taylor10": np.where(rhs10 > 0, lhs10 / rhs10, 0.0),
            "taylor": np.where(rhsT > 0, lhsT / rhsT, 0.0),
        }
    return out


def sample_taylor_bounds(nl: Nonlinearity, trials: int, u_range=(0.1, 10.0),
                         v_range=(1e-3, 10.0), seed: int = 0) -> dict:
    """Empirical constants (max LHS/RHS) for the four Taylor inequalities.

    u is log-uniform in u_range; |v| log-uniform in v_range with random sign.
    """
    if trials < 1000:
        raise ValueError("need at least 1000 trials")
    if u_range[0] <= 0:
        raise ValueError("u_range must lie in (0, inf)")
    rng = np.random.default_rng(seed)
    lu = np.log(u_range)
    lv = np.log(v_range)
    u = np.exp(rng.uniform(lu[0], lu[1], trials))
    v = np.exp(rng.uniform(lv[0], lv[1], trials)) * rng.choice([-1.0, 1.0], trials)
    # avoid u+v == 0 exactly for p<2 second derivatives (not used at u+v)
    r = taylor_ratios(nl, u, v)
    return {key: float(np.max(r[key])) for key in TAYLOR_KEYS}
