"""Spatial grids, log-spaced s-grids and second-order stencils.

Stencil helpers act on the trailing ``ndim`` axes so that a leading batch
axis (typically the s-nodes) is carried along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class SpatialGrid:
    dim: int
    L: float
    h: float

    def __post_init__(self):
        if self.h <= 0 or self.L <= 0:
            raise ValueError("grid needs h > 0 and L > 0")

    @cached_property
    def n(self) -> int:
        return 2 * int(round(self.L / self.h)) + 1

    @cached_property
    def axis(self) -> np.ndarray:
        m = (self.n - 1) // 2
        return np.arange(-m, m + 1) * self.h

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.dim

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (*shape, dim)."""
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        return np.stack(mesh, axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.points ** 2, axis=-1))

    @cached_property
    def interior(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[(slice(1, -1),) * self.dim] = True
        return m

    def refined(self) -> "SpatialGrid":
        return SpatialGrid(self.dim, self.L, self.h / 2)

    def integrate(self, f) -> np.ndarray:
        """Trapezoid rule over the trailing spatial axes."""
        out = np.asarray(f, dtype=float)
        for _ in range(self.dim):
            out = np.trapezoid(out, dx=self.h, axis=-1)
        return out

    def l2(self, f) -> np.ndarray:
        return np.sqrt(self.integrate(np.asarray(f) ** 2))


def s_nodes(s_min: float, s_max: float = 1.0, per_decade: float = 64) -> np.ndarray:
    """Geometric nodes descending from s_max by powers of 2^(1/K).

    K nodes per octave is the integer closest to per_decade*log10(2), so that
    halving an s-node lands on another node. Returned in ascending order.
    """
    if not 0 < s_min < s_max <= 1.0:
        raise ValueError("need 0 < s_min < s_max <= 1")
    K = max(1, int(round(per_decade * math.log10(2.0))))
    if K / math.log10(2.0) < 8 - 1e-9:
        K = int(math.ceil(8 * math.log10(2.0)))
    m = int(math.ceil(K * math.log2(s_max / s_min) - 1e-9))
    i = np.arange(m, -1, -1)
    return s_max * 2.0 ** (-i / K)


def nodes_per_octave(s: np.ndarray) -> int:
    return int(round(math.log(2.0) / math.log(s[1] / s[0])))


# ------------------------------------------------------------- stencils

def _d1(f, h, axis):
    return np.gradient(f, h, axis=axis, edge_order=2)


def _d2(f, h, axis):
    f = np.moveaxis(f, axis, -1)
    out = np.empty_like(f)
    out[..., 1:-1] = (f[..., 2:] - 2.0 * f[..., 1:-1] + f[..., :-2]) / h ** 2
    out[..., 0] = (2 * f[..., 0] - 5 * f[..., 1] + 4 * f[..., 2] - f[..., 3]) / h ** 2
    out[..., -1] = (2 * f[..., -1] - 5 * f[..., -2] + 4 * f[..., -3] - f[..., -4]) / h ** 2
    return np.moveaxis(out, -1, axis)


def grad(f, h: float, dim: int) -> np.ndarray:
    """Central-difference gradient; component axis is put first."""
    f = np.asarray(f, dtype=float)
    return np.stack([_d1(f, h, f.ndim - dim + i) for i in range(dim)])


def laplacian(f, h: float, dim: int) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    return sum(_d2(f, h, f.ndim - dim + i) for i in range(dim))


def hessian(f, h: float, dim: int) -> np.ndarray:
    """Second differences, shape (dim, dim, ...)."""
    f = np.asarray(f, dtype=float)
    out = np.empty((dim, dim) + f.shape)
    for i in range(dim):
        ai = f.ndim - dim + i
        out[i, i] = _d2(f, h, ai)
        for j in range(i + 1, dim):
            out[i, j] = out[j, i] = _d1(_d1(f, h, ai), h, f.ndim - dim + j)
    return out


def dot_grad(vec, f, h: float, dim: int) -> np.ndarray:
    """vec . grad f with vec of shape (dim, *spatial)."""
    g = grad(f, h, dim)
    vec = np.asarray(vec)
    vec = vec.reshape((dim,) + (1,) * (g.ndim - vec.ndim) + vec.shape[1:])
    return np.sum(vec * g, axis=0)
