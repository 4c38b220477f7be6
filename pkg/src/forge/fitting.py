"""Log-log power-law fits."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np


class FitError(ValueError):
    pass


def fit_exponent(x, y, window: Optional[tuple] = None):
    """Least-squares slope of log y against log x.

    Returns (slope, intercept, rms) with the intercept in natural log and the
    rms of the residual in log space. Needs at least 8 positive points that
    span a decade.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if window is not None:
        keep = (x >= window[0]) & (x <= window[1])
        x, y = x[keep], y[keep]
    if x.size < 8:
        raise FitError(f"need at least 8 points, got {x.size}")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(y)):
        raise FitError("fit needs positive finite values")
    if np.log10(x.max() / x.min()) < 1.0 - 1e-9:
        raise FitError("fit window spans less than a decade")
    lx, ly = np.log(x), np.log(y)
    A = np.vstack([lx, np.ones_like(lx)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, ly, rcond=None)
    rms = float(np.sqrt(np.mean((ly - A @ np.array([slope, icpt])) ** 2)))
    return float(slope), float(icpt), rms


@dataclass
class DecayFit:
    name: str
    slope: float
    intercept: float
    rms: float
    predicted: Optional[float]
    window: tuple
    low_confidence: bool = False

    def as_dict(self):
        return asdict(self)


def decay_fit(name, x, y, window, predicted=None) -> DecayFit:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    keep = (x >= window[0]) & (x <= window[1])
    xs, ys = x[keep], y[keep]
    low = xs.size < 2 or np.log10(xs.max() / xs.min()) < 1.0 - 1e-9 or xs.size < 8
    if low:
        if xs.size < 2:
            return DecayFit(name, float("nan"), float("nan"), float("nan"), predicted,
                            tuple(window), True)
        lx, ly = np.log(xs), np.log(ys)
        slope, icpt = np.polyfit(lx, ly, 1)
        rms = float(np.sqrt(np.mean((ly - slope * lx - icpt) ** 2)))
        return DecayFit(name, float(slope), float(icpt), rms, predicted,
                        (float(xs.min()), float(xs.max())), True)
    slope, icpt, rms = fit_exponent(xs, ys)
    return DecayFit(name, slope, icpt, rms, predicted, (float(xs.min()), float(xs.max())))
