"""Hajek and Horvitz-Thompson estimators and plug-in functionals."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .designs import SampleDraw
from .errors import EstimationError, ParameterError
from .popmodel import Mean, Quantile, UserFunctional, parse_functional, weighted_quantile_sorted

__all__ = [
    "StepDF",
    "Mean",
    "Quantile",
    "UserFunctional",
    "parse_functional",
    "hajek_df",
    "hajek_mean",
    "ht_mean",
    "apply_functional",
    "weighted_df",
]


@dataclass(frozen=True)
class StepDF:
    """Right-continuous step d.f.: jumps at sorted ``locations``, values ``cum``."""

    locations: np.ndarray
    cum: np.ndarray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        cum = np.asarray(self.cum, dtype=float)
        if loc.ndim != 1 or loc.shape != cum.shape or loc.size == 0:
            raise ParameterError("step d.f. needs matching non-empty arrays")
        if np.any(np.diff(loc) <= 0) or np.any(np.diff(cum) < 0) or cum[-1] != 1.0:
            raise ParameterError("invalid step d.f.")
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "cum", cum)

    @property
    def masses(self) -> np.ndarray:
        return np.diff(self.cum, prepend=0.0)

    def __call__(self, t):
        idx = np.searchsorted(self.locations, t, side="right")
        vals = np.concatenate(([0.0], self.cum))
        return vals[idx]


def weighted_df(y, w) -> StepDF:
    """Step d.f. placing mass proportional to ``w`` on ``y`` (tied values merged)."""
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if y.size == 0:
        raise EstimationError("empty sample")
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], w[order]
    loc, start = np.unique(ys, return_index=True)
    tot = math.fsum(ws)
    # compensated partial sums so the final value is exactly 1
    block = np.add.reduceat(ws, start)
    cum = np.array([math.fsum(block[: k + 1]) for k in range(block.size)]) / tot
    cum[-1] = 1.0
    return StepDF(loc, np.minimum(cum, 1.0))


def _selected(draw: SampleDraw, y):
    y = np.asarray(y, dtype=float)
    if y.shape != draw.D.shape:
        raise ParameterError("y length differs from N")
    s = draw.D
    if not s.any():
        raise EstimationError("empty sample")
    return y[s], draw.pi.pi[s]


def hajek_df(draw: SampleDraw, y) -> StepDF:
    ys, ps = _selected(draw, y)
    return weighted_df(ys, 1.0 / ps)


def hajek_mean(draw: SampleDraw, y) -> float:
    ys, ps = _selected(draw, y)
    w = 1.0 / ps
    return math.fsum(w * ys) / math.fsum(w)


def ht_mean(draw: SampleDraw, y, N: int) -> float:
    ys, ps = _selected(draw, y)
    return math.fsum(ys / ps) / N


def apply_functional(F: StepDF, functional) -> float:
    if isinstance(functional, str):
        functional = parse_functional(functional)
    if isinstance(functional, Mean):
        return math.fsum(F.masses * F.locations)
    if isinstance(functional, Quantile):
        return weighted_quantile_sorted(F.locations, F.cum, functional.p)
    if isinstance(functional, UserFunctional):
        return float(functional.fn(F.locations, F.masses))
    raise ParameterError(f"invalid functional {functional!r}")


def sup_distance(y1, w1, y2, w2) -> float:
    """sup_t |F1(t) - F2(t)| for two weighted step d.f.s, exact over all jump points."""
    y1, w1 = np.asarray(y1, dtype=float), np.asarray(w1, dtype=float)
    y2, w2 = np.asarray(y2, dtype=float), np.asarray(w2, dtype=float)
    grid = np.union1d(y1, y2)

    def cdf(y, w):
        o = np.argsort(y, kind="stable")
        ys, cw = y[o], np.cumsum(w[o]) / w.sum()
        idx = np.searchsorted(ys, grid, side="right")
        return np.concatenate(([0.0], cw))[idx]

    return float(np.max(np.abs(cdf(y1, w1) - cdf(y2, w2))))
