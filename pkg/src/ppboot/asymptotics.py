"""Limit quantities of the Hajek empirical process and finite-N diagnostics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize, special, stats

from .designs import SampleDraw
from .errors import DegenerateVarianceError, MomentError, ParameterError
from .estimators import sup_distance
from .popmodel import Mean, Population, Quantile, SuperpopulationModel

TAIL = 1e-10


@dataclass(frozen=True)
class KernelSpec:
    """Superpopulation functionals entering the covariance kernel.

    ``J(alpha, y)`` is E[X^alpha 1{Y <= y}], so ``K(alpha, y) = J / F``.
    """

    f: float
    F: Callable
    J: Callable
    density: Optional[Callable]
    EX: float
    EX2: float
    EXinv: float
    d: float
    A: float
    support: tuple
    atoms: Optional[np.ndarray] = None
    model: Optional[SuperpopulationModel] = None

    def K(self, alpha: float, y):
        Fy = np.asarray(self.F(y), dtype=float)
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.J(alpha, y) / Fy

    def quantile(self, p: float) -> float:
        if self.atoms is not None:
            cum = self.F(self.atoms)
            return float(self.atoms[np.argmax(cum >= p - 1e-15)])
        lo, hi = self.support
        return float(optimize.brentq(lambda t: self.F(t) - p, lo - 1.0, hi + 1.0, xtol=1e-13))


def _gaussian_parts(model: SuperpopulationModel):
    p = model.p
    a, b, s = float(p["intercept"]), float(p["slope"]), model.noise
    xn, xw = model.x_rule()

    def F(y):
        y = np.asarray(y, dtype=float)
        return (stats.norm.cdf((y[..., None] - a - b * xn) / s) * xw).sum(axis=-1)

    def J(alpha, y):
        y = np.asarray(y, dtype=float)
        return (stats.norm.cdf((y[..., None] - a - b * xn) / s) * xw * xn**alpha).sum(axis=-1)

    def dens(y):
        y = np.asarray(y, dtype=float)
        return (stats.norm.pdf((y[..., None] - a - b * xn) / s) * xw).sum(axis=-1) / s

    z = stats.norm.isf(TAIL)
    lo = a + min(b * xn.min(), b * xn.max()) - z * s
    hi = a + max(b * xn.min(), b * xn.max()) + z * s
    return F, J, dens, (lo, hi), None


def _table_parts(model: SuperpopulationModel):
    t = np.asarray(model.p["table"], dtype=float)
    ys, xs, ws = t[:, 0], t[:, 1], t[:, 2]

    def F(y):
        y = np.asarray(y, dtype=float)
        return ((ys <= y[..., None]) * ws).sum(axis=-1)

    def J(alpha, y):
        y = np.asarray(y, dtype=float)
        return ((ys <= y[..., None]) * ws * xs**alpha).sum(axis=-1)

    atoms = np.unique(ys)
    return F, J, None, (float(atoms[0]), float(atoms[-1])), atoms


def kernel_spec_from_model(model: SuperpopulationModel, f: float) -> KernelSpec:
    if not 0 < f < 1:
        raise ParameterError("sampling fraction must lie in (0, 1)")
    EX, EX2, EXinv = model.x_moment(1), model.x_moment(2), model.x_moment(-1)
    if not math.isfinite(EXinv):
        raise MomentError("E[1/X] diverges for this model")
    if not math.isfinite(EX2):
        raise MomentError("E[X^2] diverges for this model")
    if model.family == "custom-table":
        F, J, dens, support, atoms = _table_parts(model)
    else:
        F, J, dens, support, atoms = _gaussian_parts(model)
    d = f - f * f * EX2 / EX**2
    if d <= 0:
        raise ParameterError(f"d = {d:.4g} is not positive")
    return KernelSpec(f, F, J, dens, EX, EX2, EXinv, d, EX * EXinv / f, support, atoms, model)


def _terms(spec: KernelSpec, y, t):
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    m = np.minimum(y, t)
    Fy, Ft, Fm = spec.F(y), spec.F(t), spec.F(m)
    Jy, Jt, Jm = spec.J(-1, y), spec.J(-1, t), spec.J(-1, m)
    J1y, J1t = spec.J(1, y), spec.J(1, t)
    f, EX = spec.f, spec.EX
    first = EX * Jm - f * Fm
    second = -(f**3 / spec.d) * ((Fy - J1y / EX) * (Ft - J1t / EX))
    return first, second, (Fy, Ft, Jy, Jt)


def cov_kernel(spec: KernelSpec, y, t):
    """Covariance kernel C^H(y, t) of the limiting Hajek process.

    Written with J_a(y) = K_a(y) F(y) so it stays finite where F vanishes.
    The third term is f F(y)F(t) - E[X] (K_-1(y) + K_-1(t) - E[1/X]) F(y)F(t),
    which is what the variance limit of the linearized estimator gives.
    """
    first, second, (Fy, Ft, Jy, Jt) = _terms(spec, y, t)
    FF = Fy * Ft
    third = -spec.EX * (Jy * Ft + Jt * Fy - spec.EXinv * FF) + spec.f * FF
    return first + second + third


def cov_kernel_as_displayed(spec: KernelSpec, y, t):
    """Variant with the -1 of the third term inside the E[X]/f factor."""
    first, second, (Fy, Ft, Jy, Jt) = _terms(spec, y, t)
    third = -spec.EX * (Jy * Ft + Jt * Fy - (spec.EXinv + 1.0) * (Fy * Ft))
    return first + second + third


def bridge_kernel(spec: KernelSpec, y, t):
    """f (A - 1) (F(y ^ t) - F(y) F(t))."""
    y = np.asarray(y, dtype=float)
    t = np.asarray(t, dtype=float)
    return spec.f * (spec.A - 1) * (spec.F(np.minimum(y, t)) - spec.F(y) * spec.F(t))


@dataclass(frozen=True)
class Sigma2:
    value: float
    error: float

    def __float__(self) -> float:
        return self.value


def _double_integral(spec: KernelSpec, order: int) -> float:
    lo, hi = spec.support
    if spec.atoms is not None:
        # C is constant on cells between consecutive atoms and vanishes outside
        a = spec.atoms
        mids = a[:-1]
        widths = np.diff(a)
        C = cov_kernel(spec, mids[:, None], mids[None, :])
        return float(widths @ C @ widths)
    z, w = special.roots_legendre(order)
    t = 0.5 * (hi - lo) * (z + 1) + lo
    wt = 0.5 * (hi - lo) * w
    # integrate over y < t with a mapped rule per outer node (kernel has a kink on y = t)
    Y = lo + (t[:, None] - lo) * 0.5 * (z[None, :] + 1)
    WY = (t[:, None] - lo) * 0.5 * w[None, :]
    C = cov_kernel(spec, Y, np.broadcast_to(t[:, None], Y.shape))
    return float(2.0 * np.sum(wt[:, None] * WY * C))


def sigma2_theta(spec: KernelSpec, functional) -> Sigma2:
    """Asymptotic variance of sqrt(n)(theta_hat - theta_N) for mean or quantile."""
    if isinstance(functional, Mean):
        v1 = _double_integral(spec, 60)
        if spec.atoms is not None:
            return Sigma2(v1, 0.0)
        v2 = _double_integral(spec, 120)
        return Sigma2(v2, abs(v2 - v1))
    if isinstance(functional, Quantile):
        q = spec.quantile(functional.p)
        if spec.density is None:
            raise DegenerateVarianceError("model has no density; quantile variance undefined")
        fq = float(spec.density(q))
        if fq <= 0:
            raise DegenerateVarianceError(f"zero density at the {functional.p} quantile")
        return Sigma2(float(cov_kernel(spec, q, q)) / fq**2, 0.0)
    raise ParameterError("asymptotic variance is available for mean and quantiles only")


# finite-N quantities ------------------------------------------------------------


def empirical_process(draw: SampleDraw, pop: Population, grid) -> np.ndarray:
    """sqrt(n) (F_H(y) - F_N(y)) on ``grid``."""
    grid = np.asarray(grid, dtype=float)
    s = draw.D
    if not s.any():
        raise ParameterError("empty sample")
    w = 1.0 / draw.pi.pi[s]
    ind = pop.y[s][:, None] <= grid[None, :]
    FH = (w[:, None] * ind).sum(axis=0) / w.sum()
    FN = (pop.y[:, None] <= grid[None, :]).mean(axis=0)
    return math.sqrt(draw.n) * (FH - FN)


def glivenko_sup(draw: SampleDraw, pop: Population) -> float:
    s = draw.D
    if not s.any():
        raise ParameterError("empty sample")
    return sup_distance(pop.y[s], 1.0 / draw.pi.pi[s], pop.y, np.ones(pop.N))


@dataclass
class LemmaReport:
    dN_over_N: float
    d_limit: float
    sum_a: np.ndarray
    limit_a: np.ndarray
    sum_b: np.ndarray
    limit_b: np.ndarray
    Z: np.ndarray
    S2_over_N: np.ndarray
    limit_s2: np.ndarray

    @property
    def gaps(self) -> dict:
        return {
            "d": abs(self.dN_over_N - self.d_limit),
            "a": float(np.max(np.abs(self.sum_a - self.limit_a))),
            "b": float(np.max(np.abs(self.sum_b - self.limit_b))),
            "s2": float(np.max(np.abs(self.S2_over_N - self.limit_s2))),
        }


def s2_limit(spec: KernelSpec, y) -> np.ndarray:
    F = spec.F(y)
    Jm1 = spec.J(-1, y)
    J1 = spec.J(1, y)
    f, EX = spec.f, spec.EX
    # written with J to stay finite at F = 0
    return (
        (EX / f * Jm1 - F) * (1 - F)
        - EX / f * (Jm1 - spec.EXinv * F) * F
        - f**2 / spec.d * (F - J1 / EX) ** 2
    )


def lemma_diagnostics(pop: Population, pi, grid, spec: Optional[KernelSpec] = None) -> LemmaReport:
    """Finite-N sums behind the kernel and their limits (when ``spec`` is given)."""
    pi = np.asarray(getattr(pi, "pi", pi), dtype=float)
    grid = np.asarray(grid, dtype=float)
    N = pop.N
    I = (pop.y[:, None] <= grid[None, :]).astype(float)
    c = I - I.mean(axis=0)
    dN = math.fsum(pi * (1 - pi))
    sum_a = (c / pi[:, None]).sum(axis=0) / N
    sum_b = ((1 - pi)[:, None] * c).sum(axis=0) / N
    Z = c - pi[:, None] * (((1 - pi)[:, None] * c).sum(axis=0) / dN)
    S2 = ((1 / pi - 1)[:, None] * Z**2).sum(axis=0) / N
    if spec is not None:
        F = spec.F(grid)
        d_lim = spec.d
        la = spec.EX / spec.f * (spec.J(-1, grid) - spec.EXinv * F)
        lb = spec.f * (F - spec.J(1, grid) / spec.EX)
        ls = s2_limit(spec, grid)
    else:
        d_lim = float("nan")
        la = lb = ls = np.full(grid.size, np.nan)
    return LemmaReport(dN / N, d_lim, sum_a, la, sum_b, lb, Z, S2, ls)


def export_kernel_grid(spec: KernelSpec, grid, path=None, as_displayed: bool = False) -> str:
    grid = np.asarray(grid, dtype=float)
    fn = cov_kernel_as_displayed if as_displayed else cov_kernel
    C = fn(spec, grid[:, None], grid[None, :])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["y"] + [repr(float(g)) for g in grid])
    for g, row in zip(grid.tolist(), C.tolist()):
        w.writerow([repr(g)] + [repr(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
