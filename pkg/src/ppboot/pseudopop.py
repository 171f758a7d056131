"""Pseudo-population builders: HT, multinomial, conditional Poisson, double calibration, hot deck."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import designs
from .designs import SampleDraw
from .errors import (
    CalibrationInfeasibleError,
    CapabilityError,
    EstimationError,
    ParameterError,
)
from .popmodel import Population
from .rng import SeedLike, as_generator

BUILDERS = ("ht", "mul", "cpp", "dcal", "hd")
TAU_ONE = 1.0 - 1e-12


@dataclass(frozen=True)
class SampleData:
    """What a builder may see: sampled values plus known population totals.

    ``full_x`` is the size variable for every population unit, needed only by
    the hot-deck builder.
    """

    ids: np.ndarray
    y: np.ndarray
    x: np.ndarray
    pi: np.ndarray
    N: int
    xbar: Optional[float] = None
    full_x: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.ids.size == 0:
            raise EstimationError("empty sample")
        if not (self.ids.shape == self.y.shape == self.x.shape == self.pi.shape):
            raise ParameterError("sample arrays differ in length")

    @property
    def n(self) -> int:
        return int(self.ids.size)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.pi

    @classmethod
    def from_draw(cls, draw: SampleDraw, pop: Population, full_x: bool = True) -> "SampleData":
        s = draw.index
        if s.size == 0:
            raise EstimationError("empty sample")
        return cls(
            ids=s,
            y=pop.y[s].copy(),
            x=pop.x[s].copy(),
            pi=draw.pi.pi[s].copy(),
            N=pop.N,
            xbar=pop.xbar,
            full_x=pop.x if full_x else None,
        )


@dataclass(frozen=True)
class PseudoPopulation:
    """Predicted population.  ``donor`` holds population unit indices (0-based)."""

    donor: np.ndarray
    y: np.ndarray
    x: np.ndarray
    counts: Optional[np.ndarray] = None
    builder: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def N_star(self) -> int:
        return int(self.y.size)

    @property
    def xbar(self) -> float:
        return math.fsum(self.x) / self.N_star


def _expand(sd: SampleData, counts: np.ndarray, builder: str, **meta) -> PseudoPopulation:
    counts = np.asarray(counts, dtype=np.int64)
    return PseudoPopulation(
        donor=np.repeat(sd.ids, counts),
        y=np.repeat(sd.y, counts),
        x=np.repeat(sd.x, counts),
        counts=counts,
        builder=builder,
        meta=meta,
    )


def _round_with_cps(shares: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Floors plus a conditional Poisson draw over the fractional parts.

    Returns ``(counts, tau)``.  The number of round-ups is the (integer) sum of
    the fractional parts, so the total is preserved.
    """
    base = np.floor(shares)
    tau = shares - base
    eps = np.zeros(shares.size, dtype=np.int64)
    one = tau >= TAU_ONE
    eps[one] = 1
    tau_eff = np.where(one, 0.0, tau)
    tau_eff[tau_eff < 1e-12] = 0.0
    n0 = int(round(math.fsum(shares) - base.sum())) - int(one.sum())
    live = np.flatnonzero(tau_eff > 0)
    if n0 > 0:
        if n0 >= live.size:
            eps[live] = 1
        else:
            t = tau_eff[live]
            t = t * (n0 / math.fsum(t))
            mask = designs.draw_masks("cps", t, 1, rng, n=n0)[0]
            eps[live[mask.astype(bool)]] = 1
    return base.astype(np.int64) + eps, tau


def build_ht(sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    """Replicate unit i floor(1/pi_i) times plus one more with probability frac(1/pi_i)."""
    rng = as_generator(seed)
    inv = sd.weights
    base = np.floor(inv)
    r = inv - base
    eps = rng.random(sd.n) < r
    return _expand(sd, base.astype(np.int64) + eps, "ht")


def build_mul(sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    rng = as_generator(seed)
    w = sd.weights
    counts = rng.multinomial(sd.N, w / w.sum())
    return _expand(sd, counts, "mul")


def cpp_shares(sd: SampleData) -> np.ndarray:
    w = sd.weights
    return sd.N * w / math.fsum(w)


def build_cpp(sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    rng = as_generator(seed)
    counts, tau = _round_with_cps(cpp_shares(sd), rng)
    return _expand(sd, counts, "cpp", tau=tau)


# double calibration -------------------------------------------------------------


@dataclass(frozen=True)
class DCalSolution:
    fractional: np.ndarray
    active: np.ndarray
    lam: float
    mu: float
    counts: np.ndarray
    anchor: np.ndarray
    kkt_residual: float
    xbar_residual: float


def _check_feasible(x: np.ndarray, N: int, total: float) -> None:
    n = x.size
    R = N - n
    extra = total - math.fsum(x)
    if R < 0:
        raise CalibrationInfeasibleError(f"size constraint: N={N} is below the sample size {n}")
    scale = max(abs(total), 1.0) * 1e-12
    if R == 0:
        if abs(extra) > scale:
            raise CalibrationInfeasibleError("mean constraint: N equals n but the sample x mean differs from the target")
        return
    lo, hi = R * x.min(), R * x.max()
    if extra < lo - scale or extra > hi + scale:
        raise CalibrationInfeasibleError(
            f"mean constraint: target x mean of the {R} added units ({extra / R:.6g}) "
            f"lies outside the sampled x range [{x.min():.6g}, {x.max():.6g}]"
        )


def _lambda_for(a: np.ndarray, N: int) -> float:
    """Exact root of sum max(1, a_i + lam) = N (N > len(a))."""
    order = np.sort(a)[::-1]
    n = a.size
    csum = np.cumsum(order)
    for k in range(1, n + 1):
        lam = (N - (n - k) - csum[k - 1]) / k
        if order[k - 1] + lam >= 1 and (k == n or order[k] + lam <= 1):
            return float(lam)
    # rounding left no consistent k; fall back to the all-free value
    return float((N - csum[-1]) / n)


def _dual_solve(c: np.ndarray, x: np.ndarray, N: int, total: float, max_iter: int = 400):
    """Dual of the projection problem, reduced to one dimension.

    Primal solution: m_i = max(1, c_i + lam + mu x_i).  For fixed mu the
    size constraint fixes lam exactly; the mean-constraint residual is then
    nondecreasing in mu, so mu is bracketed and bisected, snapping to the
    exact solution of the current active pattern once it satisfies KKT.
    """

    def state(mu):
        lam = _lambda_for(c + mu * x, N)
        m = np.maximum(1.0, c + lam + mu * x)
        return lam, math.fsum(m * x) - total

    def exact(mu):
        lam, _ = state(mu)
        free = (c + lam + mu * x) > 1
        v = _pattern_solve(c, x, N, total, free)
        if v is not None and _kkt_ok(c, x, v, free) and _residual_ok(c, x, N, total, v):
            return v, free
        return None

    if np.ptp(x) == 0:
        lam, _ = state(0.0)
        return np.array([lam, 0.0]), (c + lam) > 1
    hit = exact(0.0)
    if hit is not None:
        return hit
    span = 1.0 / max(np.ptp(x), 1e-300)
    lo, hi = -span, span
    while state(lo)[1] > 0:
        lo *= 2
    while state(hi)[1] < 0:
        hi *= 2
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        hit = exact(mid)
        if hit is not None:
            return hit
        if state(mid)[1] < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, abs(mid)):
            break
    mu = 0.5 * (lo + hi)
    lam, _ = state(mu)
    return np.array([lam, mu]), (c + lam + mu * x) > 1


def _residual_ok(c, x, N, total, v, tol=1e-10):
    m = np.maximum(1.0, c + v[0] + v[1] * x)
    return abs(math.fsum(m) - N) <= tol * N and abs(math.fsum(m * x) - total) <= tol * abs(total)


def _pattern_solve(c, x, N, total, free):
    nf = int(free.sum())
    if nf == 0:
        return None
    xf = x[free]
    cf = c[free]
    fixed = ~free
    A = np.array([[nf, xf.sum()], [xf.sum(), (xf * xf).sum()]])
    rhs = np.array([N - cf.sum() - fixed.sum(), total - (xf * cf).sum() - x[fixed].sum()])
    sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    return sol


def _kkt_ok(c, x, v, free, tol=1e-9):
    z = c + v[0] + v[1] * x
    return bool(np.all(z[free] >= 1 - tol) and np.all(z[~free] <= 1 + tol))


def solve_dcal_fractional(c, x, N: int, xbar: float):
    """Projection of ``c`` onto {m >= 1, sum m = N, sum m x = N xbar}.

    Returns ``(m, active, lam, mu, kkt_residual)``.
    """
    c = np.asarray(c, dtype=float)
    x = np.asarray(x, dtype=float)
    total = N * xbar
    _check_feasible(x, N, total)
    if x.size == N:
        m = np.ones(N)
        return m, np.ones(N, dtype=bool), 0.0, 0.0, 0.0
    (lam, mu), free = _dual_solve(c, x, N, total)
    z = c + lam + mu * x
    m = np.where(free, z, 1.0)
    m = np.maximum(m, 1.0)
    nu = m - c - lam - mu * x
    resid = max(
        abs(math.fsum(m) - N) / N,
        abs(math.fsum(m * x) - total) / abs(total),
        float(np.max(np.maximum(0.0, -nu))),
        float(np.max(np.abs(nu * (m - 1.0)))),
    )
    return m, ~free, float(lam), float(mu), resid


def solve_dcal(sd: SampleData, seed: SeedLike = None, anchor: Optional[np.ndarray] = None) -> DCalSolution:
    """Calibrated counts closest to the CPP counts, then randomized rounding."""
    if sd.xbar is None:
        raise CapabilityError("DCal needs the population mean of x")
    rng = as_generator(seed)
    if anchor is None:
        anchor, _ = _round_with_cps(cpp_shares(sd), rng)
    anchor = np.asarray(anchor, dtype=float)
    m, active, lam, mu, resid = solve_dcal_fractional(anchor, sd.x, sd.N, sd.xbar)
    counts, _ = _round_with_cps(m, rng)
    xbar_star = math.fsum(counts * sd.x) / sd.N
    return DCalSolution(
        fractional=m,
        active=active,
        lam=lam,
        mu=mu,
        counts=counts,
        anchor=anchor,
        kkt_residual=resid,
        xbar_residual=(xbar_star - sd.xbar) / sd.xbar,
    )


def build_dcal(sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    sol = solve_dcal(sd, seed)
    return _expand(sd, sol.counts, "dcal", solution=sol)


# hot deck ---------------------------------------------------------------------


def hd_donors(full_x: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Nearest sampled unit in x for every population unit (ties: lowest index)."""
    order = np.argsort(ids)
    ids = ids[order]
    xs = full_x[ids]
    donor = np.empty(full_x.size, dtype=np.int64)
    chunk = max(1, 2_000_000 // max(ids.size, 1))
    for a in range(0, full_x.size, chunk):
        d = np.abs(full_x[a : a + chunk, None] - xs[None, :])
        donor[a : a + chunk] = ids[np.argmin(d, axis=1)]
    donor[ids] = ids
    return donor


def build_hd(sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    if sd.full_x is None:
        raise CapabilityError("hot-deck builder needs x for every population unit")
    full_x = np.asarray(sd.full_x, dtype=float)
    if full_x.size != sd.N:
        raise CapabilityError("full x length differs from N")
    donor = hd_donors(full_x, sd.ids)
    pos = np.empty(sd.N, dtype=np.int64)
    pos[sd.ids] = np.arange(sd.n)
    return PseudoPopulation(donor=donor, y=sd.y[pos[donor]], x=full_x.copy(), counts=None, builder="hd")


_FNS = {"ht": build_ht, "mul": build_mul, "cpp": build_cpp, "dcal": build_dcal, "hd": build_hd}


def build(name: str, sd: SampleData, seed: SeedLike = None) -> PseudoPopulation:
    try:
        fn = _FNS[name]
    except KeyError:
        raise ParameterError(f"unknown builder {name!r}; choose from {', '.join(BUILDERS)}") from None
    return fn(sd, seed)


# P1-P3 --------------------------------------------------------------------------


@dataclass
class P13Report:
    builder: str
    mean_counts: np.ndarray
    var_counts: np.ndarray
    cov_counts: np.ndarray
    K1: np.ndarray
    K1_se: np.ndarray
    pi_var: np.ndarray
    max_scaled_cov: float
    flags: list
    notes: list


def _exact_moments(name: str, sd: SampleData):
    w = sd.weights
    if name == "ht":
        r = w - np.floor(w)
        return w, r * (1 - r), np.diag(r * (1 - r))
    if name == "mul":
        p = w / w.sum()
        cov = -sd.N * np.outer(p, p)
        np.fill_diagonal(cov, sd.N * p * (1 - p))
        return sd.N * p, sd.N * p * (1 - p), cov
    if name == "cpp":
        shares = cpp_shares(sd)
        tau = shares - np.floor(shares)
        live = np.flatnonzero((tau > 1e-12) & (tau < TAU_ONE))
        cov = np.zeros((sd.n, sd.n))
        if live.size > 1 and live.size <= 60:
            t = tau[live] * (round(tau[live].sum()) / tau[live].sum())
            if 0 < round(t.sum()) < live.size:
                p2 = designs.cps_second_order(t)
                cov[np.ix_(live, live)] = p2 - np.outer(t, t)
                np.fill_diagonal(cov, 0.0)
                cov[live, live] = t * (1 - t)
                return shares, np.diag(cov).copy(), cov
        return shares, tau * (1 - tau), np.diag(tau * (1 - tau))
    return None


def validate_p1p3(builder: str, sd: SampleData, mc_runs: int = 1000, seed: SeedLike = None) -> P13Report:
    """Moments of the replication counts over builder randomness for a fixed sample."""
    if mc_runs < 1000:
        raise ParameterError("validation needs at least 1000 runs")
    rng = as_generator(seed)
    notes: list = []
    if builder == "hd":
        notes.append("hot deck is deterministic given the sample; count variance is identically 0")
        pp = build_hd(sd)
        counts = np.bincount(pp.donor, minlength=sd.N)[sd.ids].astype(float)
        z = np.zeros(sd.n)
        return P13Report(builder, counts, z, np.zeros((sd.n, sd.n)), sd.pi * counts, z, z, 0.0, [], notes)
    C = np.empty((mc_runs, sd.n))
    for r in range(mc_runs):
        C[r] = build(builder, sd, rng).counts
    mean = C.mean(axis=0)
    cov = np.cov(C, rowvar=False) if mc_runs > 1 else np.zeros((sd.n, sd.n))
    var = np.diag(cov).copy()
    K1 = sd.pi * mean
    K1_se = sd.pi * np.sqrt(var / mc_runs)
    off = ~np.eye(sd.n, dtype=bool)
    scaled = sd.N * np.abs(cov) * np.outer(sd.pi, sd.pi)
    flags = []
    exact = _exact_moments(builder, sd)
    if exact is not None:
        em, ev, _ = exact
        se = np.sqrt(np.maximum(ev, 1e-300) / mc_runs)
        bad = np.flatnonzero(np.abs(mean - em) > 3 * se + 1e-12)
        flags.extend(f"unit {sd.ids[i] + 1}: mean count {mean[i]:.4f} vs exact {em[i]:.4f}" for i in bad)
    else:
        notes.append("no closed-form moments; reporting Monte Carlo values only")
    return P13Report(
        builder,
        mean,
        var,
        cov,
        K1,
        K1_se,
        sd.pi * var,
        float(scaled[off].max()) if sd.n > 1 else 0.0,
        flags,
        notes,
    )


def export_pseudopop(pp: PseudoPopulation, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["donor", "y", "x"])
    for d, yy, xx in zip(pp.donor.tolist(), pp.y.tolist(), pp.x.tolist()):
        w.writerow([d + 1, repr(yy), repr(xx)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
