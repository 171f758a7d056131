"""Two-phase resampling from pseudo-populations, variance estimates and intervals."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import designs, kernels, pseudopop
from .errors import (
    BuilderFailure,
    CalibrationInfeasibleError,
    ConvergenceError,
    InsufficientReplicatesError,
    ParameterError,
    SamplingError,
)
from .popmodel import Mean, Quantile, UserFunctional, parse_functional, population_parameter
from .pseudopop import PseudoPopulation, SampleData
from .rng import child_rng

APPROACHES = ("conditional", "unconditional")
RETRIES = 10


@dataclass(frozen=True)
class ResamplePlan:
    approach: str = "conditional"
    M: int = 1000
    design: str = "cps"
    builder: str = "hd"
    functional: object = field(default_factory=Mean)
    alpha: float = 0.05

    def __post_init__(self):
        if self.approach not in APPROACHES:
            raise ParameterError(f"approach must be one of {APPROACHES}")
        if self.M < 1:
            raise ParameterError("M must be positive")
        if not designs.DesignSpec(self.design).fixed_size:
            raise ParameterError("resampling design must have fixed size")
        if self.builder not in pseudopop.BUILDERS:
            raise ParameterError(f"unknown builder {self.builder!r}")
        if not 0 < self.alpha < 1:
            raise ParameterError("alpha must lie in (0, 1)")
        if isinstance(self.functional, str):
            object.__setattr__(self, "functional", parse_functional(self.functional))


@dataclass(frozen=True)
class ReplicateSet:
    theta_star: np.ndarray
    theta_pseudo: np.ndarray
    n: int
    z_star: np.ndarray = field(init=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        ts = np.asarray(self.theta_star, dtype=float)
        tp = np.broadcast_to(np.asarray(self.theta_pseudo, dtype=float), ts.shape)
        object.__setattr__(self, "theta_star", ts)
        object.__setattr__(self, "z_star", math.sqrt(self.n) * (ts - tp))

    @property
    def M(self) -> int:
        return int(self.theta_star.size)


# resampling inclusion probabilities --------------------------------------------


def resample_inclusion(x_star: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """pi* = n x*/sum x*, forcing units with pi* >= 1 into every resample.

    Forced units get pi* = 1 and the resample size for the rest shrinks by
    their number; repeated until every remaining pi* < 1.
    """
    x_star = np.asarray(x_star, dtype=float)
    N = x_star.size
    forced = np.zeros(N, dtype=bool)
    pi = np.empty(N)
    if n >= N:
        return np.ones(N), np.ones(N, dtype=bool)
    while True:
        rest = n - int(forced.sum())
        free = ~forced
        if rest <= 0:
            pi[free] = 0.0
            break
        pi[free] = rest * x_star[free] / math.fsum(x_star[free])
        new = free & (pi >= 1.0)
        if not new.any():
            break
        forced |= new
    pi[forced] = 1.0
    return pi, forced


@dataclass(frozen=True)
class _Prepared:
    """Pseudo-population sorted by y with resampling weights."""

    y: np.ndarray
    pi: np.ndarray
    forced: np.ndarray
    n_rest: int


def _prepare(pp: PseudoPopulation, n: int) -> _Prepared:
    order = np.argsort(pp.y, kind="stable")
    y = pp.y[order]
    pi, forced = resample_inclusion(pp.x[order], n)
    return _Prepared(y, pi, forced, n - int(forced.sum()))


def _draw_resamples(prep: _Prepared, kind: str, M: int, rng: np.random.Generator) -> np.ndarray:
    free = ~prep.forced
    if prep.forced.any():
        sub = designs.draw_masks(kind, prep.pi[free], M, rng, n=prep.n_rest)
        mask = np.ones((M, prep.y.size), dtype=np.uint8)
        mask[:, free] = sub
        return mask
    return designs.draw_masks(kind, prep.pi, M, rng, n=prep.n_rest)


def _levels(functionals) -> np.ndarray:
    return np.array([f.p for f in functionals if isinstance(f, Quantile)], dtype=float)


def _pick(stats_row_block: np.ndarray, functionals) -> list:
    out = []
    qi = 3
    for f in functionals:
        if isinstance(f, Mean):
            out.append(stats_row_block[:, 2])
        elif isinstance(f, Quantile):
            out.append(stats_row_block[:, qi])
            qi += 1
        else:
            raise ParameterError("user functionals are evaluated one resample at a time")
    return out


def resample_stats(pp: PseudoPopulation, n: int, kind: str, M: int, rng, functionals) -> dict:
    """Resample ``M`` times; returns arrays of Hajek statistics and resampled HT totals."""
    prep = _prepare(pp, n)
    mask = _draw_resamples(prep, kind, M, rng)
    levels = _levels(functionals)
    st = kernels.hajek_stats(mask, prep.y, 1.0 / prep.pi, levels)
    # the pseudo-population parameter goes through the same kernel, so a census
    # resample reproduces it bit for bit
    full = kernels.hajek_stats(np.ones((1, prep.y.size), dtype=np.uint8), prep.y, np.ones(prep.y.size), levels)
    pseudo = [float(v[0]) for v in _pick(full, functionals)]
    return {"theta": _pick(st, functionals), "ht_total": st[:, 1], "w_total": st[:, 0], "pseudo": pseudo}


def resample_once(pp: PseudoPopulation, n: int, design: str, seed=None):
    """One resample from the pseudo-population: ``(SampleDraw, StepDF)``."""
    from .estimators import hajek_df
    from .popmodel import InclusionProbabilities

    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    pi, forced = resample_inclusion(pp.x, n)
    free = ~forced
    D = np.ones(pp.N_star, dtype=bool)
    D[free] = designs.draw_masks(design, pi[free], 1, rng, n=n - int(forced.sum()))[0].astype(bool)
    draw = designs.SampleDraw(D, InclusionProbabilities(pi, n), design)
    return draw, hajek_df(draw, pp.y)


def theta_of(pp_or_y, functional) -> float:
    y = pp_or_y.y if isinstance(pp_or_y, PseudoPopulation) else pp_or_y
    return population_parameter(np.asarray(y, dtype=float), functional)


def _build_with_retry(builder: str, sd: SampleData, rng: np.random.Generator, retries: int = RETRIES):
    last = None
    for _ in range(retries):
        try:
            return pseudopop.build(builder, sd, rng)
        except (CalibrationInfeasibleError, ConvergenceError, SamplingError, BuilderFailure) as exc:
            last = exc
    raise BuilderFailure(f"builder {builder} failed {retries} times: {last}")


def run_bootstrap_multi(sd: SampleData, plan: ResamplePlan, functionals: Sequence, seed=0) -> dict:
    """Replicate sets for several functionals from the same resamples.

    Randomness: the builder draws from stream (seed, 1) and the resampling
    from stream (seed, 2); replicates consume those streams in order.
    """
    functionals = [parse_functional(f) if isinstance(f, str) else f for f in functionals]
    build_rng = child_rng(seed, 1)
    res_rng = child_rng(seed, 2)
    n = sd.n
    M = plan.M
    if plan.approach == "conditional":
        pp = _build_with_retry(plan.builder, sd, build_rng)
        st = resample_stats(pp, n, plan.design, M, res_rng, functionals)
        pseudo = [np.float64(v) for v in st["pseudo"]]
        meta = {"N_star": np.array([pp.N_star]), "pseudo": pp, "ht_total": st["ht_total"]}
        thetas = st["theta"]
    else:
        thetas = [np.empty(M) for _ in functionals]
        pseudo = [np.empty(M) for _ in functionals]
        ht_total = np.empty(M)
        N_star = np.empty(M, dtype=np.int64)
        first = None
        for m in range(M):
            pp = _build_with_retry(plan.builder, sd, build_rng)
            if first is None:
                first = pp
            st = resample_stats(pp, n, plan.design, 1, res_rng, functionals)
            for k, f in enumerate(functionals):
                thetas[k][m] = st["theta"][k][0]
                pseudo[k][m] = st["pseudo"][k]
            ht_total[m] = st["ht_total"][0]
            N_star[m] = pp.N_star
        meta = {"N_star": N_star, "pseudo": first, "ht_total": ht_total}
    return {f: ReplicateSet(t, p, n, meta=meta) for f, t, p in zip(functionals, thetas, pseudo)}


def run_bootstrap(sd: SampleData, plan: ResamplePlan, seed=0) -> ReplicateSet:
    f = plan.functional
    if isinstance(f, UserFunctional):
        return _run_user(sd, plan, seed)
    return run_bootstrap_multi(sd, plan, [f], seed)[f]


def _run_user(sd: SampleData, plan: ResamplePlan, seed) -> ReplicateSet:
    from .estimators import apply_functional

    build_rng = child_rng(seed, 1)
    res_rng = child_rng(seed, 2)
    f = plan.functional
    ts, tp = np.empty(plan.M), np.empty(plan.M)
    pp = None
    for m in range(plan.M):
        if pp is None or plan.approach == "unconditional":
            pp = _build_with_retry(plan.builder, sd, build_rng)
            theta_pp = population_parameter(pp.y, f)
        _, F = resample_once(pp, sd.n, plan.design, res_rng)
        ts[m] = apply_functional(F, f)
        tp[m] = theta_pp
    return ReplicateSet(ts, tp if plan.approach == "unconditional" else tp[0], sd.n)


# variance, e.d.f., intervals ----------------------------------------------------


def bootstrap_variance_forms(reps: ReplicateSet) -> tuple[float, float]:
    """Both expressions of the resampling variance: from Z* and from theta*."""
    if reps.M < 2:
        raise InsufficientReplicatesError("variance needs M >= 2")
    z = reps.z_star
    a = math.fsum((z - math.fsum(z) / z.size) ** 2) / (reps.M - 1)
    t = reps.theta_star
    tp = np.broadcast_to(reps.theta_pseudo, t.shape)
    if np.ptp(tp) == 0:
        b = reps.n * math.fsum((t - math.fsum(t) / t.size) ** 2) / (reps.M - 1)
    else:
        d = t - tp
        b = reps.n * math.fsum((d - math.fsum(d) / d.size) ** 2) / (reps.M - 1)
    return a, b


def bootstrap_variance(reps: ReplicateSet) -> float:
    return bootstrap_variance_forms(reps)[0]


def resampling_edf(reps: ReplicateSet, z) -> np.ndarray | float:
    zs = np.sort(reps.z_star)
    out = np.searchsorted(zs, z, side="right") / zs.size
    return float(out) if np.ndim(out) == 0 else out


def resampling_quantile(reps: ReplicateSet, p: float) -> float:
    if not 0 < p < 1:
        raise ParameterError("p must lie in (0, 1)")
    zs = np.sort(reps.z_star)
    cum = np.arange(1, zs.size + 1) / zs.size
    return float(zs[np.argmax(cum >= p)])


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    alpha: float
    method: str
    degenerate: bool = False

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def covers(self, value: float) -> bool:
        return self.lo <= value <= self.hi


def ci_percentile(theta_hat: float, reps: ReplicateSet, alpha: float = 0.05) -> Interval:
    if reps.M < 2:
        raise InsufficientReplicatesError("percentile interval needs M >= 2")
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    r = 1.0 / math.sqrt(reps.n)
    lo = theta_hat - r * resampling_quantile(reps, 1 - alpha / 2)
    hi = theta_hat - r * resampling_quantile(reps, alpha / 2)
    return Interval(lo, hi, alpha, "percentile", bool(np.ptp(reps.z_star) == 0))


def ci_normal(theta_hat: float, s_star: float, alpha: float = 0.05, n: int = 1) -> Interval:
    """theta_hat -/+ z_{alpha/2} s_star / sqrt(n); ``s_star`` is the standard deviation of Z*."""
    if not 0 < alpha < 1:
        raise ParameterError("alpha must lie in (0, 1)")
    h = stats.norm.ppf(1 - alpha / 2) * s_star / math.sqrt(n)
    return Interval(theta_hat - h, theta_hat + h, alpha, "normal", bool(s_star == 0))


def empirical_coverage(intervals: Sequence[Interval], truth: float) -> tuple[float, float]:
    """Fraction of intervals containing ``truth`` and their mean length."""
    if not intervals:
        raise ParameterError("no intervals")
    cov = sum(iv.covers(truth) for iv in intervals) / len(intervals)
    al = math.fsum(iv.length for iv in intervals) / len(intervals)
    return cov, al


# export -------------------------------------------------------------------------


def export_replicates(reps: ReplicateSet, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "theta_star", "z_star"])
    for m, (t, z) in enumerate(zip(reps.theta_star.tolist(), reps.z_star.tolist()), start=1):
        w.writerow([m, repr(t), repr(z)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def export_intervals(intervals: Sequence[Interval], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lo", "hi", "alpha", "method"])
    for iv in intervals:
        w.writerow([repr(iv.lo), repr(iv.hi), repr(iv.alpha), iv.method])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def theta_hat_of(sd: SampleData, functional) -> float:
    """Hajek plug-in estimate from the sample."""
    from .estimators import apply_functional, weighted_df

    return apply_functional(weighted_df(sd.y, sd.weights), functional)


__all__ = [
    "ResamplePlan",
    "ReplicateSet",
    "Interval",
    "resample_inclusion",
    "resample_once",
    "resample_stats",
    "run_bootstrap",
    "run_bootstrap_multi",
    "bootstrap_variance",
    "bootstrap_variance_forms",
    "resampling_edf",
    "resampling_quantile",
    "ci_percentile",
    "ci_normal",
    "empirical_coverage",
    "export_replicates",
    "export_intervals",
    "theta_hat_of",
]
