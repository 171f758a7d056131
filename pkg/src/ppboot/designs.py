"""Fixed-size pips sampling designs and exact small-N design oracles."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import optimize, special

from . import kernels
from .errors import CapacityError, ConvergenceError, ParameterError, SamplingError, ShapeError
from .popmodel import InclusionProbabilities
from .rng import SeedLike, as_generator

KINDS = ("poisson", "cps", "pareto", "srswor")
MAX_ENUM_N = 20
MAX_PARETO_ENUM_N = 12
REJECTION_CAP = 10**6


@dataclass(frozen=True)
class DesignSpec:
    kind: str = "cps"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown design {self.kind!r}; choose from {', '.join(KINDS)}")

    @property
    def fixed_size(self) -> bool:
        return self.kind != "poisson"


@dataclass(frozen=True)
class SampleDraw:
    """Sample indicators ``D`` together with the inclusion probabilities used."""

    D: np.ndarray
    pi: InclusionProbabilities
    kind: str = "cps"

    def __post_init__(self):
        D = np.asarray(self.D, dtype=bool)
        if D.shape != self.pi.pi.shape:
            raise ShapeError("indicator length differs from N")
        if np.any(D & (self.pi.pi <= 0)):
            raise SamplingError("selected unit with zero inclusion probability")
        D.flags.writeable = False
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return int(self.D.sum())

    @property
    def N(self) -> int:
        return int(self.D.size)

    @property
    def index(self) -> np.ndarray:
        return np.flatnonzero(self.D)


def _as_pi(pi) -> InclusionProbabilities:
    if isinstance(pi, InclusionProbabilities):
        return pi
    arr = np.asarray(pi, dtype=float)
    return InclusionProbabilities(arr, int(round(arr.sum())))


def _check_open(p: np.ndarray) -> None:
    if np.any(p <= 0) or np.any(p >= 1):
        raise ParameterError("inclusion probabilities must lie strictly in (0, 1)")


# conditional Poisson numerics -------------------------------------------------


def log_esp(logw: np.ndarray, n: int) -> np.ndarray:
    """log e_0..e_n of the elementary symmetric polynomials of exp(logw)."""
    e = np.full(n + 1, -np.inf)
    e[0] = 0.0
    for lw in logw:
        e[1:] = np.logaddexp(e[1:], lw + e[:-1])
    return e


def cps_inclusion(logw, n: int) -> np.ndarray:
    """First-order inclusion probabilities of CPS with log-odds ``logw``."""
    logw = np.asarray(logw, dtype=float)
    return kernels.cps_first_order(kernels.cps_qtable(logw, n), n)


def _normalize_logodds(logw: np.ndarray, n: int) -> np.ndarray:
    # CPS is invariant to a common odds factor; pick it so sum(p) = n
    def g(t):
        return special.expit(logw + t).sum() - n

    lo, hi = -1.0, 1.0
    while g(lo) > 0:
        lo *= 2
    while g(hi) < 0:
        hi *= 2
    t = optimize.brentq(g, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return logw + t


def cps_working_probs(pi, tol: float = 1e-8, max_iter: int = 10_000) -> np.ndarray:
    """Poisson parameters whose size-conditioned design has inclusion probabilities ``pi``.

    Fixed point on log-odds: ``logit p += logit pi - logit pi(p)``, with step
    halving whenever the residual grows.  The result is rescaled so that
    ``sum(p) = n``.
    """
    ip = _as_pi(pi)
    target = ip.pi
    _check_open(target)
    n = int(round(target.sum()))
    if abs(target.sum() - n) > 1e-6:
        raise ParameterError(f"inclusion probabilities sum to {target.sum()}, not an integer")
    return _working_cached(target.tobytes(), n, tol, max_iter).copy()


@lru_cache(maxsize=128)
def _working_cached(key: bytes, n: int, tol: float, max_iter: int) -> np.ndarray:
    target = np.frombuffer(key, dtype=float)
    goal = special.logit(target)
    if np.ptp(target) == 0:
        return target.copy()
    logw = goal.copy()
    cur = cps_inclusion(logw, n)
    res = np.max(np.abs(cur - target))
    step = 1.0
    it = 0
    while res > tol:
        it += 1
        if it > max_iter:
            raise ConvergenceError("CPS working probabilities did not converge", res)
        direction = goal - special.logit(np.clip(cur, 1e-300, 1 - 1e-16))
        # compare the current step with half of it; a bare decrease test lets
        # an overshooting step oscillate with a contraction factor close to 1
        trials = []
        for h in (step, 0.5 * step):
            cand = logw + h * direction
            new = cps_inclusion(cand, n)
            trials.append((np.max(np.abs(new - target)), h, cand, new))
        new_res, h, cand, new = min(trials, key=lambda t: t[0])
        while new_res >= res and h > 1e-6:
            h *= 0.5
            cand = logw + h * direction
            new = cps_inclusion(cand, n)
            new_res = np.max(np.abs(new - target))
        logw, cur, res = cand, new, new_res
        step = min(1.0, h * 1.5)
    p = special.expit(_normalize_logodds(logw, n))
    return p


def cps_qtable_for(pi) -> tuple[np.ndarray, int]:
    """q-table for sequential CPS draws with target inclusion probabilities ``pi``."""
    ip = _as_pi(pi)
    n = int(round(ip.pi.sum()))
    return _qtable_cached(ip.pi.tobytes(), n), n


@lru_cache(maxsize=128)
def _qtable_cached(key: bytes, n: int) -> np.ndarray:
    target = np.frombuffer(key, dtype=float)
    p = cps_working_probs(InclusionProbabilities(target, n))
    return kernels.cps_qtable(special.logit(p), n)


def cps_second_order(pi) -> np.ndarray:
    """Exact second-order inclusion probabilities of CPS.

    Given unit i, the rest of the sample is CPS of size n-1 on the other
    units with the same odds, so pi_ij = pi_i * pi_j(n-1 | U minus i).
    O(N^2 n) through the q-table kernel.
    """
    ip = _as_pi(pi)
    n = int(round(ip.pi.sum()))
    logw = special.logit(cps_working_probs(ip))
    N = logw.size
    out = np.zeros((N, N))
    if n >= 2:
        first = cps_inclusion(logw, n)
        idx = np.arange(N)
        for i in range(N):
            out[i, idx != i] = first[i] * cps_inclusion(np.delete(logw, i), n - 1)
        out = 0.5 * (out + out.T)
    np.fill_diagonal(out, ip.pi if n >= 1 else 0.0)
    return out


# single draws -----------------------------------------------------------------


def draw_poisson(pi, seed: SeedLike = None) -> SampleDraw:
    ip = _as_pi(pi)
    rng = as_generator(seed)
    D = rng.random(ip.N) < ip.pi
    return SampleDraw(D, ip, "poisson")


def draw_cps(pi, seed: SeedLike = None, method: str = "rejective", max_attempts: int = REJECTION_CAP) -> SampleDraw:
    """Conditional Poisson draw.

    ``method="rejective"`` repeats Poisson draws with the working
    probabilities until the size equals n.  ``method="sequential"`` draws the
    same design unit by unit from conditional selection probabilities.
    """
    ip = _as_pi(pi)
    rng = as_generator(seed)
    if method == "sequential":
        D = draw_masks("cps", ip.pi, 1, rng)[0]
        return SampleDraw(D, ip, "cps")
    if method != "rejective":
        raise ParameterError(f"unknown CPS method {method!r}")
    p = cps_working_probs(ip)
    n = int(round(ip.pi.sum()))
    tried = 0
    batch = 256
    while tried < max_attempts:
        b = min(batch, max_attempts - tried)
        D = rng.random((b, ip.N)) < p
        ok = np.flatnonzero(D.sum(axis=1) == n)
        if ok.size:
            return SampleDraw(D[ok[0]], ip, "cps")
        tried += b
        batch = min(batch * 2, 65536)
    raise SamplingError(f"rejective sampling found no size-{n} sample in {max_attempts} attempts")


def draw_pareto(pi, seed: SeedLike = None) -> SampleDraw:
    ip = _as_pi(pi)
    _check_open(ip.pi)
    D = draw_masks("pareto", ip.pi, 1, as_generator(seed), n=ip.n)[0]
    return SampleDraw(D, ip, "pareto")


def draw_srswor(pi, seed: SeedLike = None) -> SampleDraw:
    ip = _as_pi(pi)
    D = draw_masks("srswor", ip.pi, 1, as_generator(seed), n=ip.n)[0]
    return SampleDraw(D, ip, "srswor")


def draw_sample(kind: str, pi, seed: SeedLike = None) -> SampleDraw:
    DesignSpec(kind)
    fn = {"poisson": draw_poisson, "cps": draw_cps, "pareto": draw_pareto, "srswor": draw_srswor}[kind]
    return fn(pi, seed)


def draw_masks(kind: str, pi: np.ndarray, M: int, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    """``M`` independent sample masks (uint8, shape (M, N)).

    All fixed-size kinds consume exactly one (M, N) block of uniforms.
    CPS uses the sequential sampler, which is exact for the rejective design.
    """
    pi = np.asarray(pi, dtype=float)
    N = pi.size
    if n is None:
        n = int(round(pi.sum()))
    U = rng.random((M, N))
    if kind == "poisson":
        return (U < pi).astype(np.uint8)
    if kind == "srswor":
        return kernels.pareto_select(U, np.ones(N), n)
    if kind == "pareto":
        with np.errstate(divide="ignore"):
            lam = pi / (1.0 - pi)
        return kernels.pareto_select(U, lam, n)
    if kind == "cps":
        if n == 0:
            return np.zeros((M, N), dtype=np.uint8)
        if n == N:
            return np.ones((M, N), dtype=np.uint8)
        q, _ = cps_qtable_for(InclusionProbabilities(pi, n))
        return kernels.cps_sequential_select(U, q, np.zeros(N, dtype=np.uint8), n)
    raise ParameterError(f"unknown design {kind!r}")


# enumeration oracle -----------------------------------------------------------


@dataclass(frozen=True)
class DesignDistribution:
    """Probability of every subset in the support, subsets coded as bit masks."""

    codes: np.ndarray
    probs: np.ndarray
    N: int
    n: Optional[int]
    kind: str
    approximate: bool = False

    def __post_init__(self):
        if not math.isclose(float(np.sum(self.probs)), 1.0, abs_tol=1e-12 if not self.approximate else 1e-9):
            raise ParameterError("design probabilities do not sum to 1")

    @property
    def masks(self) -> np.ndarray:
        return ((self.codes[:, None] >> np.arange(self.N)) & 1).astype(bool)


def _codes_from_masks(masks: np.ndarray) -> np.ndarray:
    return masks.astype(np.int64) @ (np.int64(1) << np.arange(masks.shape[1], dtype=np.int64))


def _fixed_size_masks(N: int, n: int) -> np.ndarray:
    combos = np.array(list(itertools.combinations(range(N), n)), dtype=np.int64).reshape(-1, n)
    masks = np.zeros((combos.shape[0], N), dtype=bool)
    np.put_along_axis(masks, combos, True, axis=1)
    return masks


def enumerate_design(kind, pi, mc_draws: int = 10**7, seed: SeedLike = 0) -> DesignDistribution:
    """Every subset probability of a design.

    Exact for poisson, cps and srswor (N <= 20).  Pareto probabilities are a
    Monte Carlo tabulation over ``mc_draws`` draws (N <= 12), flagged with
    ``approximate=True``.
    """
    kind = kind.kind if isinstance(kind, DesignSpec) else DesignSpec(kind).kind
    ip = _as_pi(pi)
    p = ip.pi
    N = p.size
    cap = MAX_PARETO_ENUM_N if kind == "pareto" else MAX_ENUM_N
    if N > cap:
        raise CapacityError(f"enumeration of {kind} supports N <= {cap}, got N={N}")
    n = int(round(p.sum()))
    if kind == "poisson":
        codes = np.arange(2**N, dtype=np.int64)
        masks = ((codes[:, None] >> np.arange(N)) & 1).astype(bool)
        with np.errstate(divide="ignore"):
            lp = np.where(masks, np.log(p), np.log1p(-p)).sum(axis=1)
        probs = np.exp(lp)
        return DesignDistribution(codes, probs / math.fsum(probs), N, None, kind)
    masks = _fixed_size_masks(N, n)
    codes = _codes_from_masks(masks)
    if kind == "srswor":
        probs = np.full(codes.size, 1.0 / codes.size)
    elif kind == "cps":
        logw = special.logit(cps_working_probs(ip))
        lp = masks @ logw
        probs = np.exp(lp - lp.max())
        probs /= math.fsum(probs)
    else:
        _check_open(p)
        rng = as_generator(seed)
        counts: dict[int, int] = {}
        done = 0
        chunk = 10**6
        while done < mc_draws:
            b = min(chunk, mc_draws - done)
            mk = draw_masks("pareto", p, b, rng, n=n)
            u, c = np.unique(_codes_from_masks(mk), return_counts=True)
            for k, v in zip(u.tolist(), c.tolist()):
                counts[k] = counts.get(k, 0) + v
            done += b
        codes = np.array(sorted(counts), dtype=np.int64)
        probs = np.array([counts[k] for k in codes.tolist()], dtype=float) / mc_draws
        return DesignDistribution(codes, probs, N, n, kind, approximate=True)
    return DesignDistribution(codes, probs, N, n, kind)


def design_entropy(dist: DesignDistribution) -> float:
    p = dist.probs[dist.probs > 0]
    return float(-math.fsum(p * np.log(p)))


def hellinger_distance(p: DesignDistribution, q: DesignDistribution) -> float:
    """Sum over subsets of (sqrt(P) - sqrt(Q))^2; ranges over [0, 2]."""
    if p.N != q.N:
        raise ShapeError(f"designs over different populations (N={p.N} vs N={q.N})")
    codes = np.union1d(p.codes, q.codes)
    a = np.zeros(codes.size)
    b = np.zeros(codes.size)
    a[np.searchsorted(codes, p.codes)] = p.probs
    b[np.searchsorted(codes, q.codes)] = q.probs
    return float(math.fsum((np.sqrt(a) - np.sqrt(b)) ** 2))


@dataclass(frozen=True)
class InclusionReport:
    first: np.ndarray
    second: np.ndarray
    max_rel_cov: float


def exact_inclusion_probs(dist: DesignDistribution) -> InclusionReport:
    """First and second order inclusion probabilities of an enumerated design.

    ``max_rel_cov`` is max over i != j of |pi_ij - pi_i pi_j| / (pi_i pi_j).
    """
    m = dist.masks.astype(float)
    first = dist.probs @ m
    second = (m * dist.probs[:, None]).T @ m
    outer = np.outer(first, first)
    off = ~np.eye(dist.N, dtype=bool) & (outer > 0)
    rel = np.abs(second - outer)[off] / outer[off]
    return InclusionReport(first, second, float(rel.max()) if rel.size else 0.0)


def export_distribution(dist: DesignDistribution, path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subset", "probability"])
    for code, pr in zip(dist.codes.tolist(), dist.probs.tolist()):
        units = [str(i + 1) for i in range(dist.N) if (code >> i) & 1]
        w.writerow([" ".join(units), repr(pr)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
