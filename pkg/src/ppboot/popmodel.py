"""Superpopulation models, finite populations and inclusion probabilities."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import special, stats

from .errors import (
    AllocationError,
    DegeneratePopulationError,
    IngestionError,
    ParameterError,
    SizeError,
)
from .rng import SeedLike, as_generator

CAP = 1.0 - 1e-9

FAMILIES = ("linear-gaussian", "gamma-size", "custom-table")

_DEFAULTS = {
    "linear-gaussian": {"intercept": 0.0, "slope": 1.0 / 12.0, "x_low": 1.0, "x_high": 11.0},
    "gamma-size": {"intercept": 0.0, "slope": 0.05, "shape": 3.0, "scale": 2.0, "shift": 0.0},
}


@dataclass(frozen=True)
class SuperpopulationModel:
    """i.i.d. law of (Y, X) with Y = intercept + slope * X + noise * eps.

    For the two continuous families ``noise`` is derived from
    ``target_correlation`` unless given explicitly in ``params``.  The
    ``custom-table`` family is a discrete law over rows ``(y, x, prob)``.
    """

    family: str = "linear-gaussian"
    params: Mapping[str, object] = field(default_factory=dict)
    target_correlation: Optional[float] = 0.8

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown model family {self.family!r}")
        rho = self.target_correlation
        if rho is not None and not -1.0 < rho < 1.0:
            raise ParameterError(f"correlation {rho} outside (-1, 1)")
        if self.family == "custom-table":
            rows = np.asarray(self.params.get("table", ()), dtype=float)
            if rows.ndim != 2 or rows.shape[1] != 3 or rows.shape[0] == 0:
                raise ParameterError("custom-table needs rows (y, x, prob)")
            if np.any(rows[:, 1] <= 0):
                raise ParameterError("custom-table x values must be positive")
            if np.any(rows[:, 2] < 0) or not math.isclose(rows[:, 2].sum(), 1.0, abs_tol=1e-12):
                raise ParameterError("custom-table probabilities must be non-negative and sum to 1")
            return
        p = self.p
        if self.family == "linear-gaussian":
            if not 0 <= p["x_low"] <= p["x_high"] or p["x_high"] <= 0:
                raise ParameterError("need 0 <= x_low <= x_high with x_high > 0")
        else:
            if p["shape"] <= 0 or p["scale"] <= 0 or p["shift"] < 0:
                raise ParameterError("gamma-size needs shape > 0, scale > 0, shift >= 0")
        if self.noise <= 0 or not np.isfinite(self.noise):
            raise ParameterError("noise scale must be positive")

    @property
    def p(self) -> dict:
        out = dict(_DEFAULTS.get(self.family, {}))
        out.update(self.params)
        return out

    # X moments -----------------------------------------------------------
    def x_moment(self, alpha: float) -> float:
        """E[X^alpha] in closed form."""
        p = self.p
        if self.family == "custom-table":
            t = np.asarray(p["table"], dtype=float)
            return float(np.sum(t[:, 2] * t[:, 1] ** alpha))
        if self.family == "linear-gaussian":
            a, b = p["x_low"], p["x_high"]
            if a == b:
                return a**alpha
            if a == 0 and alpha <= -1:
                return math.inf
            if alpha == -1:
                return math.log(b / a) / (b - a)
            return (b ** (alpha + 1) - a ** (alpha + 1)) / ((alpha + 1) * (b - a))
        k, th, s = p["shape"], p["scale"], p["shift"]
        if s == 0:
            if k + alpha <= 0:
                return math.inf
            return th**alpha * math.exp(special.gammaln(k + alpha) - special.gammaln(k))
        nodes, weights = self.x_rule()
        return float(np.sum(weights * nodes**alpha))

    @property
    def x_var(self) -> float:
        return self.x_moment(2) - self.x_moment(1) ** 2

    @property
    def noise(self) -> float:
        p = self.p
        if "noise" in p:
            return float(p["noise"])
        rho = self.target_correlation
        slope = float(p["slope"])
        if rho is None or rho == 0 or slope == 0 or np.sign(rho) != np.sign(slope):
            raise ParameterError("noise scale cannot be derived; give params['noise']")
        return abs(slope) * math.sqrt(self.x_var) * math.sqrt(1.0 / rho**2 - 1.0)

    @property
    def analytic_correlation(self) -> float:
        if self.family == "custom-table":
            t = np.asarray(self.p["table"], dtype=float)
            w = t[:, 2]
            my, mx = w @ t[:, 0], w @ t[:, 1]
            cov = w @ ((t[:, 0] - my) * (t[:, 1] - mx))
            vy, vx = w @ (t[:, 0] - my) ** 2, w @ (t[:, 1] - mx) ** 2
            return float(cov / math.sqrt(vx * vy)) if vx > 0 and vy > 0 else 0.0
        b = float(self.p["slope"])
        sx = math.sqrt(self.x_var)
        den = math.sqrt(b * b * sx * sx + self.noise**2)
        return b * sx / den

    def x_rule(self, order: int = 200):
        """Quadrature nodes and weights for expectations over X."""
        p = self.p
        if self.family == "custom-table":
            t = np.asarray(p["table"], dtype=float)
            return t[:, 1].copy(), t[:, 2].copy()
        if self.family == "linear-gaussian":
            a, b = p["x_low"], p["x_high"]
            if a == b:
                return np.array([a]), np.array([1.0])
            z, w = special.roots_legendre(order)
            return 0.5 * (b - a) * z + 0.5 * (a + b), 0.5 * w
        k, th, s = p["shape"], p["scale"], p["shift"]
        t, w = special.roots_genlaguerre(order, k - 1.0)
        w = w / math.exp(special.gammaln(k))
        return s + th * t, w

    def sample(self, N: int, rng: np.random.Generator):
        p = self.p
        if self.family == "custom-table":
            t = np.asarray(p["table"], dtype=float)
            idx = rng.choice(t.shape[0], size=N, p=t[:, 2])
            return t[idx, 0].copy(), t[idx, 1].copy()
        if self.family == "linear-gaussian":
            x = rng.uniform(p["x_low"], p["x_high"], size=N)
        else:
            x = p["shift"] + rng.gamma(p["shape"], p["scale"], size=N)
        y = p["intercept"] + p["slope"] * x + self.noise * rng.standard_normal(N)
        return y, x


@dataclass(frozen=True)
class Population:
    y: np.ndarray
    x: np.ndarray
    stratum: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        if y.ndim != 1 or y.shape != x.shape:
            raise ParameterError("y and x must be 1-d of equal length")
        if y.size < 2:
            raise ParameterError("population needs N >= 2")
        if np.any(x <= 0) or not np.all(np.isfinite(x)):
            raise ParameterError("all x must be positive and finite")
        if self.stratum is not None:
            s = np.asarray(self.stratum, dtype=int)
            if s.shape != y.shape:
                raise ParameterError("stratum length differs from N")
            object.__setattr__(self, "stratum", s)
        y.flags.writeable = False
        x.flags.writeable = False

    @property
    def N(self) -> int:
        return int(self.y.size)

    @property
    def xbar(self) -> float:
        return math.fsum(self.x) / self.N


@dataclass(frozen=True)
class InclusionProbabilities:
    pi: np.ndarray
    n: int

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        pi.flags.writeable = False
        object.__setattr__(self, "pi", pi)

    @property
    def N(self) -> int:
        return int(self.pi.size)


def generate_population(model: SuperpopulationModel, N: int, seed: SeedLike = None) -> Population:
    if N < 2:
        raise ParameterError("N must be at least 2")
    y, x = model.sample(int(N), as_generator(seed))
    return Population(y, x)


def capped_probabilities(x, n: float, cap: float = CAP):
    """pi proportional to x with iterative capping.

    Returns ``(pi, capped)``.  Units whose share would reach 1 are set to
    ``cap`` and the remaining mass ``n - sum(capped)`` is spread over the other
    units in proportion to x, repeating until nothing exceeds the cap.
    """
    x = np.asarray(x, dtype=float)
    N = x.size
    capped = np.zeros(N, dtype=bool)
    pi = np.empty(N)
    for _ in range(N + 1):
        free = ~capped
        rest = n - cap * capped.sum()
        sx = x[free].sum()
        if rest <= 0 or sx <= 0:
            raise DegeneratePopulationError("no mass left for uncapped units")
        pi[free] = rest * x[free] / sx
        pi[capped] = cap
        over = free & (pi >= cap)
        if not over.any():
            return pi, capped
        capped |= over
    raise DegeneratePopulationError("capping did not converge within N iterations")


def inclusion_probabilities(pop_or_x, n: int) -> InclusionProbabilities:
    x = pop_or_x.x if isinstance(pop_or_x, Population) else np.asarray(pop_or_x, dtype=float)
    N = x.size
    if not 1 <= n < N:
        raise SizeError(f"need 1 <= n < N, got n={n}, N={N}")
    pi, _ = capped_probabilities(x, n)
    return InclusionProbabilities(pi, int(n))


def stratified_size_variable(strata: Sequence[int], allocation: Sequence[float]) -> np.ndarray:
    """Size variable turning a stratified SRS design into a pips design.

    Unit ``i`` in stratum ``l`` gets ``allocation[l-1] / (N_l / N)``.
    """
    s = np.asarray(strata, dtype=int)
    p = np.asarray(allocation, dtype=float)
    L = p.size
    if not math.isclose(p.sum(), 1.0, abs_tol=1e-12) or np.any(p <= 0):
        raise AllocationError("allocation must be positive and sum to 1")
    if s.size == 0 or s.min() < 1 or s.max() > L:
        raise AllocationError("stratum labels must lie in 1..L")
    counts = np.bincount(s, minlength=L + 1)[1:]
    if np.any(counts == 0):
        raise AllocationError(f"empty stratum {int(np.argmin(counts)) + 1}")
    w = counts / s.size
    return (p / w)[s - 1]


# functionals ------------------------------------------------------------------


@dataclass(frozen=True)
class Mean:
    name: str = "mean"


@dataclass(frozen=True)
class Quantile:
    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ParameterError(f"quantile level {self.p} outside (0, 1)")

    @property
    def name(self) -> str:
        return f"q{self.p:g}"


@dataclass(frozen=True)
class UserFunctional:
    """Arbitrary functional of a step d.f.: ``fn(locations, masses) -> float``."""

    fn: object
    name: str = "user"


def parse_functional(text: str):
    t = text.strip().lower()
    if t == "mean":
        return Mean()
    if t.startswith("q"):
        try:
            return Quantile(float(t[1:].strip("()")))
        except ValueError:
            pass
    raise ParameterError(f"unknown functional {text!r}; use 'mean' or 'q<p>' such as q0.5")


def weighted_quantile_sorted(ys: np.ndarray, cum: np.ndarray, p: float) -> float:
    """inf{y : F(y) >= p} for a step d.f. with sorted jumps ``ys`` and cumulative values ``cum``."""
    idx = int(np.argmax(cum >= p))
    return float(ys[idx])


def population_parameter(pop, functional) -> float:
    y = pop.y if isinstance(pop, Population) else np.asarray(pop, dtype=float)
    if isinstance(functional, Mean):
        return math.fsum(y) / y.size
    ys = np.sort(y)
    cum = np.arange(1, y.size + 1) / y.size
    if isinstance(functional, Quantile):
        return weighted_quantile_sorted(ys, cum, functional.p)
    if isinstance(functional, UserFunctional):
        return float(functional.fn(ys, np.full(y.size, 1.0 / y.size)))
    raise ParameterError(f"invalid functional {functional!r}")


# files ------------------------------------------------------------------------


def population_csv(pop: Population) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["id", "y", "x"] + (["stratum"] if pop.stratum is not None else [])
    w.writerow(header)
    for i in range(pop.N):
        row = [i + 1, repr(float(pop.y[i])), repr(float(pop.x[i]))]
        if pop.stratum is not None:
            row.append(int(pop.stratum[i]))
        w.writerow(row)
    return buf.getvalue()


def write_population(pop: Population, path) -> None:
    try:
        Path(path).write_text(population_csv(pop))
    except OSError as exc:
        raise IngestionError(f"cannot write {path}: {exc}") from exc


def read_population(path) -> Population:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise IngestionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header not in (["id", "y", "x"], ["id", "y", "x", "stratum"]):
        raise IngestionError(f"{path}:1: header must be id,y,x[,stratum], got {','.join(header)}")
    has_stratum = len(header) == 4
    ys, xs, ss = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise IngestionError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            ys.append(float(row[1]))
            xs.append(float(row[2]))
            if has_stratum:
                ss.append(int(row[3]))
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
        if not (math.isfinite(ys[-1]) and math.isfinite(xs[-1])):
            raise IngestionError(f"{path}:{lineno}: non-finite value")
        if xs[-1] <= 0:
            raise IngestionError(f"{path}:{lineno}: x must be positive")
    if len(ys) < 2:
        raise IngestionError(f"{path}: need at least two units")
    return Population(np.array(ys), np.array(xs), np.array(ss) if has_stratum else None)


def normal_cdf(z):
    return stats.norm.cdf(z)
