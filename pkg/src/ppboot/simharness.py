"""Monte Carlo study runner: pseudo-population quality, interval coverage and bootstrap bias."""

from __future__ import annotations

import io
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import bootstrap as bs
from . import designs, pseudopop
from .asymptotics import empirical_process
from .errors import BuilderFailure, ConfigError, ParameterError
from .estimators import sup_distance
from .popmodel import (
    Mean,
    Population,
    Quantile,
    SuperpopulationModel,
    generate_population,
    inclusion_probabilities,
    parse_functional,
    population_parameter,
)
from .rng import BUILD, MISC, POPULATION, SAMPLE, child, child_rng

NA = float("nan")


@dataclass(frozen=True)
class Scenario:
    N: int = 200
    n: Optional[int] = None
    design: str = "pareto"
    builders: tuple = ("ht", "mul", "cpp", "dcal", "hd")
    functionals: tuple = ("mean", "q0.5", "q0.75")
    mc_runs: int = 1000
    M: int = 1000
    alpha: float = 0.05
    seed: int = 0
    approach: str = "conditional"
    model: SuperpopulationModel = field(default_factory=SuperpopulationModel)

    def __post_init__(self):
        if self.n is None:
            object.__setattr__(self, "n", int(round(0.2 * self.N)))
        if not 1 <= self.n < self.N:
            raise ParameterError(f"need 1 <= n < N, got n={self.n}, N={self.N}")
        if self.mc_runs < 1:
            raise ParameterError("mc_runs must be at least 1")
        if self.M < 2:
            raise ParameterError("M must be at least 2")
        designs.DesignSpec(self.design)
        if self.design == "poisson":
            raise ParameterError("the study needs a fixed-size design")
        for b in self.builders:
            if b not in pseudopop.BUILDERS:
                raise ParameterError(f"unknown builder {b!r}")
        if self.approach not in bs.APPROACHES:
            raise ParameterError(f"approach must be one of {bs.APPROACHES}")
        if not 0 < self.alpha < 1:
            raise ParameterError("alpha must lie in (0, 1)")
        object.__setattr__(self, "builders", tuple(self.builders))
        object.__setattr__(self, "functionals", tuple(self.functionals))
        for f in self.functionals:
            parse_functional(f)

    @property
    def functional_objs(self) -> list:
        return [parse_functional(f) for f in self.functionals]


def scenario_population(sc: Scenario) -> Population:
    """Fixed population of a scenario; regenerated until every pi < 1."""
    for attempt in range(1000):
        pop = generate_population(sc.model, sc.N, child_rng(sc.seed, POPULATION, attempt))
        x = pop.x
        if sc.n * x.max() / x.sum() < 1:
            return pop
    raise ParameterError("could not generate a population with all inclusion probabilities below 1")


# one Monte Carlo run ------------------------------------------------------------


@dataclass
class RunRecord:
    ht_mean: float
    hajek_mean: float
    theta_hat: dict
    per_builder: dict


def _one_run(sc: Scenario, pop: Population, pi, truths: dict, r: int, keep_z: bool) -> RunRecord:
    draw = designs.draw_sample(sc.design, pi, child_rng(sc.seed, SAMPLE, r))
    sd = pseudopop.SampleData.from_draw(draw, pop)
    fobjs = sc.functional_objs
    w = sd.weights
    hajek = math.fsum(w * sd.y) / math.fsum(w)
    ht = math.fsum(w * sd.y) / sc.N
    theta_hat = {f: bs.theta_hat_of(sd, f) for f in fobjs}
    zq = stats.norm.ppf(1 - sc.alpha / 2)
    mean_f = Mean()
    out = {}
    for bi, b in enumerate(sc.builders):
        plan = bs.ResamplePlan(sc.approach, sc.M, sc.design, b, mean_f, sc.alpha)
        try:
            reps = bs.run_bootstrap_multi(sd, plan, [mean_f] + [f for f in fobjs if f != mean_f], child(sc.seed, BUILD, r, bi))
        except BuilderFailure as exc:
            out[b] = {"failed": str(exc)}
            continue
        any_rep = next(iter(reps.values()))
        pp = any_rep.meta["pseudo"]
        rec = {
            "N_star": pp.N_star,
            "xbar_star": pp.xbar,
            "ks": sup_distance(pp.y, np.ones(pp.N_star), pop.y, np.ones(pop.N)),
            "boot_hajek": float(np.mean(reps[mean_f].theta_star)),
            "boot_ht": float(np.mean(any_rep.meta["ht_total"]) / sc.N),
            "f": {},
        }
        for f in fobjs:
            rp = reps[f]
            th = theta_hat[f]
            s2 = bs.bootstrap_variance(rp)
            pc = bs.ci_percentile(th, rp, sc.alpha)
            h = zq * math.sqrt(s2) / math.sqrt(sd.n)
            rec["f"][f] = {
                "s2": s2,
                "pct": (pc.lo, pc.hi),
                "norm": (th - h, th + h),
                "z": rp.z_star.copy() if keep_z else None,
            }
        out[b] = rec
    return RunRecord(ht, hajek, theta_hat, out)


@dataclass
class SimResult:
    scenario: Scenario
    population: Population
    truths: dict
    runs: list

    def builder_values(self, builder: str, key: str) -> np.ndarray:
        return np.array([r.per_builder[builder].get(key, NA) for r in self.runs], dtype=float)

    def f_values(self, builder: str, f, key: str):
        vals = []
        for r in self.runs:
            rec = r.per_builder[builder]
            vals.append(rec["f"][f][key] if "f" in rec else None)
        return vals

    def failures(self, builder: str) -> int:
        return sum("failed" in r.per_builder[builder] for r in self.runs)


def default_threads() -> int:
    return max(1, os.cpu_count() or 1)


def simulate(sc: Scenario, threads: Optional[int] = None, keep_z: int = 0) -> SimResult:
    """All Monte Carlo runs of a scenario.  Results do not depend on ``threads``."""
    pop = scenario_population(sc)
    pi = inclusion_probabilities(pop, sc.n)
    truths = {f: population_parameter(pop, f) for f in sc.functional_objs}
    truths[Mean()] = population_parameter(pop, Mean())
    threads = threads or default_threads()

    def task(r):
        return _one_run(sc, pop, pi, truths, r, r < keep_z)

    if threads == 1:
        runs = [task(r) for r in range(sc.mc_runs)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(task, range(sc.mc_runs)))
    return SimResult(sc, pop, truths, runs)


_CACHE: dict = {}


def simulate_cached(sc: Scenario, threads: Optional[int] = None) -> SimResult:
    """Memoized ``simulate`` so several tables share one Monte Carlo pass."""
    key = repr(sc)
    if key not in _CACHE:
        if len(_CACHE) >= 8:
            _CACHE.pop(next(iter(_CACHE)))
        _CACHE[key] = simulate(sc, threads)
    return _CACHE[key]


# metrics --------------------------------------------------------------------------


@dataclass(frozen=True)
class Metric:
    table: int
    design: str
    builder: str
    functional: str
    name: str
    value: float
    se: float
    note: str = ""


@dataclass
class MetricsReport:
    scenario: Scenario
    metrics: list

    def get(self, builder: str, name: str, functional: str = "") -> Metric:
        for m in self.metrics:
            if m.builder == builder and m.name == name and m.functional == functional:
                return m
        raise KeyError((builder, name, functional))

    def to_csv(self) -> str:
        lines = ["table,design,N,builder,functional,metric,value,se,note"]
        for m in self.metrics:
            lines.append(
                ",".join(
                    [
                        str(m.table),
                        m.design,
                        str(self.scenario.N),
                        m.builder,
                        m.functional,
                        m.name,
                        _fmt(m.value),
                        _fmt(m.se),
                        m.note,
                    ]
                )
            )
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        return format_table(self)


def _fmt(v: float, digits: int = 4) -> str:
    if v is None or not math.isfinite(v):
        return "n/a"
    return f"{v:.{digits}f}"


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    v = v[np.isfinite(v)]
    if v.size == 0:
        return NA, NA
    m = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else NA
    return m, se


def _max_se(v: np.ndarray, seed: int) -> tuple[float, float]:
    v = v[np.isfinite(v)]
    if v.size < 2:
        return (float(v.max()) if v.size else NA), NA
    rng = child_rng(seed, MISC, 7)
    boots = v[rng.integers(0, v.size, size=(200, v.size))].max(axis=1)
    return float(v.max()), float(np.std(boots, ddof=1))


def _dir_rows(sc: Scenario, table: int, names: Sequence[str], functionals: Sequence[str] = ("",)) -> list:
    return [Metric(table, sc.design, "dir", f, nm, NA, NA, "not implemented") for f in functionals for nm in names]


def table2_metrics(res: SimResult) -> list:
    sc = res.scenario
    X = res.population.xbar
    out = []
    for b in sc.builders:
        xb, xse = _mean_se(100 * (res.builder_values(b, "xbar_star") - X) / X)
        Ns, Nse = _mean_se(100 * (res.builder_values(b, "N_star") - sc.N) / sc.N)
        ks, kse = _max_se(res.builder_values(b, "ks"), sc.seed)
        note = f"{res.failures(b)} failed runs" if res.failures(b) else ""
        out += [
            Metric(2, sc.design, b, "", "RB_xbar", xb, xse, note),
            Metric(2, sc.design, b, "", "RB_Nstar", Ns, Nse, note),
            Metric(2, sc.design, b, "", "kolmogorov_max", ks, kse, note),
        ]
    return out


def _coverage(res: SimResult, b: str, f, key: str, table: int) -> list:
    sc = res.scenario
    truth = res.truths[f]
    ivs = [iv for iv in res.f_values(b, f, key) if iv is not None]
    if not ivs:
        return [Metric(table, sc.design, b, f.name, "coverage", NA, NA, "all runs failed")]
    hit = np.array([lo <= truth <= hi for lo, hi in ivs], dtype=float)
    length = np.array([hi - lo for lo, hi in ivs])
    c = float(hit.mean())
    cse = math.sqrt(c * (1 - c) / hit.size) if hit.size > 1 else NA
    al, alse = _mean_se(length)
    label = "percentile" if key == "pct" else "normal"
    return [
        Metric(table, sc.design, b, f.name, f"coverage_{label}", c, cse),
        Metric(table, sc.design, b, f.name, f"AL_{label}", al, alse),
    ]


def table3_metrics(res: SimResult) -> list:
    return [m for b in res.scenario.builders for f in res.scenario.functional_objs for m in _coverage(res, b, f, "pct", 3)]


def table4_metrics(res: SimResult) -> list:
    sc = res.scenario
    out = [m for b in sc.builders for f in sc.functional_objs for m in _coverage(res, b, f, "norm", 4)]
    return out + _dir_rows(sc, 4, ("coverage_normal", "AL_normal"), [f.name for f in sc.functional_objs])


def table5_metrics(res: SimResult) -> list:
    sc = res.scenario
    ht = np.array([r.ht_mean for r in res.runs])
    hj = np.array([r.hajek_mean for r in res.runs])
    out = []
    for b in sc.builders:
        bht = res.builder_values(b, "boot_ht")
        bhj = res.builder_values(b, "boot_hajek")
        v1, s1 = _mean_se(100 * (bht - ht) / ht)
        v2, s2 = _mean_se(100 * (bhj - hj) / hj)
        out += [
            Metric(5, sc.design, b, "ht_mean", "RB_bootstrap_unbiasedness", v1, s1),
            Metric(5, sc.design, b, "hajek_mean", "RB_bootstrap_unbiasedness", v2, s2),
        ]
    return out + _dir_rows(sc, 5, ("RB_bootstrap_unbiasedness",), ("ht_mean", "hajek_mean"))


def _report(sc: Scenario, res: Optional[SimResult], fn, threads) -> MetricsReport:
    res = res or simulate_cached(sc, threads)
    return MetricsReport(sc, fn(res))


def run_table2(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> MetricsReport:
    return _report(sc, result, table2_metrics, threads)


def run_table3(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> MetricsReport:
    return _report(sc, result, table3_metrics, threads)


def run_table4(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> MetricsReport:
    return _report(sc, result, table4_metrics, threads)


def run_table5(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> MetricsReport:
    return _report(sc, result, table5_metrics, threads)


def run_all(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> MetricsReport:
    res = result or simulate_cached(sc, threads)
    ms = table2_metrics(res) + table3_metrics(res) + table4_metrics(res) + table5_metrics(res)
    err = mc_error_check(sc, res)
    ms.append(Metric(0, sc.design, "-", "ht_mean", "mc_error_pct", err, NA))
    return MetricsReport(sc, ms)


def mc_error_check(sc: Scenario, result: Optional[SimResult] = None, threads: Optional[int] = None) -> float:
    """Relative bias (percent, absolute value) of the HT mean over the Monte Carlo runs."""
    res = result or simulate_cached(sc, threads)
    ht = np.array([r.ht_mean for r in res.runs])
    truth = population_parameter(res.population, Mean())
    val = abs(100 * (ht.mean() - truth) / truth)
    if val >= 1.0:
        warnings.warn(f"Monte Carlo error control: HT relative bias {val:.3f}% is not below 1%", stacklevel=2)
    return float(val)


def empirical_coverage(sc: Scenario, plan: bs.ResamplePlan, mc_runs: int, seed: int, method: str = "percentile", threads=None):
    """Coverage and average length of one builder/functional over ``mc_runs`` samples."""
    if mc_runs < 100:
        raise ParameterError("coverage needs at least 100 runs")
    f = plan.functional
    sub = replace(
        sc,
        builders=(plan.builder,),
        functionals=(f.name if isinstance(f, Quantile) else "mean",),
        mc_runs=mc_runs,
        seed=seed,
        M=plan.M,
        alpha=plan.alpha,
        approach=plan.approach,
        design=plan.design,
    )
    res = simulate(sub, threads)
    key = "pct" if method == "percentile" else "norm"
    ms = _coverage(res, plan.builder, sub.functional_objs[0], key, 3)
    return ms[0].value, ms[1].value


# report formatting ----------------------------------------------------------------

_TITLES = {
    2: "pseudo-population as predictor: RB[xbar*], RB[N*], max Kolmogorov distance",
    3: "percentile intervals: coverage and average length",
    4: "normal intervals with resampling variance: coverage and average length",
    5: "bootstrap unbiasedness: RB for resampled HT mean and Hajek mean",
}


def _cell(m: Optional[Metric]) -> str:
    if m is None:
        return ""
    if m.note == "not implemented":
        return "not implemented"
    if m.se is None or not math.isfinite(m.se):
        return f"{_fmt(m.value, 3)} (se n/a)"
    return f"{_fmt(m.value, 3)} ({_fmt(m.se, 3)})"


def format_table(rep: MetricsReport) -> str:
    sc = rep.scenario
    out = io.StringIO()
    out.write(f"# design={sc.design} N={sc.N} n={sc.n} mc_runs={sc.mc_runs} M={sc.M} approach={sc.approach} seed={sc.seed}\n")
    tables = sorted({m.table for m in rep.metrics if m.table > 0})
    for t in tables:
        ms = [m for m in rep.metrics if m.table == t]
        cols = []
        for m in ms:
            key = (m.functional, m.name)
            if key not in cols:
                cols.append(key)
        rows = []
        for m in ms:
            if m.builder not in rows:
                rows.append(m.builder)
        header = ["builder"] + [f"{f}:{n}" if f else n for f, n in cols]
        body = []
        for b in rows:
            cells = [b.upper() if b != "dir" else "Dir"]
            for f, n in cols:
                hit = [m for m in ms if m.builder == b and m.functional == f and m.name == n]
                cells.append(_cell(hit[0] if hit else None))
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        out.write(f"\nTable {t}: {_TITLES[t]}\n")
        out.write("  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip() + "\n")
        for r in body:
            out.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")
    extra = [m for m in rep.metrics if m.table == 0]
    for m in extra:
        out.write(f"\n{m.name}: {_fmt(m.value, 4)}\n")
    return out.getvalue()


# configuration files ------------------------------------------------------------

_INT_KEYS = {"N", "n", "M", "mc_runs", "seed"}
_FLOAT_KEYS = {"alpha"}
_MODEL_KEYS = {"corr", "slope", "intercept", "noise", "x_low", "x_high", "shape", "scale", "shift"}
_STR_KEYS = {"design", "approach", "model"}
_LIST_KEYS = {"builders", "functionals"}
CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | _MODEL_KEYS | _STR_KEYS | _LIST_KEYS


def parse_config(text: str, source: str = "<config>") -> dict:
    """key = value lines; '#' starts a comment.  Returns typed values with line numbers."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = _convert(key, val)
        except (ValueError, ParameterError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def _convert(key: str, val: str):
    if key in _INT_KEYS:
        return int(val)
    if key in _FLOAT_KEYS or key in _MODEL_KEYS:
        return float(val)
    if key in _LIST_KEYS:
        items = tuple(v.strip().lower() for v in val.split(",") if v.strip())
        if not items:
            raise ValueError("empty list")
        if key == "functionals":
            for f in items:
                parse_functional(f)
        else:
            for b in items:
                if b not in pseudopop.BUILDERS and b != "dir":
                    raise ValueError(f"unknown builder {b!r}")
        return items
    return val.lower()


def model_from_settings(cfg: dict) -> SuperpopulationModel:
    family = cfg.get("model", "linear-gaussian")
    params = {k: cfg[k] for k in ("slope", "intercept", "noise", "x_low", "x_high", "shape", "scale", "shift") if k in cfg}
    corr = cfg.get("corr", 0.8 if "noise" not in cfg else None)
    return SuperpopulationModel(family, params, corr)


def scenario_from_settings(cfg: dict) -> Scenario:
    kw = {k: cfg[k] for k in ("N", "n", "design", "mc_runs", "M", "alpha", "seed", "approach") if k in cfg}
    if "builders" in cfg:
        kw["builders"] = tuple(b for b in cfg["builders"] if b != "dir")
    if "functionals" in cfg:
        kw["functionals"] = cfg["functionals"]
    if "N" in kw and "n" in kw and kw["n"] >= kw["N"]:
        raise ConfigError(f"n = {kw['n']} must be smaller than N = {kw['N']}")
    try:
        return Scenario(model=model_from_settings(cfg), **kw)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def load_scenario(path, overrides: Optional[dict] = None) -> Scenario:
    text = Path(path).read_text()
    cfg = parse_config(text, str(path))
    cfg.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return scenario_from_settings(cfg)


# kernel Monte Carlo check ----------------------------------------------------------


@dataclass
class KernelCheck:
    grid: np.ndarray
    mc_cov: np.ndarray
    kernel: np.ndarray
    se: np.ndarray

    @property
    def max_z(self) -> float:
        return float(np.max(np.abs(self.mc_cov - self.kernel) / self.se))


def kernel_check(model: SuperpopulationModel, N: int, n: int, grid, populations: int = 20, draws: int = 2000, seed: int = 0, design: str = "cps") -> KernelCheck:
    """Covariance of the Hajek process over designs and populations against the limit kernel.

    For each of ``populations`` independent populations the covariance of
    W_N on ``grid`` is estimated from ``draws`` samples; the reported
    estimate is the average over populations and ``se`` its standard error
    from the spread between populations.
    """
    from .asymptotics import cov_kernel, kernel_spec_from_model

    grid = np.asarray(grid, dtype=float)
    covs = np.empty((populations, grid.size, grid.size))
    for p in range(populations):
        pop = generate_population(model, N, child_rng(seed, POPULATION, p))
        pi = inclusion_probabilities(pop, n)
        rng = child_rng(seed, SAMPLE, p)
        masks = designs.draw_masks(design, pi.pi, draws, rng, n=n).astype(bool)
        W = np.empty((draws, grid.size))
        for r in range(draws):
            W[r] = empirical_process(designs.SampleDraw(masks[r], pi, design), pop, grid)
        covs[p] = np.cov(W, rowvar=False)
    spec = kernel_spec_from_model(model, n / N)
    K = cov_kernel(spec, grid[:, None], grid[None, :])
    se = covs.std(axis=0, ddof=1) / math.sqrt(populations)
    return KernelCheck(grid, covs.mean(axis=0), K, se)
