"""ppboot command line: ``ppboot <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, designs, pseudopop, simharness
from . import bootstrap as bs
from .errors import (
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    CapabilityError,
    IngestionError,
    ParameterError,
    PpbootError,
)
from .popmodel import (
    InclusionProbabilities,
    Population,
    SuperpopulationModel,
    generate_population,
    inclusion_probabilities,
    parse_functional,
    population_csv,
    read_population,
)
from .rng import BUILD, RESAMPLE, SAMPLE, child, child_rng

MODEL_FLAGS = ("slope", "intercept", "noise", "x_low", "x_high", "shape", "scale", "shift")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ParameterError(f"{self.prog}: {message}")


def _g(v: float) -> str:
    return repr(float(v))


def _emit(text: str, out: Optional[str]) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise IngestionError(f"cannot write {out}: {exc}") from exc


def _model(args) -> SuperpopulationModel:
    params = {k: getattr(args, k) for k in MODEL_FLAGS if getattr(args, k, None) is not None}
    corr = None if "noise" in params else args.corr
    return SuperpopulationModel(args.model, params, corr)


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", default="linear-gaussian", choices=("linear-gaussian", "gamma-size"))
    p.add_argument("--corr", type=float, default=0.8, help="target correlation of y and x")
    for k in MODEL_FLAGS:
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=float, default=None)


# sample files ---------------------------------------------------------------------


def sample_csv(ids, y, x, pi) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "y", "x", "pi"])
    for i, a, b, c in zip(np.asarray(ids).tolist(), y.tolist(), x.tolist(), pi.tolist()):
        w.writerow([i + 1, repr(a), repr(b), repr(c)])
    return buf.getvalue()


def read_sample(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """0-based ids, y, x and pi from an ``id,y,x,pi`` file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0]] != ["id", "y", "x", "pi"]:
        raise IngestionError(f"{path}:1: header must be id,y,x,pi")
    ids, ys, xs, ps = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 4:
            raise IngestionError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            i, a, b, c = int(row[0]), float(row[1]), float(row[2]), float(row[3])
        except ValueError as exc:
            raise IngestionError(f"{path}:{lineno}: non-numeric cell ({exc})") from exc
        if not all(math.isfinite(v) for v in (a, b, c)):
            raise IngestionError(f"{path}:{lineno}: non-finite value")
        if i < 1 or b <= 0 or not 0 < c <= 1:
            raise IngestionError(f"{path}:{lineno}: need id >= 1, x > 0 and 0 < pi <= 1")
        ids.append(i - 1)
        ys.append(a)
        xs.append(b)
        ps.append(c)
    if not ids:
        raise IngestionError(f"{path}: no sampled units")
    if len(set(ids)) != len(ids):
        raise IngestionError(f"{path}: duplicate ids")
    return np.array(ids), np.array(ys), np.array(xs), np.array(ps)


def _draw(pop: Population, n: int, design: str, seed: int) -> designs.SampleDraw:
    if n == pop.N:
        return designs.SampleDraw(np.ones(pop.N, dtype=bool), InclusionProbabilities(np.ones(pop.N), n), design)
    pi = inclusion_probabilities(pop, n)
    return designs.draw_sample(design, pi, child_rng(seed, SAMPLE))


def _sample_data(args) -> pseudopop.SampleData:
    """Sample from --sample (with --N, --xbar, optional --population for full x) or drawn from --population."""
    if args.sample is not None:
        ids, y, x, pi = read_sample(args.sample)
        full_x = None
        N, xbar = args.N, args.xbar
        if args.population is not None:
            pop = read_population(args.population)
            full_x = pop.x
            N = N if N is not None else pop.N
            xbar = xbar if xbar is not None else pop.xbar
            if ids.max() >= pop.N:
                raise IngestionError(f"{args.sample}: id {ids.max() + 1} exceeds population size {pop.N}")
        if N is None:
            raise ParameterError("--N is required with --sample unless --population is given")
        return pseudopop.SampleData(ids, y, x, pi, int(N), xbar, full_x)
    if args.population is None:
        raise ParameterError("give --sample or --population")
    if args.n is None:
        raise ParameterError("--n is required when sampling from --population")
    pop = read_population(args.population)
    draw = _draw(pop, args.n, args.design, args.seed)
    return pseudopop.SampleData.from_draw(draw, pop)


# subcommands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    pop = generate_population(_model(args), args.N, child_rng(args.seed, 0))
    _emit(population_csv(pop), args.out)
    return EXIT_OK


def cmd_sample(args) -> int:
    pop = read_population(args.population)
    draw = _draw(pop, args.n, args.design, args.seed)
    s = draw.index
    _emit(sample_csv(s, pop.y[s], pop.x[s], draw.pi.pi[s]), args.out)
    return EXIT_OK


def cmd_pseudopop(args) -> int:
    sd = _sample_data(args)
    pp = pseudopop.build(args.builder, sd, child_rng(args.seed, BUILD))
    _emit(pseudopop.export_pseudopop(pp), args.out)
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    sd = _sample_data(args)
    if args.builder == "hd" and sd.full_x is None:
        raise CapabilityError("the hd builder needs x for every population unit; pass --population")
    fs = [parse_functional(f) for f in (args.functional or ["mean"])]
    plan = bs.ResamplePlan(args.approach, args.M, args.design, args.builder, fs[0], args.alpha)
    reps = bs.run_bootstrap_multi(sd, plan, fs, child(args.seed, RESAMPLE))
    lines = [
        f"# builder={args.builder} design={args.design} approach={args.approach} M={args.M} n={sd.n} N={sd.N} seed={args.seed}"
    ]
    lines.append("functional,theta_hat,S2_star,method,lo,hi,alpha")
    for f in fs:
        rp = reps[f]
        th = bs.theta_hat_of(sd, f)
        s2 = bs.bootstrap_variance(rp)
        for iv in (bs.ci_percentile(th, rp, args.alpha), bs.ci_normal(th, math.sqrt(s2), args.alpha, sd.n)):
            lines.append(",".join([f.name, _g(th), _g(s2), iv.method, _g(iv.lo), _g(iv.hi), _g(iv.alpha)]))
    _emit("\n".join(lines) + "\n", args.out)
    if args.replicates_out:
        try:
            bs.export_replicates(reps[fs[0]], args.replicates_out)
        except OSError as exc:
            raise IngestionError(f"cannot write {args.replicates_out}: {exc}") from exc
    return EXIT_OK


def _overrides(args) -> dict:
    o = {
        "N": args.N,
        "n": args.n,
        "design": args.design,
        "M": args.M,
        "mc_runs": args.mc_runs,
        "alpha": args.alpha,
        "seed": args.seed,
        "approach": args.approach,
    }
    if args.builders:
        o["builders"] = tuple(b.strip() for b in args.builders.split(","))
    if args.functionals:
        o["functionals"] = tuple(f.strip() for f in args.functionals.split(","))
    return o


def cmd_simulate(args) -> int:
    if args.config is not None:
        try:
            sc = simharness.load_scenario(args.config, _overrides(args))
        except OSError as exc:
            raise IngestionError(f"cannot read {args.config}: {exc}") from exc
    else:
        sc = simharness.scenario_from_settings({k: v for k, v in _overrides(args).items() if v is not None})
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = simharness.run_all(sc, threads=args.threads)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    _emit(rep.to_csv() if args.format == "csv" else rep.to_table(), args.out)
    return EXIT_OK


def cmd_kernel_check(args) -> int:
    from .asymptotics import bridge_kernel, cov_kernel, export_kernel_grid, kernel_spec_from_model

    model = _model(args)
    spec = kernel_spec_from_model(model, args.f)
    qs = np.linspace(0.05, 0.95, args.grid)
    grid = np.array([spec.quantile(q) for q in qs])
    indep = None
    if model.family != "custom-table":
        indep = SuperpopulationModel(model.family, {**model.params, "slope": 0.0, "noise": model.noise}, None)
    lines = []
    if indep is not None:
        try:
            ispec = kernel_spec_from_model(indep, args.f)
            ig = np.array([ispec.quantile(q) for q in qs])
            C = cov_kernel(ispec, ig[:, None], ig[None, :])
            B = bridge_kernel(ispec, ig[:, None], ig[None, :])
            lines.append(f"# independence reduction max|C - bridge| = {np.max(np.abs(C - B)):.3e}")
        except ParameterError as exc:
            lines.append(f"# independence reduction skipped: {exc}")
    if args.mc_populations > 0:
        kc = simharness.kernel_check(model, args.N, int(round(args.f * args.N)), grid, args.mc_populations, args.mc_draws, args.seed)
        lines.append(f"# Monte Carlo check N={args.N}: max |cov - kernel| / se = {kc.max_z:.3f}")
    text = "\n".join(lines) + ("\n" if lines else "") + export_kernel_grid(spec, grid)
    _emit(text, args.out)
    return EXIT_OK


def cmd_design_audit(args) -> int:
    if args.pi is not None:
        pi = np.array([float(v) for v in args.pi.split(",")])
        n = int(round(pi.sum()))
        if abs(pi.sum() - n) > 1e-9:
            raise ParameterError("inclusion probabilities must sum to an integer")
        ip = InclusionProbabilities(pi, n)
    elif args.population is not None:
        if args.n is None:
            raise ParameterError("--n is required with --population")
        ip = inclusion_probabilities(read_population(args.population), args.n)
    else:
        raise ParameterError("give --pi or --population")
    dist = designs.enumerate_design(args.design, ip, args.mc_draws, child_rng(args.seed, SAMPLE))
    rep = designs.exact_inclusion_probs(dist)
    lines = [f"# design={args.design} N={dist.N} n={ip.n} approximate={dist.approximate}"]
    lines.append(f"# entropy = {_g(designs.design_entropy(dist))}")
    if args.design != "cps" and args.design != "poisson":
        ref = designs.enumerate_design("cps", ip)
        lines.append(f"# hellinger to cps = {_g(designs.hellinger_distance(dist, ref))}")
    lines.append(f"# max |pi_i - target| = {np.max(np.abs(rep.first - ip.pi)):.3e}")
    lines.append("unit,target_pi,design_pi")
    for i, (t, d) in enumerate(zip(ip.pi.tolist(), rep.first.tolist()), start=1):
        lines.append(f"{i},{_g(t)},{_g(d)}")
    _emit("\n".join(lines) + "\n", args.out)
    if args.distribution_out:
        try:
            designs.export_distribution(dist, args.distribution_out)
        except OSError as exc:
            raise IngestionError(f"cannot write {args.distribution_out}: {exc}") from exc
    return EXIT_OK


# parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ppboot", description="Pseudo-population bootstrap for unequal probability samples.")
    p.add_argument("--version", action="version", version=f"ppboot {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(q, seed=True):
        if seed:
            q.add_argument("--seed", type=int, default=0, help="master seed; all randomness derives from it")
        q.add_argument("--out", default=None, help="output file (default stdout)")

    g = sub.add_parser("generate", help="simulate a finite population")
    _add_model(g)
    g.add_argument("--N", type=int, required=True)
    common(g)
    g.set_defaults(fn=cmd_generate)

    s = sub.add_parser("sample", help="draw a pips sample from a population file")
    s.add_argument("--population", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--design", default="cps", choices=("cps", "pareto", "srswor"))
    common(s)
    s.set_defaults(fn=cmd_sample)

    def sample_source(q):
        q.add_argument("--sample", default=None, help="sample file with header id,y,x,pi")
        q.add_argument("--population", default=None, help="population file (full x; sampled from when --sample is absent)")
        q.add_argument("--N", type=int, default=None, help="population size when only --sample is given")
        q.add_argument("--xbar", type=float, default=None, help="population mean of x when only --sample is given")
        q.add_argument("--n", type=int, default=None, help="sample size when drawing from --population")
        q.add_argument("--design", default="cps", choices=("cps", "pareto", "srswor"))
        q.add_argument("--builder", default="hd", choices=pseudopop.BUILDERS)

    pp = sub.add_parser("pseudopop", help="build a pseudo-population (donor,y,x)")
    sample_source(pp)
    common(pp)
    pp.set_defaults(fn=cmd_pseudopop)

    b = sub.add_parser("bootstrap", help="bootstrap variance and intervals for one sample")
    sample_source(b)
    b.add_argument("--functional", action="append", help="mean or q<p>; repeatable")
    b.add_argument("--M", type=int, default=1000)
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--approach", default="conditional", choices=bs.APPROACHES)
    b.add_argument("--replicates-out", default=None, help="write m,theta_star,z_star for the first functional")
    common(b)
    b.set_defaults(fn=cmd_bootstrap)

    m = sub.add_parser("simulate", help="Monte Carlo study; config keys are overridden by flags")
    m.add_argument("--config", default=None, help="key = value scenario file")
    m.add_argument("--N", type=int, default=None)
    m.add_argument("--n", type=int, default=None)
    m.add_argument("--design", default=None, choices=("cps", "pareto", "srswor"))
    m.add_argument("--M", type=int, default=None)
    m.add_argument("--mc-runs", dest="mc_runs", type=int, default=None)
    m.add_argument("--alpha", type=float, default=None)
    m.add_argument("--approach", default=None, choices=bs.APPROACHES)
    m.add_argument("--builders", default=None, help="comma separated, e.g. ht,mul,cpp,dcal,hd")
    m.add_argument("--functionals", default=None, help="comma separated, e.g. mean,q0.5,q0.75")
    m.add_argument("--seed", type=int, default=None)
    m.add_argument("--threads", type=int, default=None, help="worker threads (default: available cores)")
    m.add_argument("--format", default="table", choices=("table", "csv"))
    m.add_argument("--out", default=None)
    m.set_defaults(fn=cmd_simulate)

    k = sub.add_parser("kernel-check", help="covariance kernel grid and numerical checks")
    _add_model(k)
    k.add_argument("--f", type=float, default=0.2, help="sampling fraction n/N")
    k.add_argument("--grid", type=int, default=10, help="number of grid points (model quantiles)")
    k.add_argument("--N", type=int, default=1600)
    k.add_argument("--mc-populations", dest="mc_populations", type=int, default=0)
    k.add_argument("--mc-draws", dest="mc_draws", type=int, default=2000)
    common(k)
    k.set_defaults(fn=cmd_kernel_check)

    a = sub.add_parser("design-audit", help="enumerate a small design: inclusion probabilities, entropy, Hellinger")
    a.add_argument("--design", default="cps", choices=designs.KINDS)
    a.add_argument("--pi", default=None, help="comma separated inclusion probabilities")
    a.add_argument("--population", default=None)
    a.add_argument("--n", type=int, default=None)
    a.add_argument("--mc-draws", dest="mc_draws", type=int, default=10**6)
    a.add_argument("--distribution-out", default=None, help="write subset,probability")
    common(a)
    a.set_defaults(fn=cmd_design_audit)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        # --help / --version
        return int(exc.code or 0)
    except PpbootError as exc:
        print(f"ppboot: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"ppboot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"ppboot: error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
