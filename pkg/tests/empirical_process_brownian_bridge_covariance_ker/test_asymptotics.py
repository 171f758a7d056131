import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from ppboot import asymptotics, designs, simharness
from ppboot.errors import DegenerateVarianceError, MomentError, ParameterError
from ppboot.popmodel import InclusionProbabilities, Mean, Population, Quantile, SuperpopulationModel, generate_population, inclusion_probabilities

MODEL = SuperpopulationModel()
INDEP = SuperpopulationModel("linear-gaussian", {"slope": 0.0, "noise": 1.5}, None)
CONST_X = SuperpopulationModel("custom-table", {"table": [(0.0, 2.0, 0.3), (1.0, 2.0, 0.3), (3.0, 2.0, 0.4)]})


def grid_of(spec, k=10):
    return np.array([spec.quantile(p) for p in np.linspace(0.05, 0.95, k)])


# kernel spec -------------------------------------------------------------------------


def test_constant_x_constants():
    f = 0.25
    spec = asymptotics.kernel_spec_from_model(CONST_X, f)
    assert spec.d == pytest.approx(f * (1 - f), abs=1e-15)
    assert spec.A == pytest.approx(1 / f, abs=1e-14)


def test_independence_k1_is_ex():
    spec = asymptotics.kernel_spec_from_model(INDEP, 0.2)
    y = np.linspace(-3, 3, 13)
    assert np.allclose(spec.K(1, y), spec.EX, rtol=1e-12)


def test_k_at_infinity_is_moment():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    for a in (-1, 1, 2):
        assert float(spec.K(a, np.inf)) == pytest.approx(MODEL.x_moment(a), rel=1e-10)


def test_k1_against_large_mc():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    grid = np.array([spec.quantile(p) for p in np.linspace(0.05, 0.95, 20)])
    rng = np.random.default_rng(30)
    S1 = np.zeros(grid.size)
    S2 = np.zeros(grid.size)
    C = np.zeros(grid.size)
    n = 0
    for _ in range(10):
        y, x = MODEL.sample(1_000_000, rng)
        order = np.argsort(y)
        ys, xs = y[order], x[order]
        k = np.searchsorted(ys, grid, side="right")
        cx = np.concatenate(([0.0], np.cumsum(xs)))
        cx2 = np.concatenate(([0.0], np.cumsum(xs * xs)))
        S1 += cx[k]
        S2 += cx2[k]
        C += k
        n += y.size
    J = S1 / n
    F = C / n
    K = J / F
    # delta method for the ratio of means of X 1{Y<=y} and 1{Y<=y}
    varJ = S2 / n - J**2
    cov = J - J * F
    varF = F * (1 - F)
    se = np.sqrt((varJ - 2 * K * cov + K**2 * varF) / n) / F
    assert np.all(np.abs(K - spec.K(1, grid)) < 3 * se)


def test_moment_error():
    m = SuperpopulationModel("linear-gaussian", {"x_low": 0.0, "x_high": 2.0})
    with pytest.raises(MomentError):
        asymptotics.kernel_spec_from_model(m, 0.2)


@given(st.floats(0.1, 5.0), st.floats(0.1, 10.0), st.floats(0.01, 0.99))
def test_d_positive_when_pi_below_one(a, width, u):
    m = SuperpopulationModel("linear-gaussian", {"x_low": a, "x_high": a + width, "noise": 1.0}, None)
    # valid pi-ps: f * max x / E[X] < 1
    f = u * m.x_moment(1) / (a + width)
    assert asymptotics.kernel_spec_from_model(m, f).d > 0


# covariance kernel --------------------------------------------------------------------------


def test_independence_reduction():
    spec = asymptotics.kernel_spec_from_model(INDEP, 0.2)
    g = np.linspace(-4, 4, 25)
    Y, T = np.meshgrid(g, g)
    diff = asymptotics.cov_kernel(spec, Y, T) - asymptotics.bridge_kernel(spec, Y, T)
    assert np.max(np.abs(diff)) <= 1e-10


def test_as_displayed_variant_breaks_reduction():
    spec = asymptotics.kernel_spec_from_model(INDEP, 0.2)
    g = np.linspace(-2, 2, 9)
    Y, T = np.meshgrid(g, g)
    gap = asymptotics.cov_kernel_as_displayed(spec, Y, T) - asymptotics.cov_kernel(spec, Y, T)
    # the two forms differ by E[X] F(y) F(t) - f F(y) F(t)
    expect = (spec.EX - spec.f) * spec.F(Y) * spec.F(T)
    assert np.allclose(gap, expect, atol=1e-12)
    assert np.max(np.abs(gap)) > 1e-3


def test_kernel_pinned_at_infinity():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    assert abs(float(asymptotics.cov_kernel(spec, np.inf, np.inf))) < 1e-12
    assert abs(float(asymptotics.cov_kernel(spec, -np.inf, 0.5))) < 1e-12


def test_kernel_symmetric_psd():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    g = grid_of(spec)
    C = asymptotics.cov_kernel(spec, g[:, None], g[None, :])
    assert np.array_equal(C, C.T)
    assert np.linalg.eigvalsh(C).min() >= -1e-8


# sigma^2 ----------------------------------------------------------------------------------


def test_sigma2_constant_x_is_srs_variance():
    f = 0.2
    spec = asymptotics.kernel_spec_from_model(CONST_X, f)
    t = np.asarray(CONST_X.p["table"])
    var_y = t[:, 2] @ t[:, 0] ** 2 - (t[:, 2] @ t[:, 0]) ** 2
    assert float(asymptotics.sigma2_theta(spec, Mean())) == pytest.approx((1 - f) * var_y, rel=1e-12)


def test_sigma2_independence_mean():
    spec = asymptotics.kernel_spec_from_model(INDEP, 0.2)
    s2 = asymptotics.sigma2_theta(spec, Mean())
    # bridge identity: the double integral of F(y ^ t) - F(y) F(t) is Var(Y)
    # by symmetry it is 2 * int (1 - F(y)) int_{t<y} F(t) dt dy, with the inner part closed form
    Y = stats.norm(scale=1.5)
    inner = lambda y: y * Y.cdf(y) + 1.5**2 * Y.pdf(y)
    bridge, _ = integrate.quad(lambda y: 2 * Y.sf(y) * inner(y), -20, 20, epsabs=1e-12, limit=200)
    assert bridge == pytest.approx(1.5**2, rel=1e-9)
    assert s2.value == pytest.approx(spec.f * (spec.A - 1) * 1.5**2, rel=1e-8)
    assert s2.error < 1e-8


def test_sigma2_independence_quantile():
    spec = asymptotics.kernel_spec_from_model(INDEP, 0.2)
    for p in (0.25, 0.5, 0.8):
        q = stats.norm.ppf(p, scale=1.5)
        expect = spec.f * (spec.A - 1) * p * (1 - p) / stats.norm.pdf(q, scale=1.5) ** 2
        assert float(asymptotics.sigma2_theta(spec, Quantile(p))) == pytest.approx(expect, rel=1e-9)


def test_sigma2_degenerate_quantile():
    spec = asymptotics.kernel_spec_from_model(CONST_X, 0.2)
    with pytest.raises(DegenerateVarianceError):
        asymptotics.sigma2_theta(spec, Quantile(0.5))


def test_sigma2_matches_mc_at_1600():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    s2 = float(asymptotics.sigma2_theta(spec, Mean()))
    rng = np.random.default_rng(31)
    N, n = 1600, 320
    v = np.empty(2000)
    for r in range(v.size):
        pop = generate_population(MODEL, N, rng)
        ip = inclusion_probabilities(pop.x, n)
        k = designs.draw_masks("pareto", ip.pi, 1, rng, n=n)[0].astype(bool)
        w = 1 / ip.pi[k]
        v[r] = math.sqrt(n) * ((w @ pop.y[k]) / w.sum() - pop.y.mean())
    assert abs(v.var(ddof=1) / s2 - 1) < 0.10


# empirical process --------------------------------------------------------------------------


def test_census_process_zero():
    pop = generate_population(MODEL, 50, 0)
    ip = InclusionProbabilities(np.ones(50), 50)
    draw = designs.SampleDraw(np.ones(50, dtype=bool), ip, "cps")
    assert np.all(asymptotics.empirical_process(draw, pop, np.linspace(-1, 3, 7)) == 0)
    assert asymptotics.glivenko_sup(draw, pop) == 0.0


def test_process_mean_near_zero():
    N, n, R = 400, 80, 10_000
    pop = generate_population(MODEL, N, 5)
    ip = inclusion_probabilities(pop.x, n)
    grid = np.quantile(pop.y, [0.1, 0.3, 0.5, 0.7, 0.9])
    masks = designs.draw_masks("cps", ip.pi, R, np.random.default_rng(32), n=n).astype(bool)
    I = (pop.y[:, None] <= grid).astype(float)
    FN = I.mean(axis=0)
    w = 1 / ip.pi
    # the Horvitz-Thompson normalized process is design unbiased
    HT = np.array([math.sqrt(n) * ((w[k] @ I[k]) / N - FN) for k in masks])
    assert np.all(np.abs(HT.mean(axis=0)) < 3 * HT.std(axis=0) / math.sqrt(R))
    # the Hajek process has a ratio bias of order n^-1/2 in these units; its
    # second-order Taylor value from exact pairwise inclusions is the target
    delta = designs.cps_second_order(ip) - np.outer(ip.pi, ip.pi)
    np.fill_diagonal(delta, ip.pi * (1 - ip.pi))
    var_N = w @ delta @ w
    cov_TN = (I * w[:, None]).T @ delta @ w
    bias = math.sqrt(n) * (FN * var_N - cov_TN) / N**2
    W = np.array([asymptotics.empirical_process(designs.SampleDraw(k, ip, "cps"), pop, grid) for k in masks])
    se = W.std(axis=0) / math.sqrt(R)
    assert np.all(np.abs(W.mean(axis=0) - bias) < 3 * se)
    assert np.max(np.abs(bias)) > 3 * se.max()


def test_hajek_process_bias_shrinks():
    rng = np.random.default_rng(33)
    worst = []
    for N in (400, 1600):
        n = N // 5
        b = []
        for _ in range(5):
            pop = generate_population(MODEL, N, rng)
            ip = inclusion_probabilities(pop.x, n)
            grid = np.quantile(pop.y, [0.3, 0.5, 0.7])
            masks = designs.draw_masks("pareto", ip.pi, 4000, rng, n=n).astype(bool)
            I = (pop.y[:, None] <= grid).astype(float)
            w = 1 / ip.pi
            H = np.array([(w[k] @ I[k]) / w[k].sum() for k in masks])
            b.append(math.sqrt(n) * (H.mean(axis=0) - I.mean(axis=0)))
        worst.append(np.max(np.abs(np.mean(b, axis=0))))
    assert worst[1] < worst[0]


def test_mc_covariance_approaches_kernel():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    grid = grid_of(spec, 6)
    dev = []
    for N in (200, 1600):
        kc = simharness.kernel_check(MODEL, N, N // 5, grid, populations=24, draws=2000, seed=34, design="pareto")
        dev.append(np.abs(kc.mc_cov - kc.kernel))
    assert dev[1].mean() < 0.5 * dev[0].mean()
    assert dev[1].max() < 0.5 * dev[0].max()


# lemma diagnostics ----------------------------------------------------------------------------


def test_constant_x_dN_exact():
    for N in (50, 123):
        pop = Population(np.arange(N, dtype=float), np.full(N, 3.0))
        ip = inclusion_probabilities(pop.x, N // 4)
        rep = asymptotics.lemma_diagnostics(pop, ip, [1.0])
        fN = (N // 4) / N
        assert rep.dN_over_N == pytest.approx(fN * (1 - fN), abs=1e-15)


def test_lemma_gaps_decrease():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    grid = grid_of(spec, 5)
    rng = np.random.default_rng(35)
    gaps = []
    for N in (400, 1600, 6400):
        reps = []
        for _ in range(8):
            pop = generate_population(MODEL, N, rng)
            rep = asymptotics.lemma_diagnostics(pop, inclusion_probabilities(pop.x, N // 5), grid, spec)
            reps.append(rep.gaps["d"])
        gaps.append(np.mean(reps))
    assert gaps[0] > gaps[1] > gaps[2]


def test_s2N_limit_at_6400():
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    pop = generate_population(MODEL, 6400, 36)
    med = np.array([spec.quantile(0.5)])
    rep = asymptotics.lemma_diagnostics(pop, inclusion_probabilities(pop.x, 1280), med, spec)
    assert abs(rep.S2_over_N[0] / rep.limit_s2[0] - 1) < 0.05


def test_lemma_without_spec_reports_nan():
    pop = generate_population(MODEL, 100, 0)
    rep = asymptotics.lemma_diagnostics(pop, inclusion_probabilities(pop.x, 20), [0.5])
    assert math.isnan(rep.d_limit) and np.isnan(rep.limit_s2).all()


# Glivenko ---------------------------------------------------------------------------------


def test_glivenko_single_unit():
    pop = Population([3.0, 1.0, 2.0, 5.0], [1.0, 1.0, 1.0, 1.0])
    ip = inclusion_probabilities(pop.x, 1)
    d = designs.SampleDraw(np.array([True, False, False, False]), ip, "cps")
    # F_H jumps 0 -> 1 at 3; F_N is 0.5 just below 3 and 0.75 at 3
    assert asymptotics.glivenko_sup(d, pop) == 0.5


def test_glivenko_rate():
    rng = np.random.default_rng(37)
    med = []
    for n in (40, 160):
        N = 5 * n
        pop = generate_population(MODEL, N, rng)
        ip = inclusion_probabilities(pop.x, n)
        masks = designs.draw_masks("pareto", ip.pi, 1000, rng, n=n).astype(bool)
        med.append(np.median([asymptotics.glivenko_sup(designs.SampleDraw(k, ip, "pareto"), pop) for k in masks]))
    assert 0.35 <= med[1] / med[0] <= 0.65


def test_export_kernel_grid(tmp_path):
    spec = asymptotics.kernel_spec_from_model(MODEL, 0.2)
    g = [0.5, 1.0]
    text = asymptotics.export_kernel_grid(spec, g, tmp_path / "k.csv")
    rows = [r.split(",") for r in text.splitlines()]
    assert rows[0] == ["y", "0.5", "1.0"] and len(rows) == 3
    C = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    assert np.array_equal(C, asymptotics.cov_kernel(spec, np.array(g)[:, None], np.array(g)[None, :]))
    assert (tmp_path / "k.csv").read_text() == text
    other = asymptotics.export_kernel_grid(spec, g, as_displayed=True)
    assert other != text


def test_bad_fraction():
    with pytest.raises(ParameterError):
        asymptotics.kernel_spec_from_model(MODEL, 1.0)
