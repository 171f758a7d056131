import math
import warnings

import numpy as np
import pytest

from ppboot import simharness
from ppboot.errors import ConfigError, ParameterError
from ppboot.popmodel import SuperpopulationModel
from ppboot.simharness import Scenario

SMALL = Scenario(N=60, mc_runs=20, M=50, seed=1)
CONST = SuperpopulationModel("custom-table", {"table": [[5.0, 1.0, 0.25], [5.0, 2.0, 0.25], [5.0, 4.0, 0.25], [5.0, 8.0, 0.25]]})


@pytest.fixture(scope="module")
def small_result():
    return simharness.simulate(SMALL, threads=1)


def test_scenario_defaults_and_validation():
    assert Scenario(N=400).n == 80
    with pytest.raises(ParameterError):
        Scenario(N=10, n=10)
    with pytest.raises(ParameterError):
        Scenario(mc_runs=0)
    with pytest.raises(ParameterError):
        Scenario(M=1)
    with pytest.raises(ParameterError):
        Scenario(builders=("ht", "bogus"))
    with pytest.raises(ParameterError):
        Scenario(design="poisson")
    with pytest.raises(ParameterError):
        Scenario(functionals=("q1.5",))


def test_population_fixed_and_below_one():
    a = simharness.scenario_population(SMALL)
    b = simharness.scenario_population(SMALL)
    assert np.array_equal(a.y, b.y)
    assert SMALL.n * a.x.max() / a.x.sum() < 1


def test_replay_identical_bytes_across_threads(small_result):
    a = simharness.run_all(SMALL, small_result).to_csv()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = simharness.run_all(SMALL, simharness.simulate(SMALL, threads=3)).to_csv()
    assert a == b


def test_constructed_size_is_exact(small_result):
    rep = simharness.run_table2(SMALL, small_result)
    for b in ("mul", "cpp", "dcal", "hd"):
        assert rep.get(b, "RB_Nstar").value == 0.0
    assert rep.get("hd", "RB_xbar").value == 0.0
    for b in ("mul", "cpp", "hd"):
        assert np.all(small_result.builder_values(b, "N_star") == SMALL.N)


def test_ht_size_metric_matches_definition(small_result):
    rep = simharness.run_table2(SMALL, small_result)
    Ns = small_result.builder_values("ht", "N_star")
    assert rep.get("ht", "RB_Nstar").value == pytest.approx(100 * (Ns.mean() - SMALL.N) / SMALL.N)
    ks = small_result.builder_values("ht", "ks")
    assert rep.get("ht", "kolmogorov_max").value == ks.max()


def test_every_metric_has_se(small_result):
    rep = simharness.run_all(SMALL, small_result)
    for m in rep.metrics:
        if m.builder in ("dir", "-"):
            continue
        assert math.isfinite(m.value)
        assert math.isfinite(m.se), m


def test_coverage_is_fraction(small_result):
    rep = simharness.run_table3(SMALL, small_result)
    truth = small_result.truths
    from ppboot.popmodel import Mean

    hits = [lo <= truth[Mean()] <= hi for lo, hi in small_result.f_values("dcal", Mean(), "pct")]
    assert rep.get("dcal", "coverage_percentile", "mean").value == np.mean(hits)


def test_dir_rows_not_implemented(small_result):
    rep = simharness.run_table4(SMALL, small_result)
    dirs = [m for m in rep.metrics if m.builder == "dir"]
    assert dirs and all(m.note == "not implemented" for m in dirs)
    assert "not implemented" in rep.to_table()


def test_single_run_reports_na():
    sc = Scenario(N=40, mc_runs=1, M=20, seed=2, builders=("cpp",))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = simharness.run_all(sc)
    assert "n/a" in rep.to_csv()
    assert "se n/a" in rep.to_table()


def test_constant_y_zero_bias():
    sc = Scenario(N=40, mc_runs=10, M=30, seed=3, model=CONST)
    rep = simharness.run_table5(sc, simharness.simulate(sc, threads=1))
    for b in sc.builders:
        assert rep.get(b, "RB_bootstrap_unbiasedness", "hajek_mean").value == 0.0


def test_mc_error_warns_not_fails(small_result):
    with pytest.warns(UserWarning, match="not below 1%"):
        err = simharness.mc_error_check(SMALL, small_result)
    assert err >= 1.0


def test_empirical_coverage_needs_runs():
    from ppboot.bootstrap import ResamplePlan

    with pytest.raises(ParameterError):
        simharness.empirical_coverage(SMALL, ResamplePlan(M=10), 50, 0)


def test_builder_failures_are_counted():
    sd_sc = Scenario(N=30, n=3, mc_runs=30, M=10, seed=4, builders=("dcal",))
    res = simharness.simulate(sd_sc, threads=1)
    ok = [r for r in res.runs if "failed" not in r.per_builder["dcal"]]
    assert res.failures("dcal") + len(ok) == 30
    rep = simharness.run_table2(sd_sc, res)
    if res.failures("dcal"):
        assert "failed runs" in rep.get("dcal", "RB_xbar").note


# configuration files ----------------------------------------------------------------


def test_parse_config_types():
    cfg = simharness.parse_config("N = 200\n# comment\nbuilders = ht, dcal\nalpha=0.1  # trailing\ndesign = Pareto\n")
    assert cfg == {"N": 200, "builders": ("ht", "dcal"), "alpha": 0.1, "design": "pareto"}


@pytest.mark.parametrize(
    "text,line,needle",
    [
        ("N = 200\nfoo = 1\n", 2, "unknown key 'foo'"),
        ("N = 200\nN = 300\n", 2, "duplicate"),
        ("\n\nM = many\n", 3, "bad value"),
        ("N 200\n", 1, "key = value"),
        ("builders = ht, nope\n", 1, "unknown builder"),
    ],
)
def test_config_errors_name_line(text, line, needle):
    with pytest.raises(ConfigError) as exc:
        simharness.parse_config(text, "s.cfg")
    assert f"s.cfg:{line}:" in str(exc.value) and needle in str(exc.value)


def test_conflicting_sizes():
    with pytest.raises(ConfigError):
        simharness.scenario_from_settings({"N": 50, "n": 50})


def test_load_scenario_overrides(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("N = 100\nmc_runs = 5\nbuilders = ht, dir\n")
    sc = simharness.load_scenario(p, {"mc_runs": 7, "seed": None})
    assert (sc.N, sc.n, sc.mc_runs, sc.builders) == (100, 20, 7, ("ht",))


def test_kernel_check_shapes():
    kc = simharness.kernel_check(SuperpopulationModel(), 100, 20, [0.5, 1.0], populations=3, draws=200, seed=1)
    assert kc.mc_cov.shape == kc.kernel.shape == kc.se.shape == (2, 2)
    assert np.isfinite(kc.max_z)
