import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from ppboot import pseudopop
from ppboot.pseudopop import SampleData


def brute_donors(fx, ids):
    out = []
    for i, xi in enumerate(fx):
        if i in set(ids.tolist()):
            out.append(i)
            continue
        best = min(sorted(ids.tolist()), key=lambda j: abs(fx[j] - xi))
        out.append(best)
    return out


@given(st.lists(st.integers(0, 20), min_size=2, max_size=40), st.data())
def test_donors_match_brute_force(xs, data):
    fx = np.array(xs, dtype=float)
    k = data.draw(st.integers(1, fx.size))
    ids = np.array(data.draw(st.permutations(range(fx.size)))[:k])
    assert pseudopop.hd_donors(fx, ids).tolist() == brute_donors(fx, ids)


def test_chunked_large_population():
    rng = np.random.default_rng(0)
    fx = rng.uniform(1, 11, 50_000)
    ids = np.sort(rng.choice(fx.size, 200, replace=False))
    d = pseudopop.hd_donors(fx, ids)
    near = ids[np.argmin(np.abs(fx[:, None] - fx[ids][None, :]), axis=1)]
    assert np.array_equal(d, near) and np.array_equal(d[ids], ids)


def test_hd_pseudo_population_x_distribution_exact():
    rng = np.random.default_rng(1)
    fx = rng.uniform(1, 11, 300)
    y = 2 * fx + rng.normal(size=300)
    ids = np.sort(rng.choice(300, 60, replace=False))
    sd = SampleData(ids, y[ids], fx[ids], np.full(60, 0.2), 300, fx.mean(), fx)
    pp = pseudopop.build_hd(sd)
    assert np.array_equal(np.sort(pp.x), np.sort(fx))
    assert np.array_equal(pp.y[ids], y[ids])
    assert set(pp.y.tolist()) <= set(y[ids].tolist())
    assert pp.N_star == 300 and pp.xbar == fx.mean()
