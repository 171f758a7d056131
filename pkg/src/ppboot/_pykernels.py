"""NumPy implementations of the resampling kernels.

These are the reference versions; ``_ckernels.pyx`` must return bit-identical
results for identical inputs.  All kernels take pre-drawn uniforms so both
backends consume the random stream the same way.
"""

import numpy as np

NEG_INF = -np.inf


def pareto_select(U, lam, n):
    """Pareto order sampling: keep the ``n`` smallest ranking keys per row.

    ``U`` is an (M, N) array of uniforms, ``lam`` the odds pi/(1 - pi)
    (``inf`` for certainty units).  Ties are broken by the lower index.
    """
    U = np.ascontiguousarray(U, dtype=np.float64)
    M, N = U.shape
    if n <= 0:
        return np.zeros((M, N), dtype=np.uint8)
    if n >= N:
        return np.ones((M, N), dtype=np.uint8)
    Q = U / (1.0 - U) / lam
    kth = np.partition(Q, n - 1, axis=1)[:, n - 1][:, None]
    below = Q < kth
    eq = Q == kth
    need = n - below.sum(axis=1)
    take = eq & (np.cumsum(eq, axis=1) <= need[:, None])
    return (below | take).astype(np.uint8)


def cps_qtable(logw, n):
    """Selection probabilities for sequential conditional Poisson sampling.

    ``q[k, j]`` is the probability that unit ``k`` is selected when ``j``
    selections remain for units ``k..K-1``.  Computed from the elementary
    symmetric polynomials of the tail odds, in log space.
    """
    logw = np.asarray(logw, dtype=np.float64)
    K = logw.shape[0]
    q = np.zeros((K, n + 1))
    tail = np.full(n + 1, NEG_INF)
    tail[0] = 0.0
    for k in range(K - 1, -1, -1):
        cand = logw[k] + tail[:-1]
        new = tail.copy()
        new[1:] = np.logaddexp(cand, tail[1:])
        ok = new[1:] > NEG_INF
        qk = np.zeros(n)
        qk[ok] = np.exp(cand[ok] - new[1:][ok])
        q[k, 1:] = qk
        tail = new
    return q


def cps_first_order(q, n):
    """First-order inclusion probabilities implied by a q-table."""
    K = q.shape[0]
    P = np.zeros(n + 1)
    P[n] = 1.0
    pi = np.empty(K)
    for k in range(K):
        sel = P * q[k]
        pi[k] = sel.sum()
        newP = P - sel
        newP[:-1] += sel[1:]
        P = newP
    return pi


def cps_sequential_select(U, q, forced, n_rest):
    """Draw CPS samples unit by unit from a q-table.

    Rows of ``q`` belonging to forced units are ignored; those units are always
    selected and do not consume the ``n_rest`` budget.
    """
    U = np.ascontiguousarray(U, dtype=np.float64)
    M, N = U.shape
    mask = np.zeros((M, N), dtype=np.uint8)
    j = np.full(M, n_rest, dtype=np.int64)
    for k in range(N):
        if forced[k]:
            mask[:, k] = 1
            continue
        hit = (j > 0) & (U[:, k] < q[k, j])
        mask[:, k] = hit
        j -= hit
    return mask


def hajek_stats(mask, y, w, probs):
    """Weighted sums, Hajek mean and Hajek quantiles for every row of ``mask``.

    ``y`` must be sorted ascending.  Output columns: sum of weights, weighted
    total, Hajek mean, then one column per quantile level in ``probs``.
    """
    mask = np.asarray(mask)
    M, N = mask.shape
    probs = np.asarray(probs, dtype=np.float64)
    out = np.empty((M, 3 + probs.shape[0]))
    ww = np.where(mask != 0, w, 0.0)
    cw = np.cumsum(ww, axis=1)
    cwy = np.cumsum(ww * y, axis=1)
    tot = cw[:, -1]
    out[:, 0] = tot
    out[:, 1] = cwy[:, -1]
    out[:, 2] = cwy[:, -1] / tot
    F = cw / tot[:, None]
    for c, p in enumerate(probs):
        idx = np.argmax(F >= p, axis=1)
        out[:, 3 + c] = y[idx]
    return out
