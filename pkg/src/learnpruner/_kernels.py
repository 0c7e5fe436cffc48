"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``LEARNPRUNER_NUMBA`` is not set to ``0``.  Both implementations
are always importable (``np_*`` / ``nb_*``) so tests and the benchmark can
compare them directly; the unprefixed names are bound to the active path.

All kernels operate on 2-D row blocks: callers reshape ``(..., m)`` arrays
to ``(rows, m)`` before dispatch.
"""
import os

import numpy as np

_WANT_NUMBA = os.environ.get("LEARNPRUNER_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _WANT_NUMBA


# --------------------------------------------------------------------------
# weighted softmax: A_ij = exp(x_ij - m_i) g_ij / sum_k exp(x_ik - m_i) g_ik
# m_i is the max over *allowed* entries; U is the unweighted exp / Z, which
# the backward pass needs for d/dg.
# --------------------------------------------------------------------------

def np_weighted_softmax(x, g, allowed):
    xm = np.where(allowed, x, -np.inf)
    m = xm.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(allowed, np.exp(np.where(allowed, x - m, 0.0)), 0.0)
    z = (e * g).sum(axis=1, keepdims=True)
    bad = ~(z[:, 0] > 0.0)
    if bad.any():
        z = np.where(z > 0.0, z, 1.0)
    u = e / z
    return u * g, u, bad


def np_weighted_softmax_grad(a, u, gout):
    s = (a * gout).sum(axis=1, keepdims=True)
    d = gout - s
    return a * d, u * d


def np_greedy_maxmin(unit, selected, count):
    n = unit.shape[0]
    chosen = selected.copy()
    out = np.empty(count, dtype=np.int64)
    sims = unit @ unit[chosen].T
    best = sims.max(axis=1) if chosen.any() else np.full(n, -np.inf)
    for step in range(count):
        cand = np.where(chosen, np.inf, best)
        i = int(np.argmin(cand))
        out[step] = i
        chosen[i] = True
        best = np.maximum(best, unit @ unit[i])
    return out


def np_pruned_softmax(x, keep, causal):
    r, n, _ = x.shape
    eye = np.eye(n, dtype=bool)
    allowed = np.tril(np.ones((n, n), dtype=bool)) if causal else np.ones((n, n), dtype=bool)
    g = np.where(eye, 1.0, keep[:, None, :]) * allowed
    a, u, bad = np_weighted_softmax(x.reshape(-1, n), g.reshape(-1, n), np.broadcast_to(allowed, x.shape).reshape(-1, n))
    return a.reshape(x.shape), u.reshape(x.shape), bad.reshape(r, n)


def np_pruned_softmax_grad(a, u, gout):
    r, n, _ = a.shape
    dx, dg = np_weighted_softmax_grad(a.reshape(-1, n), u.reshape(-1, n), gout.reshape(-1, n))
    dg = dg.reshape(a.shape)
    dg[:, np.arange(n), np.arange(n)] = 0.0
    return dx.reshape(a.shape), dg.sum(axis=1)


if HAVE_NUMBA:

    @numba.njit(cache=True)
    def nb_pruned_softmax(x, keep, causal):
        r, n, _ = x.shape
        a = np.zeros_like(x)
        u = np.zeros_like(x)
        bad = np.zeros((r, n), dtype=np.bool_)
        for b in range(r):
            for i in range(n):
                stop = i + 1 if causal else n
                m = -np.inf
                for j in range(stop):
                    if x[b, i, j] > m:
                        m = x[b, i, j]
                z = 0.0
                for j in range(stop):
                    e = np.exp(x[b, i, j] - m)
                    u[b, i, j] = e
                    z += e if j == i else e * keep[b, j]
                if not z > 0.0:
                    bad[b, i] = True
                    z = 1.0
                for j in range(stop):
                    u[b, i, j] /= z
                    a[b, i, j] = u[b, i, j] if j == i else u[b, i, j] * keep[b, j]
        return a, u, bad

    @numba.njit(cache=True)
    def nb_pruned_softmax_grad(a, u, gout):
        r, n, _ = a.shape
        dx = np.empty_like(a)
        dk = np.zeros((r, n))
        for b in range(r):
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += a[b, i, j] * gout[b, i, j]
                for j in range(n):
                    d = gout[b, i, j] - s
                    dx[b, i, j] = a[b, i, j] * d
                    if j != i:
                        dk[b, j] += u[b, i, j] * d
        return dx, dk

    @numba.njit(cache=True)
    def nb_weighted_softmax(x, g, allowed):
        rows, cols = x.shape
        a = np.zeros_like(x)
        u = np.zeros_like(x)
        bad = np.zeros(rows, dtype=np.bool_)
        for r in range(rows):
            m = -np.inf
            for c in range(cols):
                if allowed[r, c] and x[r, c] > m:
                    m = x[r, c]
            if m == -np.inf:
                m = 0.0
            z = 0.0
            for c in range(cols):
                if allowed[r, c]:
                    e = np.exp(x[r, c] - m)
                    u[r, c] = e
                    z += e * g[r, c]
            if not z > 0.0:
                bad[r] = True
                z = 1.0
            for c in range(cols):
                u[r, c] /= z
                a[r, c] = u[r, c] * g[r, c]
        return a, u, bad

    @numba.njit(cache=True)
    def nb_weighted_softmax_grad(a, u, gout):
        rows, cols = a.shape
        dx = np.empty_like(a)
        dg = np.empty_like(a)
        for r in range(rows):
            s = 0.0
            for c in range(cols):
                s += a[r, c] * gout[r, c]
            for c in range(cols):
                d = gout[r, c] - s
                dx[r, c] = a[r, c] * d
                dg[r, c] = u[r, c] * d
        return dx, dg

    @numba.njit(cache=True)
    def nb_greedy_maxmin(unit, selected, count):
        n, dim = unit.shape
        chosen = selected.copy()
        best = np.full(n, -np.inf)
        for s in range(n):
            if chosen[s]:
                for i in range(n):
                    dot = 0.0
                    for t in range(dim):
                        dot += unit[i, t] * unit[s, t]
                    if dot > best[i]:
                        best[i] = dot
        out = np.empty(count, dtype=np.int64)
        for step in range(count):
            pick = -1
            low = np.inf
            for i in range(n):
                if not chosen[i] and (pick < 0 or best[i] < low):
                    pick = i
                    low = best[i]
            out[step] = pick
            chosen[pick] = True
            for i in range(n):
                dot = 0.0
                for t in range(dim):
                    dot += unit[i, t] * unit[pick, t]
                if dot > best[i]:
                    best[i] = dot
        return out

else:  # pragma: no cover
    nb_pruned_softmax = np_pruned_softmax
    nb_pruned_softmax_grad = np_pruned_softmax_grad
    nb_weighted_softmax = np_weighted_softmax
    nb_weighted_softmax_grad = np_weighted_softmax_grad
    nb_greedy_maxmin = np_greedy_maxmin


def _rows(arr):
    return np.ascontiguousarray(arr).reshape(-1, arr.shape[-1])


def weighted_softmax(x, g, allowed):
    """Row softmax over the last axis of ``x`` weighted by ``g``.

    Returns ``(a, u, bad)`` shaped like ``x`` (``bad`` is per row).
    """
    shape = x.shape
    fn = nb_weighted_softmax if USE_NUMBA else np_weighted_softmax
    x2 = _rows(np.asarray(x, dtype=np.float64))
    g2 = _rows(np.broadcast_to(np.asarray(g, dtype=np.float64), shape))
    al2 = _rows(np.broadcast_to(np.asarray(allowed, dtype=np.bool_), shape))
    a, u, bad = fn(x2, g2, al2)
    return a.reshape(shape), u.reshape(shape), bad.reshape(shape[:-1])


def weighted_softmax_grad(a, u, gout):
    shape = a.shape
    fn = nb_weighted_softmax_grad if USE_NUMBA else np_weighted_softmax_grad
    dx, dg = fn(_rows(a), _rows(u), _rows(np.asarray(gout, dtype=np.float64)))
    return dx.reshape(shape), dg.reshape(shape)


def greedy_maxmin(unit, selected, count):
    """Greedy max-min picks over unit-norm rows; ties go to the lower index."""
    fn = nb_greedy_maxmin if USE_NUMBA else np_greedy_maxmin
    unit = np.ascontiguousarray(unit, dtype=np.float64)
    selected = np.ascontiguousarray(selected, dtype=np.bool_)
    return fn(unit, selected, int(count))


def pruned_softmax(x, keep, causal):
    """Softmax of ``(R, N, N)`` logits with adjacency built from ``keep (R, N)``.

    Returns ``(a, u, bad)``: probabilities, unweighted normalized exponentials
    (needed for d/dkeep) and a per-row flag for empty rows.
    """
    fn = nb_pruned_softmax if USE_NUMBA else np_pruned_softmax
    return fn(np.ascontiguousarray(x, dtype=np.float64), np.ascontiguousarray(keep, dtype=np.float64), bool(causal))


def pruned_softmax_grad(a, u, gout):
    """Returns ``(dx (R, N, N), dkeep (R, N))``; diagonal entries give no keep gradient."""
    fn = nb_pruned_softmax_grad if USE_NUMBA else np_pruned_softmax_grad
    return fn(a, u, np.ascontiguousarray(gout, dtype=np.float64))
