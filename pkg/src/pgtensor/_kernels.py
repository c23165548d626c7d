"""Hot inner loops of a training iteration.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same signature.  The numba path is used when numba imports and the
environment variable ``PGTENSOR_NUMBA`` is not set to ``0``; ``use_numba()``
switches at runtime (the benchmark and the equivalence tests rely on it).
``PGTENSOR_THREADS`` caps numba's thread pool.
"""
import os

import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization meets a non-positive pivot."""


# -- numpy ------------------------------------------------------------------------


def _np_row_products(G):
    """``A[b] = prod_k G[b, k]`` and the leave-one-mode-out products ``P[b, k]``."""
    B, K, R = G.shape
    prefix = np.ones((B, K + 1, R))
    suffix = np.ones((B, K + 1, R))
    np.cumprod(G, axis=1, out=prefix[:, 1:])
    np.cumprod(G[:, ::-1], axis=1, out=suffix[:, 1:])
    suffix = suffix[:, ::-1]
    P = prefix[:, :K] * suffix[:, 1:]
    return prefix[:, K].copy(), P


def _np_accumulate(C, inv, n_groups, lin_w, quad_w, fish_w):
    R = C.shape[1]
    lin = np.zeros((n_groups, R))
    np.add.at(lin, inv, lin_w[:, None] * C)
    outer = C[:, :, None] * C[:, None, :]
    prec = np.zeros((n_groups, R, R))
    fish = np.zeros((n_groups, R, R))
    np.add.at(prec, inv, quad_w[:, None, None] * outer)
    np.add.at(fish, inv, fish_w[:, None, None] * outer)
    return lin, prec, fish


def _np_spd_solve(F, g):
    """Solve ``F[j] x[j] = g[j]`` through a Cholesky factor, batched over j."""
    try:
        L = np.linalg.cholesky(F)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    n = F.shape[-1]
    y = np.empty_like(g)
    for i in range(n):
        y[:, i] = (g[:, i] - np.einsum("bj,bj->b", L[:, i, :i], y[:, :i])) / L[:, i, i]
    x = np.empty_like(g)
    for i in range(n - 1, -1, -1):
        x[:, i] = (y[:, i] - np.einsum("bj,bj->b", L[:, i + 1:, i], x[:, i + 1:])) / L[:, i, i]
    return x


def _np_em_sweep(x, g, H, gamma):
    """One ascending coordinate sweep on the quadratic with gradient ``g`` and
    curvature ``H`` at ``x``, blended into ``x`` with weight ``gamma``."""
    n = x.shape[1]
    new = x.copy()
    g = g.copy()
    for j in range(n):
        step = g[:, j] / H[:, j, j]
        new[:, j] += step
        g -= H[:, :, j] * step[:, None]
    return (1.0 - gamma) * x + gamma * new


# -- numba ------------------------------------------------------------------------

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_row_products(G):
        B, K, R = G.shape
        A = np.ones((B, R))
        P = np.ones((B, K, R))
        for b in range(B):
            for r in range(R):
                acc = 1.0
                for k in range(K):
                    P[b, k, r] = acc
                    acc *= G[b, k, r]
                A[b, r] = acc
                acc = 1.0
                for k in range(K - 1, -1, -1):
                    P[b, k, r] *= acc
                    acc *= G[b, k, r]
        return A, P

    @njit(cache=True)
    def _nb_accumulate(C, inv, n_groups, lin_w, quad_w, fish_w):
        B, R = C.shape
        lin = np.zeros((n_groups, R))
        prec = np.zeros((n_groups, R, R))
        fish = np.zeros((n_groups, R, R))
        for b in range(B):
            j = inv[b]
            for r in range(R):
                c = C[b, r]
                lin[j, r] += lin_w[b] * c
                for s in range(r + 1):
                    cc = c * C[b, s]
                    prec[j, r, s] += quad_w[b] * cc
                    fish[j, r, s] += fish_w[b] * cc
        for j in range(n_groups):
            for r in range(R):
                for s in range(r):
                    prec[j, s, r] = prec[j, r, s]
                    fish[j, s, r] = fish[j, r, s]
        return lin, prec, fish

    @njit(cache=True, parallel=True)
    def _nb_spd_solve_impl(F, g):
        G, n = g.shape
        x = np.empty_like(g)
        ok = np.ones(G, dtype=np.bool_)
        for j in prange(G):
            L = np.zeros((n, n))
            for i in range(n):
                for c in range(i + 1):
                    s = F[j, i, c]
                    for m in range(c):
                        s -= L[i, m] * L[c, m]
                    if i == c:
                        if not s > 0.0:
                            ok[j] = False
                            s = 1.0
                        L[i, i] = np.sqrt(s)
                    else:
                        L[i, c] = s / L[c, c]
            y = np.empty(n)
            for i in range(n):
                s = g[j, i]
                for m in range(i):
                    s -= L[i, m] * y[m]
                y[i] = s / L[i, i]
            for i in range(n - 1, -1, -1):
                s = y[i]
                for m in range(i + 1, n):
                    s -= L[m, i] * x[j, m]
                x[j, i] = s / L[i, i]
        return x, ok

    def _nb_spd_solve(F, g):
        x, ok = _nb_spd_solve_impl(np.ascontiguousarray(F), np.ascontiguousarray(g))
        if not ok.all():
            raise NotPositiveDefinite(f"{int((~ok).sum())} block(s) not positive definite")
        return x

    @njit(cache=True)
    def _nb_em_sweep(x, g, H, gamma):
        G, n = x.shape
        out = np.empty_like(x)
        gj = np.empty(n)
        for j in range(G):
            for i in range(n):
                gj[i] = g[j, i]
            for i in range(n):
                step = gj[i] / H[j, i, i]
                out[j, i] = x[j, i] + step
                for m in range(n):
                    gj[m] -= H[j, m, i] * step
            for i in range(n):
                out[j, i] = (1.0 - gamma) * x[j, i] + gamma * out[j, i]
        return out

    _threads = os.environ.get("PGTENSOR_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


# -- dispatch ---------------------------------------------------------------------

_IMPLS = {
    "numpy": (_np_row_products, _np_accumulate, _np_spd_solve, _np_em_sweep),
}
if HAVE_NUMBA:
    _IMPLS["numba"] = (_nb_row_products, _nb_accumulate, _nb_spd_solve, _nb_em_sweep)

_active = "numpy"


def use_numba(flag=True):
    """Select the numba kernels (``True``) or the numpy kernels (``False``)."""
    global _active, row_products, accumulate, spd_solve, em_sweep
    _active = "numba" if flag and HAVE_NUMBA else "numpy"
    row_products, accumulate, spd_solve, em_sweep = _IMPLS[_active]
    return _active


def active_backend():
    return _active


use_numba(os.environ.get("PGTENSOR_NUMBA", "1").lower() not in ("0", "false", "no", "off"))
