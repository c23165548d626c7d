import numpy as np
import pytest

from pgtensor import _kernels

pytestmark = pytest.mark.skipif(not _kernels.HAVE_NUMBA, reason="numba not installed")


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_row_products(rng):
    G = rng.uniform(0.1, 2.0, (50, 5, 4))
    A1, P1 = _kernels._np_row_products(G)
    A2, P2 = _kernels._nb_row_products(G)
    np.testing.assert_allclose(A1, G.prod(axis=1), rtol=1e-14)
    for k in range(5):
        np.testing.assert_allclose(P1[:, k], np.delete(G, k, axis=1).prod(axis=1), rtol=1e-14)
    np.testing.assert_allclose(A2, A1, rtol=1e-14)
    np.testing.assert_allclose(P2, P1, rtol=1e-14)


def test_row_products_with_zeros(rng):
    G = rng.uniform(0.1, 2.0, (10, 3, 2))
    G[0, 1, 0] = 0.0
    _, P = _kernels._nb_row_products(G)
    assert P[0, 1, 0] == pytest.approx(G[0, 0, 0] * G[0, 2, 0])


def test_accumulate(rng):
    C = rng.normal(size=(80, 3))
    inv = rng.integers(0, 7, 80)
    w = [rng.normal(size=80) for _ in range(3)]
    a = _kernels._np_accumulate(C, inv, 7, *w)
    b = _kernels._nb_accumulate(C, inv, 7, *w)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-13)
    # direct loop oracle for one group
    sel = inv == 3
    np.testing.assert_allclose(a[0][3], (w[0][sel, None] * C[sel]).sum(0), atol=1e-13)
    np.testing.assert_allclose(a[2][3], (C[sel].T * w[2][sel]) @ C[sel], atol=1e-13)


def test_spd_solve(rng):
    M = rng.normal(size=(20, 5, 5))
    F = M @ M.transpose(0, 2, 1) + 0.5 * np.eye(5)
    g = rng.normal(size=(20, 5))
    x = np.linalg.solve(F, g[..., None])[..., 0]
    np.testing.assert_allclose(_kernels._np_spd_solve(F, g), x, rtol=1e-9)
    np.testing.assert_allclose(_kernels._nb_spd_solve(F, g), x, rtol=1e-9)


@pytest.mark.parametrize("impl", ["_np_spd_solve", "_nb_spd_solve"])
def test_spd_solve_rejects_indefinite(impl):
    F = np.array([[[1.0, 2.0], [2.0, 1.0]]])
    with pytest.raises(_kernels.NotPositiveDefinite):
        getattr(_kernels, impl)(F, np.ones((1, 2)))


def test_em_sweep(rng):
    M = rng.normal(size=(6, 4, 4))
    H = M @ M.transpose(0, 2, 1) + np.eye(4)
    x = rng.normal(size=(6, 4))
    g = rng.normal(size=(6, 4))
    np.testing.assert_allclose(_kernels._nb_em_sweep(x, g, H, 0.3), _kernels._np_em_sweep(x, g, H, 0.3),
                               rtol=1e-12)


def test_dispatch_switch():
    prev = _kernels.active_backend()
    try:
        assert _kernels.use_numba(False) == "numpy"
        assert _kernels.row_products is _kernels._np_row_products
        assert _kernels.use_numba(True) == "numba"
        assert _kernels.spd_solve is _kernels._nb_spd_solve
    finally:
        _kernels.use_numba(prev == "numba")
