"""Backend equivalence for the hot kernels (numba vs numpy fallback)."""

import numpy as np
import pytest

from forgetnot.kernels import _numpy as knp

numba_impl = pytest.importorskip("forgetnot.kernels._numba")

rng = np.random.default_rng(42)


@pytest.mark.parametrize("pad", [0, 1])
@pytest.mark.parametrize("kernel", [1, 3])
def test_conv_backends_agree(pad, kernel):
    if kernel == 1 and pad == 1:
        pytest.skip("1x1 conv is only used unpadded")
    x = rng.normal(size=(4, 5, 9, 9))
    w = rng.normal(size=(6, 5, kernel, kernel))
    b = rng.normal(size=6)
    y1 = knp.conv2d_forward(x, w, b, pad)
    y2 = numba_impl.conv2d_forward(x, w, b, pad)
    np.testing.assert_allclose(y1, y2, atol=1e-12)
    dy = rng.normal(size=y1.shape)
    np.testing.assert_allclose(
        knp.conv2d_backward_input(dy, w, x.shape, pad),
        numba_impl.conv2d_backward_input(dy, w, x.shape, pad), atol=1e-12)
    dw1, db1 = knp.conv2d_backward_weights(dy, x, w.shape, pad)
    dw2, db2 = numba_impl.conv2d_backward_weights(dy, x, w.shape, pad)
    np.testing.assert_allclose(dw1, dw2, atol=1e-12)
    np.testing.assert_allclose(db1, db2, atol=1e-12)


@pytest.mark.parametrize("exclude_self", [False, True])
def test_knn_backends_agree(exclude_self):
    q = rng.normal(size=(40, 3))
    ref = q if exclude_self else rng.normal(size=(70, 3))
    d1 = knp.knn_kth_distance(q, ref, 5, exclude_self)
    d2 = numba_impl.knn_kth_distance(q, ref, 5, exclude_self)
    np.testing.assert_allclose(d1, d2, atol=1e-12)


def test_knn_matches_sorted_bruteforce():
    q = rng.normal(size=(12, 2))
    ref = rng.normal(size=(30, 2))
    got = knp.knn_kth_distance(q, ref, 3, exclude_self=False)
    for i, point in enumerate(q):
        dists = np.sort(np.linalg.norm(ref - point, axis=1))
        assert got[i] == pytest.approx(dists[2])


def test_env_flag_selects_numpy(monkeypatch):
    import importlib
    import forgetnot.kernels as K
    monkeypatch.setenv("FORGETNOT_NUMBA", "0")
    mod = importlib.reload(K)
    assert mod.BACKEND == "numpy"
    monkeypatch.delenv("FORGETNOT_NUMBA")
    mod = importlib.reload(K)
    assert mod.BACKEND in ("numba", "numpy")
