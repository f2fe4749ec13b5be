"""The numba and numpy kernel paths must agree bit for bit."""
import numpy as np
import pytest

from lact import _kernels as K


@pytest.mark.parametrize("c,n,k,stride", [(1, 3, 1, 1), (2, 5, 3, 1), (3, 7, 3, 2), (2, 6, 5, 1)])
def test_im2col_paths_agree(rng, c, n, k, stride):
    xp = rng.normal(size=(c, n, n + 1, n + 2))
    out = [(d - k) // stride + 1 for d in xp.shape[1:]]
    a = K._im2col_loops(xp, k, stride, *out)
    b = K._im2col_numpy(xp, k, stride, *out)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("c,n,k,stride", [(1, 3, 1, 1), (2, 5, 3, 1), (3, 7, 3, 2)])
def test_col2im_paths_agree_and_are_adjoint(rng, c, n, k, stride):
    shape = (c, n, n, n)
    out = [(n - k) // stride + 1] * 3
    cols = rng.normal(size=(c * k ** 3, int(np.prod(out))))
    a = K._col2im_loops(cols, *shape, k, stride, *out)
    b = K._col2im_numpy(cols, *shape, k, stride, *out)
    assert a.tobytes() == b.tobytes()
    x = rng.normal(size=shape)
    lhs = np.sum(K._im2col_numpy(x, k, stride, *out) * cols)
    assert lhs == pytest.approx(np.sum(x * b), rel=1e-12)


def test_label_paths_agree(rng):
    for _ in range(30):
        m = rng.random((7, 6, 8)) < 0.25
        la, ca = K._label27_loops(m)
        lb, cb = K._label27_numpy(m)
        assert ca == cb
        np.testing.assert_array_equal(la, lb)


def test_labels_follow_raster_order():
    m = np.zeros((3, 3, 3), dtype=bool)
    m[2, 2, 2] = m[0, 0, 2] = m[0, 2, 0] = True
    labels, count = K.label27(m)
    assert count == 3
    assert labels[0, 0, 2] == 1 and labels[0, 2, 0] == 2 and labels[2, 2, 2] == 3


def test_backend_flag_is_valid():
    assert K.BACKEND in ("numba", "numpy")
