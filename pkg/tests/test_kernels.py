import numpy as np
import pytest

from caml import _kernels_py, kernels

needs_ext = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")


class TestPythonKernels:
    def test_im2col_col2im_adjoint(self, rng):
        xp = rng.standard_normal((2, 3, 6, 5, 6))
        cols = _kernels_py.im2col3d(xp, 3, 2, 3, 1)
        y = rng.standard_normal(cols.shape)
        back = _kernels_py.col2im3d(y, 3, 6, 5, 6, 3, 2, 3, 1)
        assert np.vdot(cols, y) == pytest.approx(np.vdot(xp, back))

    def test_min_distances_brute_force(self, rng):
        src = rng.integers(0, 6, (30, 3))
        dst = rng.integers(0, 6, (17, 3))
        sp = np.array([1.0, 2.0, 0.5])
        ref = np.sqrt((((src[:, None] - dst[None]) * sp) ** 2).sum(-1)).min(1)
        np.testing.assert_allclose(kernels.min_distances(src, dst, sp), ref, rtol=0, atol=1e-12)


@needs_ext
class TestBackendParity:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k,s", [(3, 1), (2, 2)])
    def test_im2col_bitwise(self, rng, dtype, k, s):
        xp = rng.standard_normal((2, 3, 6, 6, 6)).astype(dtype)
        a = kernels.im2col3d(xp, k, k, k, s, backend="python")
        b = kernels.im2col3d(xp, k, k, k, s, backend="cython")
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("k,s", [(3, 1), (2, 2)])
    def test_col2im_bitwise(self, rng, dtype, k, s):
        n = (6 - k) // s + 1
        cols = rng.standard_normal((2, 3 * k ** 3, n, n, n)).astype(dtype)
        a = kernels.col2im3d(cols, 3, 6, 6, 6, k, k, k, s, backend="python")
        b = kernels.col2im3d(cols, 3, 6, 6, 6, k, k, k, s, backend="cython")
        assert a.tobytes() == b.tobytes()

    def test_min_distances_bitwise(self, rng):
        src = rng.integers(0, 20, (300, 3)).astype(np.float64)
        dst = rng.integers(0, 20, (5000, 3)).astype(np.float64)
        sp = np.array([1.0, 1.0, 1.5])
        a = kernels.min_distances(src, dst, sp, backend="python")
        b = kernels.min_distances(src, dst, sp, backend="cython")
        assert a.tobytes() == b.tobytes()

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.im2col3d(np.zeros((1, 1, 3, 3, 3)), 1, 1, 1, 1, backend="fortran")
