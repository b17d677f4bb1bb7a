"""Backend selection for the hot kernels.

The compiled extension ``caml._kernels`` is used when it imports; otherwise
the numpy fallback in ``caml._kernels_py`` is used. Set ``CAML_PURE_PYTHON=1``
to force the fallback.
"""
import os

import numpy as np

from caml import _kernels_py

_ext = None
if os.environ.get("CAML_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from caml import _kernels as _ext
    except ImportError:  # extension not built
        _ext = None

BACKEND = "cython" if _ext is not None else "python"
_impl = _ext if _ext is not None else _kernels_py


def im2col3d(xp, kd, kh, kw, stride, backend=None):
    impl = _pick(backend)
    return impl.im2col3d(np.ascontiguousarray(xp), kd, kh, kw, stride)


def col2im3d(cols, C, Dp, Hp, Wp, kd, kh, kw, stride, backend=None):
    impl = _pick(backend)
    return impl.col2im3d(np.ascontiguousarray(cols), C, Dp, Hp, Wp, kd, kh, kw, stride)


def min_distances(src, dst, spacing, backend=None):
    impl = _pick(backend)
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    spacing = np.ascontiguousarray(spacing, dtype=np.float64)
    return impl.min_distances(src, dst, spacing)


def _pick(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if _ext is None:
            raise RuntimeError("compiled kernels are not available")
        return _ext
    raise ValueError(f"unknown backend {backend!r}")
