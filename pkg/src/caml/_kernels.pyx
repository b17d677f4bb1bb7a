# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: 3D im2col/col2im for convolution and brute-force
nearest-point distances for surface metrics.

Every routine here has a bit-compatible numpy twin in ``_kernels_py``.
Accumulation order in ``col2im3d`` is kernel-offset-major within each
(sample, channel), matching the fallback, so both backends produce
identical bits.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col3d(real[:, :, :, :, ::1] xp, int kd, int kh, int kw, int stride):
    """(B, C, Dp, Hp, Wp) padded input -> (B, C*kd*kh*kw, Do, Ho, Wo)."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Do = (xp.shape[2] - kd) // stride + 1
    cdef Py_ssize_t Ho = (xp.shape[3] - kh) // stride + 1
    cdef Py_ssize_t Wo = (xp.shape[4] - kw) // stride + 1
    cdef Py_ssize_t K = C * kd * kh * kw
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((B, K, Do, Ho, Wo), dtype=dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, z, y, x, dz, dy, dx, col
    with nogil:
        for b in range(B):
            col = 0
            for c in range(C):
                for dz in range(kd):
                    for dy in range(kh):
                        for dx in range(kw):
                            for z in range(Do):
                                for y in range(Ho):
                                    for x in range(Wo):
                                        out[b, col, z, y, x] = xp[b, c, z * stride + dz, y * stride + dy, x * stride + dx]
                            col = col + 1
    return out_arr


def col2im3d(real[:, :, :, :, ::1] cols, int C, int Dp, int Hp, int Wp,
             int kd, int kh, int kw, int stride):
    """Adjoint of im2col3d: scatter-add columns back into a padded grid."""
    cdef Py_ssize_t B = cols.shape[0], Do = cols.shape[2]
    cdef Py_ssize_t Ho = cols.shape[3], Wo = cols.shape[4]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((B, C, Dp, Hp, Wp), dtype=dtype)
    cdef real[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, c, z, y, x, dz, dy, dx, col
    with nogil:
        for b in range(B):
            col = 0
            for c in range(C):
                for dz in range(kd):
                    for dy in range(kh):
                        for dx in range(kw):
                            for z in range(Do):
                                for y in range(Ho):
                                    for x in range(Wo):
                                        out[b, c, z * stride + dz, y * stride + dy, x * stride + dx] += cols[b, col, z, y, x]
                            col = col + 1
    return out_arr


def min_distances(double[:, ::1] src, double[:, ::1] dst, double[::1] spacing):
    """For each row of ``src`` the Euclidean distance to the nearest row of
    ``dst``, coordinates scaled by ``spacing``."""
    cdef Py_ssize_t n = src.shape[0], m = dst.shape[0], i, j
    cdef double best, d, a, bb, c
    cdef double sz = spacing[0], sy = spacing[1], sx = spacing[2]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            best = 1e300
            for j in range(m):
                a = (src[i, 0] - dst[j, 0]) * sz
                bb = (src[i, 1] - dst[j, 1]) * sy
                c = (src[i, 2] - dst[j, 2]) * sx
                d = a * a + bb * bb + c * c
                if d < best:
                    best = d
            out[i] = sqrt(best)
    return out_arr
