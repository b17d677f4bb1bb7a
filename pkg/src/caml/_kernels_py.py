"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col3d(xp, kd, kh, kw, stride):
    """(B, C, Dp, Hp, Wp) padded input -> (B, C*kd*kh*kw, Do, Ho, Wo)."""
    B, C = xp.shape[:2]
    win = sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    Do, Ho, Wo = win.shape[2:5]
    cols = win.transpose(0, 1, 5, 6, 7, 2, 3, 4)
    return np.ascontiguousarray(cols).reshape(B, C * kd * kh * kw, Do, Ho, Wo)


def col2im3d(cols, C, Dp, Hp, Wp, kd, kh, kw, stride):
    """Adjoint of im2col3d: scatter-add columns back into a padded grid."""
    B, _, Do, Ho, Wo = cols.shape
    out = np.zeros((B, C, Dp, Hp, Wp), dtype=cols.dtype)
    c8 = cols.reshape(B, C, kd, kh, kw, Do, Ho, Wo)
    s = stride
    for dz in range(kd):
        for dy in range(kh):
            for dx in range(kw):
                out[:, :, dz:dz + s * (Do - 1) + 1:s, dy:dy + s * (Ho - 1) + 1:s,
                    dx:dx + s * (Wo - 1) + 1:s] += c8[:, :, dz, dy, dx]
    return out


def min_distances(src, dst, spacing, chunk=2048):
    """For each row of ``src`` the Euclidean distance to the nearest row of
    ``dst``, coordinates scaled by ``spacing``."""
    out = np.empty(len(src), dtype=np.float64)
    for start in range(0, len(src), chunk):
        s = src[start:start + chunk]
        a = (s[:, None, 0] - dst[None, :, 0]) * spacing[0]
        b = (s[:, None, 1] - dst[None, :, 1]) * spacing[1]
        c = (s[:, None, 2] - dst[None, :, 2]) * spacing[2]
        out[start:start + chunk] = np.sqrt((a * a + b * b + c * c).min(axis=1))
    return out
