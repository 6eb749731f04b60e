# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled float32 kernels for bilinear grid sampling and im2col/col2im.

Semantics mirror ``_kernels_py`` exactly; see that module for the contract.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floorf, isfinite

cnp.import_array()


cdef inline void _setup(float u, float v, int H, int W,
                        int* x0, int* x1, int* y0, int* y1,
                        float* wx, float* wy, bint* in_u, bint* in_v, bint* ok) noexcept nogil:
    cdef bint fin = isfinite(u) and isfinite(v)
    if not fin:
        u = 0.0
        v = 0.0
    in_u[0] = u >= 0 and u <= W - 1
    in_v[0] = v >= 0 and v <= H - 1
    ok[0] = fin and in_u[0] and in_v[0]
    if u < 0:
        u = 0
    elif u > W - 1:
        u = W - 1
    if v < 0:
        v = 0
    elif v > H - 1:
        v = H - 1
    x0[0] = <int>floorf(u)
    y0[0] = <int>floorf(v)
    x1[0] = x0[0] + 1 if x0[0] + 1 < W else W - 1
    y1[0] = y0[0] + 1 if y0[0] + 1 < H else H - 1
    wx[0] = u - x0[0]
    wy[0] = v - y0[0]


def grid_sample_forward(const float[:, :, :, ::1] img, const float[:, :, :, ::1] grid):
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t Ho = grid.shape[1], Wo = grid.shape[2]
    out_arr = np.empty((N, C, Ho, Wo), dtype=np.float32)
    valid_arr = np.empty((N, Ho, Wo), dtype=np.bool_)
    cdef float[:, :, :, ::1] out = out_arr
    cdef cnp.npy_bool[:, :, ::1] valid = valid_arr
    cdef Py_ssize_t n, c, i, j
    cdef int x0, x1, y0, y1
    cdef float wx, wy
    cdef bint in_u, in_v, ok
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    _setup(grid[n, i, j, 0], grid[n, i, j, 1], <int>H, <int>W,
                           &x0, &x1, &y0, &y1, &wx, &wy, &in_u, &in_v, &ok)
                    valid[n, i, j] = ok
                    for c in range(C):
                        out[n, c, i, j] = ((1 - wx) * (1 - wy) * img[n, c, y0, x0]
                                           + wx * (1 - wy) * img[n, c, y0, x1]
                                           + (1 - wx) * wy * img[n, c, y1, x0]
                                           + wx * wy * img[n, c, y1, x1])
    return out_arr, valid_arr


def grid_sample_backward(const float[:, :, :, ::1] img, const float[:, :, :, ::1] grid, const float[:, :, :, ::1] gout):
    cdef Py_ssize_t N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3]
    cdef Py_ssize_t Ho = grid.shape[1], Wo = grid.shape[2]
    gimg_arr = np.zeros((N, C, H, W), dtype=np.float32)
    ggrid_arr = np.zeros((N, Ho, Wo, 2), dtype=np.float32)
    cdef float[:, :, :, ::1] gimg = gimg_arr
    cdef float[:, :, :, ::1] ggrid = ggrid_arr
    cdef Py_ssize_t n, c, i, j
    cdef int x0, x1, y0, y1
    cdef float wx, wy, g, du, dv, i00, i01, i10, i11
    cdef bint in_u, in_v, ok
    with nogil:
        for n in range(N):
            for i in range(Ho):
                for j in range(Wo):
                    _setup(grid[n, i, j, 0], grid[n, i, j, 1], <int>H, <int>W,
                           &x0, &x1, &y0, &y1, &wx, &wy, &in_u, &in_v, &ok)
                    du = 0
                    dv = 0
                    for c in range(C):
                        g = gout[n, c, i, j]
                        gimg[n, c, y0, x0] += (1 - wx) * (1 - wy) * g
                        gimg[n, c, y0, x1] += wx * (1 - wy) * g
                        gimg[n, c, y1, x0] += (1 - wx) * wy * g
                        gimg[n, c, y1, x1] += wx * wy * g
                        i00 = img[n, c, y0, x0]
                        i01 = img[n, c, y0, x1]
                        i10 = img[n, c, y1, x0]
                        i11 = img[n, c, y1, x1]
                        du += ((1 - wy) * (i01 - i00) + wy * (i11 - i10)) * g
                        dv += ((1 - wx) * (i10 - i00) + wx * (i11 - i01)) * g
                    ggrid[n, i, j, 0] = du if in_u else 0
                    ggrid[n, i, j, 1] = dv if in_v else 0
    return gimg_arr, ggrid_arr


def im2col(const float[:, :, :, ::1] x, int K, int stride):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H - K) // stride + 1, Wo = (W - K) // stride + 1
    cols_arr = np.empty((N, C * K * K, Ho * Wo), dtype=np.float32)
    cdef float[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(K):
                    for kj in range(K):
                        row = (c * K + ki) * K + kj
                        for i in range(Ho):
                            for j in range(Wo):
                                cols[n, row, i * Wo + j] = x[n, c, i * stride + ki, j * stride + kj]
    return cols_arr


def col2im(const float[:, :, ::1] cols, shape, int K, int stride):
    cdef Py_ssize_t N = shape[0], C = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t Ho = (H - K) // stride + 1, Wo = (W - K) // stride + 1
    out_arr = np.zeros((N, C, H, W), dtype=np.float32)
    cdef float[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, ki, kj, i, j, row
    with nogil:
        for n in range(N):
            for c in range(C):
                for ki in range(K):
                    for kj in range(K):
                        row = (c * K + ki) * K + kj
                        for i in range(Ho):
                            for j in range(Wo):
                                out[n, c, i * stride + ki, j * stride + kj] += cols[n, row, i * Wo + j]
    return out_arr
