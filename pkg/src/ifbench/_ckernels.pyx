# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for image-quality and texture measurements.

Signatures mirror ``ifbench._kernels_py`` exactly; ``ifbench.kernels``
picks one of the two at import time.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _filter_valid(const double[:, ::1] src, const double[::1] w,
                        double[:, ::1] tmp, double[:, ::1] out) noexcept nogil:
    # separable correlation, 'valid' extent on both axes
    cdef Py_ssize_t h = src.shape[0], wd = src.shape[1], k = w.shape[0]
    cdef Py_ssize_t oh = h - k + 1, ow = wd - k + 1
    cdef Py_ssize_t i, j, m
    cdef double acc
    for i in range(h):
        for j in range(ow):
            acc = 0.0
            for m in range(k):
                acc = acc + w[m] * src[i, j + m]
            tmp[i, j] = acc
    for i in range(oh):
        for j in range(ow):
            acc = 0.0
            for m in range(k):
                acc = acc + w[m] * tmp[i + m, j]
            out[i, j] = acc


def ssim_mean(a, b, win, double c1, double c2):
    cdef const double[:, ::1] x = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] y = np.ascontiguousarray(b, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(win, dtype=np.float64)
    cdef Py_ssize_t h = x.shape[0], wd = x.shape[1], k = w.shape[0]
    if y.shape[0] != h or y.shape[1] != wd:
        raise ValueError("shape mismatch")
    if k > h or k > wd:
        raise ValueError("window larger than image")
    cdef Py_ssize_t oh = h - k + 1, ow = wd - k + 1
    cdef double[:, ::1] xx = np.empty((h, wd))
    cdef double[:, ::1] yy = np.empty((h, wd))
    cdef double[:, ::1] xy = np.empty((h, wd))
    cdef double[:, ::1] tmp = np.empty((h, ow))
    cdef double[:, ::1] mx = np.empty((oh, ow))
    cdef double[:, ::1] my = np.empty((oh, ow))
    cdef double[:, ::1] sxx = np.empty((oh, ow))
    cdef double[:, ::1] syy = np.empty((oh, ow))
    cdef double[:, ::1] sxy = np.empty((oh, ow))
    cdef Py_ssize_t i, j
    cdef double total = 0.0, ux, uy, vx, vy, cxy
    with nogil:
        for i in range(h):
            for j in range(wd):
                xx[i, j] = x[i, j] * x[i, j]
                yy[i, j] = y[i, j] * y[i, j]
                xy[i, j] = x[i, j] * y[i, j]
        _filter_valid(x, w, tmp, mx)
        _filter_valid(y, w, tmp, my)
        _filter_valid(xx, w, tmp, sxx)
        _filter_valid(yy, w, tmp, syy)
        _filter_valid(xy, w, tmp, sxy)
        for i in range(oh):
            for j in range(ow):
                ux = mx[i, j]
                uy = my[i, j]
                vx = sxx[i, j] - ux * ux
                vy = syy[i, j] - uy * uy
                cxy = sxy[i, j] - ux * uy
                total = total + ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / (
                    (ux * ux + uy * uy + c1) * (vx + vy + c2))
    return total / (oh * ow)


def glcm(q, mask, Py_ssize_t dy, Py_ssize_t dx, Py_ssize_t nlevels):
    cdef const cnp.int64_t[:, ::1] lv = np.ascontiguousarray(q, dtype=np.int64)
    cdef const cnp.uint8_t[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t h = lv.shape[0], w = lv.shape[1]
    out = np.zeros((nlevels, nlevels), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] m = out
    cdef Py_ssize_t i, j, i2, j2
    cdef cnp.int64_t a, b
    with nogil:
        for i in range(h):
            i2 = i + dy
            if i2 < 0 or i2 >= h:
                continue
            for j in range(w):
                j2 = j + dx
                if j2 < 0 or j2 >= w:
                    continue
                if mk[i, j] == 0 or mk[i2, j2] == 0:
                    continue
                a = lv[i, j]
                b = lv[i2, j2]
                if a < 0 or b < 0 or a >= nlevels or b >= nlevels:
                    continue
                m[a, b] += 1
    return out
