# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: bilinear resampling forward/backward.

The backward pass is a scatter-add, which NumPy can only express through
slow buffered ufuncs; a plain C loop wins there. Arithmetic runs in double
and is stored in the input dtype, matching the NumPy fallback.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline void _axis(Py_ssize_t in_size, Py_ssize_t out_size,
                       Py_ssize_t* lo, Py_ssize_t* hi, double* frac) noexcept:
    cdef Py_ssize_t i
    cdef double scale = (<double> in_size) / (<double> out_size)
    cdef double src
    for i in range(out_size):
        src = ((<double> i) + 0.5) * scale - 0.5
        if src < 0.0:
            src = 0.0
        if src > in_size - 1.0:
            src = in_size - 1.0
        lo[i] = <Py_ssize_t> src
        hi[i] = lo[i] + 1
        if hi[i] > in_size - 1:
            hi[i] = in_size - 1
        frac[i] = src - <double> lo[i]


def upsample_bilinear_fwd(floating[:, :, ::1] x, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef cnp.ndarray y_lo = np.empty(out_h, dtype=np.intp)
    cdef cnp.ndarray y_hi = np.empty(out_h, dtype=np.intp)
    cdef cnp.ndarray fy = np.empty(out_h, dtype=np.float64)
    cdef cnp.ndarray x_lo = np.empty(out_w, dtype=np.intp)
    cdef cnp.ndarray x_hi = np.empty(out_w, dtype=np.intp)
    cdef cnp.ndarray fx = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t[::1] ylo = y_lo, yhi = y_hi, xlo = x_lo, xhi = x_hi
    cdef double[::1] fyv = fy, fxv = fx
    _axis(h, out_h, &ylo[0], &yhi[0], &fyv[0])
    _axis(w, out_w, &xlo[0], &xhi[0], &fxv[0])

    out_arr = np.empty((c, out_h, out_w), dtype=np.asarray(x).dtype)
    cdef floating[:, :, ::1] out = out_arr
    cdef Py_ssize_t ch, i, j
    cdef double top, bot
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                top = (<double> x[ch, ylo[i], xlo[j]]) * (1.0 - fxv[j]) \
                    + (<double> x[ch, ylo[i], xhi[j]]) * fxv[j]
                bot = (<double> x[ch, yhi[i], xlo[j]]) * (1.0 - fxv[j]) \
                    + (<double> x[ch, yhi[i], xhi[j]]) * fxv[j]
                out[ch, i, j] = <floating> (top * (1.0 - fyv[i]) + bot * fyv[i])
    return out_arr


def upsample_bilinear_bwd(floating[:, :, ::1] grad, Py_ssize_t in_h, Py_ssize_t in_w):
    cdef Py_ssize_t c = grad.shape[0], out_h = grad.shape[1], out_w = grad.shape[2]
    cdef cnp.ndarray y_lo = np.empty(out_h, dtype=np.intp)
    cdef cnp.ndarray y_hi = np.empty(out_h, dtype=np.intp)
    cdef cnp.ndarray fy = np.empty(out_h, dtype=np.float64)
    cdef cnp.ndarray x_lo = np.empty(out_w, dtype=np.intp)
    cdef cnp.ndarray x_hi = np.empty(out_w, dtype=np.intp)
    cdef cnp.ndarray fx = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t[::1] ylo = y_lo, yhi = y_hi, xlo = x_lo, xhi = x_hi
    cdef double[::1] fyv = fy, fxv = fx
    _axis(in_h, out_h, &ylo[0], &yhi[0], &fyv[0])
    _axis(in_w, out_w, &xlo[0], &xhi[0], &fxv[0])

    gx_arr = np.zeros((c, in_h, in_w), dtype=np.asarray(grad).dtype)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t ch, i, j
    cdef double g, wy0, wy1
    for ch in range(c):
        for i in range(out_h):
            wy0 = 1.0 - fyv[i]
            wy1 = fyv[i]
            for j in range(out_w):
                g = <double> grad[ch, i, j]
                gx[ch, ylo[i], xlo[j]] += <floating> (g * wy0 * (1.0 - fxv[j]))
                gx[ch, ylo[i], xhi[j]] += <floating> (g * wy0 * fxv[j])
                gx[ch, yhi[i], xlo[j]] += <floating> (g * wy1 * (1.0 - fxv[j]))
                gx[ch, yhi[i], xhi[j]] += <floating> (g * wy1 * fxv[j])
    return gx_arr
