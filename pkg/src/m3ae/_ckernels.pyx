# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels for the autodiff engine.

Every kernel walks rows independently and reduces each row in a fixed order,
so results do not depend on how rows are scheduled. Row reductions are
accumulated in double precision for both float32 and float64 inputs.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erf, erff, exp, expf, sqrt, M_SQRT1_2

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline real _erf(real v) noexcept nogil:
    if real is float:
        return erff(v)
    else:
        return erf(v)


cdef inline real _exp(real v) noexcept nogil:
    if real is float:
        return expf(v)
    else:
        return exp(v)


def gelu_forward(real[::1] x, real[::1] out, real[::1] cdf):
    """``out = x * cdf`` with ``cdf = Phi(x)`` stored for the backward pass."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real v, c
    cdef real half = 0.5, one = 1.0, rt = M_SQRT1_2
    with nogil:
        for i in range(n):
            v = x[i]
            c = half * (one + _erf(v * rt))
            cdf[i] = c
            out[i] = v * c


def gelu_backward(real[::1] x, real[::1] cdf, real[::1] g, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real v
    cdef real half = 0.5, k = INV_SQRT_2PI
    with nogil:
        for i in range(n):
            v = x[i]
            out[i] = g[i] * (cdf[i] + v * k * _exp(-half * v * v))


def softmax_forward(real[:, ::1] x, const unsigned char[:, ::1] mask,
                    Py_ssize_t rows_per_mask, real[:, ::1] out):
    """Row softmax; ``mask[r // rows_per_mask, c] == 0`` drops column ``c``."""
    cdef Py_ssize_t r, c, nrow = x.shape[0], ncol = x.shape[1]
    cdef Py_ssize_t mrow
    cdef bint use_mask = mask.shape[0] > 0
    cdef double m, s
    cdef real e
    with nogil:
        for r in range(nrow):
            mrow = r // rows_per_mask if use_mask else 0
            m = -1e300
            for c in range(ncol):
                if use_mask and not mask[mrow, c]:
                    continue
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(ncol):
                if use_mask and not mask[mrow, c]:
                    out[r, c] = 0
                else:
                    e = _exp(<real>(x[r, c] - m))
                    out[r, c] = e
                    s += e
            if s > 0.0:
                s = 1.0 / s
                for c in range(ncol):
                    out[r, c] = <real>(out[r, c] * s)


def softmax_backward(real[:, ::1] y, real[:, ::1] g, real[:, ::1] out):
    cdef Py_ssize_t r, c, nrow = y.shape[0], ncol = y.shape[1]
    cdef double dot
    with nogil:
        for r in range(nrow):
            dot = 0.0
            for c in range(ncol):
                dot += g[r, c] * y[r, c]
            for c in range(ncol):
                out[r, c] = <real>(y[r, c] * (g[r, c] - dot))


def layer_norm_forward(real[:, ::1] x, real[::1] w, real[::1] b, double eps,
                       real[:, ::1] y, real[:, ::1] xhat, real[::1] rstd):
    cdef Py_ssize_t r, c, nrow = x.shape[0], ncol = x.shape[1]
    cdef double mean, var, d, inv
    with nogil:
        for r in range(nrow):
            mean = 0.0
            for c in range(ncol):
                mean += x[r, c]
            mean /= ncol
            var = 0.0
            for c in range(ncol):
                d = x[r, c] - mean
                var += d * d
            var /= ncol
            inv = 1.0 / sqrt(var + eps)
            rstd[r] = <real>inv
            for c in range(ncol):
                d = (x[r, c] - mean) * inv
                xhat[r, c] = <real>d
                y[r, c] = <real>(d * w[c] + b[c])


def layer_norm_backward(real[:, ::1] g, real[:, ::1] xhat, real[::1] rstd,
                        real[::1] w, real[:, ::1] gx, double[::1] gw, double[::1] gb):
    cdef Py_ssize_t r, c, nrow = g.shape[0], ncol = g.shape[1]
    cdef double a, bsum, gh
    with nogil:
        for r in range(nrow):
            a = 0.0
            bsum = 0.0
            for c in range(ncol):
                gh = g[r, c] * w[c]
                a += gh
                bsum += gh * xhat[r, c]
                gw[c] += g[r, c] * xhat[r, c]
                gb[c] += g[r, c]
            a /= ncol
            bsum /= ncol
            for c in range(ncol):
                gh = g[r, c] * w[c]
                gx[r, c] = <real>(rstd[r] * (gh - a - xhat[r, c] * bsum))


def scatter_add_rows(const long long[::1] idx, real[:, ::1] g, real[:, ::1] out):
    """``out[idx[i]] += g[i]`` in increasing ``i`` order."""
    cdef Py_ssize_t i, c, n = idx.shape[0], d = g.shape[1]
    cdef long long j
    with nogil:
        for i in range(n):
            j = idx[i]
            for c in range(d):
                out[j, c] += g[i, c]
