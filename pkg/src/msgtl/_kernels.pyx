# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled fused elementwise kernels (see ``_kernels_py`` for the reference)."""
from libc.math cimport sqrt


cdef inline double[::1] _out(a):
    if not a.flags.c_contiguous:
        raise ValueError("output arrays must be C-contiguous")
    return a.reshape(-1)


cdef inline const double[::1] _in(a):
    return a.reshape(-1)


cdef inline const unsigned char[::1] _mask(a):
    return a.reshape(-1)


def blend(live, snap, mask, out):
    cdef const double[::1] l = _in(live)
    cdef const double[::1] s = _in(snap)
    cdef const unsigned char[::1] p = _mask(mask)
    cdef double[::1] o = _out(out)
    cdef Py_ssize_t i, n = l.shape[0]
    with nogil:
        for i in range(n):
            o[i] = l[i] if p[i] != 0 else s[i]
    return out


def gate(grad, mask):
    cdef double[::1] g = _out(grad)
    cdef const unsigned char[::1] p = _mask(mask)
    cdef Py_ssize_t i, n = g.shape[0]
    with nogil:
        for i in range(n):
            if p[i] == 0:
                g[i] = 0.0
    return grad


def relu_forward(z, scale, out):
    cdef const double[::1] zz = _in(z)
    cdef double[::1] o = _out(out)
    cdef const double[::1] sc
    cdef Py_ssize_t i, n = zz.shape[0]
    if scale is None:
        with nogil:
            for i in range(n):
                o[i] = zz[i] if zz[i] > 0.0 else 0.0
    else:
        sc = _in(scale)
        with nogil:
            for i in range(n):
                o[i] = (zz[i] if zz[i] > 0.0 else 0.0) * sc[i]
    return out


def relu_backward(delta, z, scale, out):
    cdef const double[::1] d = _in(delta)
    cdef const double[::1] zz = _in(z)
    cdef double[::1] o = _out(out)
    cdef const double[::1] sc
    cdef Py_ssize_t i, n = zz.shape[0]
    if scale is None:
        with nogil:
            for i in range(n):
                o[i] = d[i] if zz[i] > 0.0 else 0.0
    else:
        sc = _in(scale)
        with nogil:
            for i in range(n):
                o[i] = (d[i] if zz[i] > 0.0 else 0.0) * sc[i]
    return out


def masked_adam(param, grad, m, v, mask, double lr, double b1, double b2,
                double eps, double bc1, double bc2):
    cdef double[::1] w = _out(param)
    cdef const double[::1] g = _in(grad)
    cdef double[::1] mm = _out(m)
    cdef double[::1] vv = _out(v)
    cdef const unsigned char[::1] p = _mask(mask)
    cdef Py_ssize_t i, n = w.shape[0]
    cdef double gi, step
    cdef double c1 = 1.0 - b1
    cdef double c2 = 1.0 - b2
    with nogil:
        for i in range(n):
            gi = g[i] if p[i] != 0 else 0.0
            mm[i] = mm[i] * b1 + c1 * gi
            vv[i] = vv[i] * b2 + c2 * (gi * gi)
            if p[i] != 0:
                step = lr * (mm[i] / bc1) / (sqrt(vv[i] / bc2) + eps)
                w[i] = w[i] - step
    return param


def masked_sgd(param, grad, mask, double lr):
    cdef double[::1] w = _out(param)
    cdef const double[::1] g = _in(grad)
    cdef const unsigned char[::1] p = _mask(mask)
    cdef Py_ssize_t i, n = w.shape[0]
    with nogil:
        for i in range(n):
            if p[i] != 0:
                w[i] = w[i] - lr * g[i]
    return param
