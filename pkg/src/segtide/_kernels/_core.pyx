# Compiled kernel core: the attention hot path on small float64 matrices.
# Mirrors the contract of _numpy.py. Plain loops beat BLAS dispatch at the
# matrix sizes this engine runs (tens of rows), which is where training
# spends its time.

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, sin

cnp.import_array()

NAME = "cython"

MASK_SENTINEL = -1e30
MASK_THRESHOLD = -1e29

cdef double _MASK_THRESHOLD = -1e29


def matmul(object a, object b, bint ta=False, bint tb=False):
    """C = A' @ B' with A' = a.T if ta else a and B' = b.T if tb else b."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t m = aa.shape[1] if ta else aa.shape[0]
    cdef Py_ssize_t k = aa.shape[0] if ta else aa.shape[1]
    cdef Py_ssize_t kb = bb.shape[1] if tb else bb.shape[0]
    cdef Py_ssize_t n = bb.shape[0] if tb else bb.shape[1]
    if k != kb:
        raise ValueError(f"matmul dimension mismatch: inner dims {k} vs {kb}")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] av = aa
    cdef double[:, ::1] bv = bb
    cdef double[:, ::1] cv = c
    cdef Py_ssize_t i, j, p
    cdef double acc, aip
    if not ta and not tb:
        for i in range(m):
            for p in range(k):
                aip = av[i, p]
                if aip != 0.0:
                    for j in range(n):
                        cv[i, j] += aip * bv[p, j]
    elif not ta and tb:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += av[i, p] * bv[j, p]
                cv[i, j] = acc
    elif ta and not tb:
        for p in range(k):
            for i in range(m):
                aip = av[p, i]
                if aip != 0.0:
                    for j in range(n):
                        cv[i, j] += aip * bv[p, j]
    else:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for p in range(k):
                    acc += av[p, i] * bv[j, p]
                cv[i, j] = acc
    return c


def softmax_masked(object x, object mask):
    """Row softmax over the last axis with an additive mask.

    Masked entries come out exactly 0.0. A fully masked row is an error.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xx = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t m = xx.shape[0], n = xx.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] mk
    cdef double[:, ::1] xv = xx
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] mv
    cdef Py_ssize_t i, j
    cdef double rowmax, s, z
    cdef bint any_open
    if mask is None:
        for i in range(m):
            rowmax = xv[i, 0]
            for j in range(1, n):
                if xv[i, j] > rowmax:
                    rowmax = xv[i, j]
            s = 0.0
            for j in range(n):
                z = exp(xv[i, j] - rowmax)
                ov[i, j] = z
                s += z
            for j in range(n):
                ov[i, j] /= s
        return out
    mk = np.ascontiguousarray(mask, dtype=np.float64)
    mv = mk
    for i in range(m):
        any_open = False
        rowmax = 0.0
        for j in range(n):
            if mv[i, j] > _MASK_THRESHOLD:
                z = xv[i, j] + mv[i, j]
                if not any_open or z > rowmax:
                    rowmax = z
                any_open = True
        if not any_open:
            raise ValueError("softmax: fully masked row")
        s = 0.0
        for j in range(n):
            if mv[i, j] > _MASK_THRESHOLD:
                z = exp(xv[i, j] + mv[i, j] - rowmax)
            else:
                z = 0.0
            ov[i, j] = z
            s += z
        for j in range(n):
            ov[i, j] /= s
    return out


def softmax_backward(object y, object g):
    """VJP of row softmax: gx = y * (g - sum(g * y, axis=-1))."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] yy = np.ascontiguousarray(y, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t m = yy.shape[0], n = yy.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n), dtype=np.float64)
    cdef double[:, ::1] yv = yy
    cdef double[:, ::1] gv = gg
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gv[i, j] * yv[i, j]
        for j in range(n):
            ov[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out


def rope_forward(object x, object positions, double base):
    """Rotate even/odd feature pairs of each row by its position angle."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xx = np.ascontiguousarray(x, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pos = np.ascontiguousarray(positions, dtype=np.int64)
    cdef Py_ssize_t n = xx.shape[0], d = xx.shape[1], half = d // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] xv = xx
    cdef double[:, ::1] ov = out
    cdef long long[::1] pv = pos
    cdef Py_ssize_t i, j
    cdef double ang, c, s, x0, x1
    for i in range(n):
        for j in range(half):
            ang = pv[i] * base ** (-2.0 * j / d)
            c = cos(ang)
            s = sin(ang)
            x0 = xv[i, 2 * j]
            x1 = xv[i, 2 * j + 1]
            ov[i, 2 * j] = x0 * c - x1 * s
            ov[i, 2 * j + 1] = x0 * s + x1 * c
    return out


def rope_backward(object g, object positions, double base):
    """VJP of rope_forward: rotate the cotangent by the negated angles."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gg = np.ascontiguousarray(g, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] pos = np.ascontiguousarray(positions, dtype=np.int64)
    cdef Py_ssize_t n = gg.shape[0], d = gg.shape[1], half = d // 2
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] gv = gg
    cdef double[:, ::1] ov = out
    cdef long long[::1] pv = pos
    cdef Py_ssize_t i, j
    cdef double ang, c, s, g0, g1
    for i in range(n):
        for j in range(half):
            ang = pv[i] * base ** (-2.0 * j / d)
            c = cos(ang)
            s = sin(ang)
            g0 = gv[i, 2 * j]
            g1 = gv[i, 2 * j + 1]
            ov[i, 2 * j] = g0 * c + g1 * s
            ov[i, 2 * j + 1] = -g0 * s + g1 * c
    return out
