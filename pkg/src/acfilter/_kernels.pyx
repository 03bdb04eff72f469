# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for scoring and one-pass AdaGrad training.

Arithmetic order mirrors ``_pykernels`` exactly so the two backends produce
bit-identical parameters.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

cdef double P_FLOOR = 1e-12


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _xent(double p, double label) noexcept nogil:
    cdef double q = p
    cdef double out = 0.0
    if q < P_FLOOR:
        q = P_FLOOR
    elif q > 1.0 - P_FLOOR:
        q = 1.0 - P_FLOOR
    if label > 0.0:
        out += label * (log(label) - log(q))
    if label < 1.0:
        out += (1.0 - label) * (log(1.0 - label) - log(1.0 - q))
    if out < 0.0:
        out = 0.0
    return out


cdef inline void _entity(const double[:, ::1] V, const cnp.int64_t[::1] ptr,
                         const cnp.int64_t[::1] rows, const double[::1] w,
                         Py_ssize_t i, double[::1] out) noexcept nogil:
    cdef Py_ssize_t D = V.shape[1]
    cdef Py_ssize_t j, k
    cdef cnp.int64_t r
    cdef double wj
    for k in range(D):
        out[k] = 0.0
    for j in range(ptr[i], ptr[i + 1]):
        r = rows[j]
        wj = w[j]
        for k in range(D):
            out[k] += wj * V[r, k]


def train_events(double[:, ::1] V, double[:, ::1] G, double[::1] state,
                 const cnp.int64_t[::1] uptr, const cnp.int64_t[::1] urows, const double[::1] uw,
                 const cnp.int64_t[::1] aptr, const cnp.int64_t[::1] arows, const double[::1] aw,
                 const cnp.int64_t[::1] order, const double[::1] labels,
                 double eta, double eps, double lam, bint update_vectors,
                 double[::1] out_pred):
    """Train sequentially on ``order``; returns the summed pre-update loss.

    ``state`` holds ``[bias, bias_accum]`` and is updated in place.
    """
    cdef Py_ssize_t D = V.shape[1]
    cdef Py_ssize_t n = order.shape[0]
    cdef double[::1] u = np.zeros(D)
    cdef double[::1] a = np.zeros(D)
    cdef Py_ssize_t t, i, j, k
    cdef cnp.int64_t r
    cdef double dot, s, p, label, g, gw, gr, loss = 0.0
    with nogil:
        for t in range(n):
            i = order[t]
            _entity(V, uptr, urows, uw, i, u)
            _entity(V, aptr, arows, aw, i, a)
            dot = 0.0
            for k in range(D):
                dot += u[k] * a[k]
            s = state[0] + dot
            p = _sigmoid(s)
            out_pred[t] = p
            label = labels[t]
            loss += _xent(p, label)
            g = p - label
            state[1] += g * g
            state[0] -= eta * g / sqrt(state[1] + eps)
            if not update_vectors:
                continue
            for j in range(uptr[i], uptr[i + 1]):
                r = urows[j]
                gw = g * uw[j]
                for k in range(D):
                    gr = gw * a[k] + lam * V[r, k]
                    G[r, k] += gr * gr
                    V[r, k] -= eta * gr / sqrt(G[r, k] + eps)
            for j in range(aptr[i], aptr[i + 1]):
                r = arows[j]
                gw = g * aw[j]
                for k in range(D):
                    gr = gw * u[k] + lam * V[r, k]
                    G[r, k] += gr * gr
                    V[r, k] -= eta * gr / sqrt(G[r, k] + eps)
    return loss


def predict_events(const double[:, ::1] V, double bias,
                   const cnp.int64_t[::1] uptr, const cnp.int64_t[::1] urows, const double[::1] uw,
                   const cnp.int64_t[::1] aptr, const cnp.int64_t[::1] arows, const double[::1] aw,
                   double[::1] out):
    cdef Py_ssize_t D = V.shape[1]
    cdef Py_ssize_t n = out.shape[0]
    cdef double[::1] u = np.zeros(D)
    cdef double[::1] a = np.zeros(D)
    cdef Py_ssize_t i, k
    cdef double dot
    with nogil:
        for i in range(n):
            _entity(V, uptr, urows, uw, i, u)
            _entity(V, aptr, arows, aw, i, a)
            dot = 0.0
            for k in range(D):
                dot += u[k] * a[k]
            out[i] = _sigmoid(bias + dot)


def event_gradient(const double[:, ::1] V, double bias,
                   const cnp.int64_t[::1] urows, const double[::1] uw,
                   const cnp.int64_t[::1] arows, const double[::1] aw,
                   double label, double lam,
                   double[:, ::1] grad_u, double[:, ::1] grad_a):
    """Gradient of one event's regularized loss; returns ``(p, d_bias)``."""
    cdef Py_ssize_t D = V.shape[1]
    cdef Py_ssize_t nu = urows.shape[0]
    cdef Py_ssize_t na = arows.shape[0]
    cdef cnp.int64_t[::1] ptr_u = np.array([0, nu], dtype=np.int64)
    cdef cnp.int64_t[::1] ptr_a = np.array([0, na], dtype=np.int64)
    cdef double[::1] u = np.zeros(D)
    cdef double[::1] a = np.zeros(D)
    cdef Py_ssize_t j, k
    cdef double dot = 0.0, p, g, gw
    _entity(V, ptr_u, urows, uw, 0, u)
    _entity(V, ptr_a, arows, aw, 0, a)
    for k in range(D):
        dot += u[k] * a[k]
    p = _sigmoid(bias + dot)
    g = p - label
    for j in range(nu):
        gw = g * uw[j]
        for k in range(D):
            grad_u[j, k] = gw * a[k] + lam * V[urows[j], k]
    for j in range(na):
        gw = g * aw[j]
        for k in range(D):
            grad_a[j, k] = gw * u[k] + lam * V[arows[j], k]
    return p, g


def xent_sum(const double[::1] p, const double[::1] labels):
    cdef Py_ssize_t i
    cdef double total = 0.0
    with nogil:
        for i in range(p.shape[0]):
            total += _xent(p[i], labels[i])
    return total
