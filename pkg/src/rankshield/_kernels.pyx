# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled dense-network kernels.

Same contract as :mod:`rankshield._fallback`; loops are written per sample so
that the small matrices typical of tabular models avoid numpy call overhead.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p

cnp.import_array()

cdef enum:
    RELU = 0
    HEAD_PROB = 0
    HEAD_LOGIT = 1


cdef inline double _act(double z, int act, double rho) noexcept nogil:
    cdef double rz
    if act == RELU:
        return z if z > 0.0 else 0.0
    rz = rho * z
    if rz > 30.0:
        return z
    return log1p(exp(rz)) / rho


cdef inline double _act_grad(double z, int act, double rho) noexcept nogil:
    cdef double rz, e
    if act == RELU:
        return 1.0 if z > 0.0 else 0.0
    rz = rho * z
    if rz >= 0.0:
        return 1.0 / (1.0 + exp(-rz))
    e = exp(rz)
    return e / (1.0 + e)


cdef void _forward(const double[::1] params, const long[::1] dims, int nl,
                   int act, double rho, const double[::1] x,
                   double[::1] zbuf, double[::1] abuf,
                   const long[::1] zoff, const long[::1] poff) noexcept nogil:
    # zbuf holds every layer's pre-activation; abuf holds hidden activations.
    cdef int l, o, i, d_in, d_out
    cdef long wo, bo
    cdef double s
    for l in range(nl):
        d_in = dims[l]
        d_out = dims[l + 1]
        wo = poff[l]
        bo = wo + d_out * d_in
        for o in range(d_out):
            s = params[bo + o]
            if l == 0:
                for i in range(d_in):
                    s = s + params[wo + o * d_in + i] * x[i]
            else:
                for i in range(d_in):
                    s = s + params[wo + o * d_in + i] * abuf[zoff[l - 1] + i]
            zbuf[zoff[l] + o] = s
            if l < nl - 1:
                abuf[zoff[l] + o] = _act(s, act, rho)


cdef double _output(const double[::1] zbuf, long lo, int C, long c, int mode,
                    double[::1] probs_row, double[::1] delta) noexcept nogil:
    # Fills probs_row and the output-layer delta; returns the per-sample score.
    cdef int o
    cdef double mx = zbuf[lo], tot = 0.0, pc, val
    for o in range(1, C):
        if zbuf[lo + o] > mx:
            mx = zbuf[lo + o]
    for o in range(C):
        probs_row[o] = exp(zbuf[lo + o] - mx)
        tot = tot + probs_row[o]
    for o in range(C):
        probs_row[o] = probs_row[o] / tot
    if mode == HEAD_PROB:
        pc = probs_row[c]
        for o in range(C):
            delta[o] = -pc * probs_row[o]
        delta[c] = delta[c] + pc
        return pc
    if mode == HEAD_LOGIT:
        for o in range(C):
            delta[o] = 0.0
        delta[c] = 1.0
        return zbuf[lo + c]
    for o in range(C):
        delta[o] = probs_row[o]
    delta[c] = delta[c] - 1.0
    val = -(zbuf[lo + c] - mx - log(tot))
    return val


def _offsets(long[::1] dims):
    cdef int nl = dims.shape[0] - 1
    zoff = np.zeros(nl + 1, dtype=np.int64)
    poff = np.zeros(nl + 1, dtype=np.int64)
    cdef int l
    for l in range(nl):
        zoff[l + 1] = zoff[l] + dims[l + 1]
        poff[l + 1] = poff[l] + dims[l + 1] * dims[l] + dims[l + 1]
    return zoff, poff


def score_grads(double[::1] params, long[::1] dims, int act, double rho,
                int head, double[:, ::1] X, long[::1] classes):
    """Class scores and their input gradients for a batch."""
    cdef int nl = dims.shape[0] - 1
    cdef int n = dims[0], C = dims[nl]
    cdef Py_ssize_t B = X.shape[0], b
    cdef int l, o, i, d_in, d_out, width = 0
    for l in range(nl + 1):
        if dims[l] > width:
            width = dims[l]
    zoff_a, poff_a = _offsets(dims)
    cdef long[::1] zoff = zoff_a
    cdef long[::1] poff = poff_a
    cdef double[::1] zbuf = np.empty(zoff[nl])
    cdef double[::1] abuf = np.empty(zoff[nl])
    cdef double[::1] d1 = np.empty(width)
    cdef double[::1] d2 = np.empty(width)
    cdef double[::1] tmp
    probs_a = np.empty((B, C))
    scores_a = np.empty(B)
    grads_a = np.empty((B, n))
    cdef double[:, ::1] probs = probs_a
    cdef double[::1] scores = scores_a
    cdef double[:, ::1] grads = grads_a
    cdef long wo
    cdef double s
    with nogil:
        for b in range(B):
            _forward(params, dims, nl, act, rho, X[b], zbuf, abuf, zoff, poff)
            scores[b] = _output(zbuf, zoff[nl - 1], C, classes[b], head,
                                probs[b], d1)
            for l in range(nl - 1, 0, -1):
                d_in = dims[l]
                d_out = dims[l + 1]
                wo = poff[l]
                for i in range(d_in):
                    s = 0.0
                    for o in range(d_out):
                        s = s + d1[o] * params[wo + o * d_in + i]
                    d2[i] = s * _act_grad(zbuf[zoff[l - 1] + i], act, rho)
                tmp = d1
                d1 = d2
                d2 = tmp
            d_out = dims[1]
            for i in range(n):
                s = 0.0
                for o in range(d_out):
                    s = s + d1[o] * params[o * n + i]
                grads[b, i] = s
    return probs_a, scores_a, grads_a


def param_grads(double[::1] params, long[::1] dims, int act, double rho,
                int mode, double[:, ::1] X, long[::1] classes,
                double[::1] weights):
    """Weighted parameter gradient of per-sample scores or cross-entropy."""
    cdef int nl = dims.shape[0] - 1
    cdef int n = dims[0], C = dims[nl]
    cdef Py_ssize_t B = X.shape[0], b
    cdef int l, o, i, d_in, d_out, width = 0
    for l in range(nl + 1):
        if dims[l] > width:
            width = dims[l]
    zoff_a, poff_a = _offsets(dims)
    cdef long[::1] zoff = zoff_a
    cdef long[::1] poff = poff_a
    cdef double[::1] zbuf = np.empty(zoff[nl])
    cdef double[::1] abuf = np.empty(zoff[nl])
    cdef double[::1] d1 = np.empty(width)
    cdef double[::1] d2 = np.empty(width)
    cdef double[::1] prow = np.empty(C)
    cdef double[::1] tmp
    grad_a = np.zeros(params.shape[0])
    cdef double[::1] grad = grad_a
    cdef long wo, bo
    cdef double s, w, value = 0.0, ain
    with nogil:
        for b in range(B):
            w = weights[b]
            _forward(params, dims, nl, act, rho, X[b], zbuf, abuf, zoff, poff)
            value = value + w * _output(zbuf, zoff[nl - 1], C, classes[b], mode,
                                        prow, d1)
            for o in range(C):
                d1[o] = d1[o] * w
            for l in range(nl - 1, -1, -1):
                d_in = dims[l]
                d_out = dims[l + 1]
                wo = poff[l]
                bo = wo + d_out * d_in
                for o in range(d_out):
                    grad[bo + o] = grad[bo + o] + d1[o]
                    for i in range(d_in):
                        if l == 0:
                            ain = X[b, i]
                        else:
                            ain = abuf[zoff[l - 1] + i]
                        grad[wo + o * d_in + i] = grad[wo + o * d_in + i] + d1[o] * ain
                if l > 0:
                    for i in range(d_in):
                        s = 0.0
                        for o in range(d_out):
                            s = s + d1[o] * params[wo + o * d_in + i]
                        d2[i] = s * _act_grad(zbuf[zoff[l - 1] + i], act, rho)
                    tmp = d1
                    d1 = d2
                    d2 = tmp
    return value, grad_a
