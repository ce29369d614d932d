# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numeric kernels. Signatures mirror ``tracekit._pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t FNV_OFFSET = 0xCBF29CE484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001B3ULL


cdef inline uint64_t _fnv(const unsigned char[:] buf) noexcept nogil:
    cdef uint64_t h = FNV_OFFSET
    cdef Py_ssize_t i
    for i in range(buf.shape[0]):
        h ^= buf[i]
        h *= FNV_PRIME
    return h


def fnv1a64(bytes data):
    cdef const unsigned char[:] view = data
    if len(data) == 0:
        return int(FNV_OFFSET)
    return int(_fnv(view))


def hash_features(list tokens, Py_ssize_t dim):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dim, dtype=np.float64)
    cdef uint64_t h
    cdef bytes raw
    cdef const unsigned char[:] view
    cdef double norm = 0.0
    cdef Py_ssize_t i
    for tok in tokens:
        raw = (<str>tok).encode("utf-8")
        if len(raw) == 0:
            h = FNV_OFFSET
        else:
            view = raw
            h = _fnv(view)
        if h >> 63:
            out[h % <uint64_t>dim] -= 1.0
        else:
            out[h % <uint64_t>dim] += 1.0
    for i in range(dim):
        norm += out[i] * out[i]
    if norm > 0.0:
        norm = sqrt(norm)
        for i in range(dim):
            out[i] /= norm
    return out


def clipped_surrogate(
    cnp.ndarray[cnp.float64_t, ndim=2] logits,
    cnp.ndarray[cnp.int64_t, ndim=1] actions,
    cnp.ndarray[cnp.float64_t, ndim=1] old_logp,
    cnp.ndarray[cnp.float64_t, ndim=1] advantages,
    cnp.ndarray[cnp.float64_t, ndim=1] weights,
    double clip_eps,
    double temperature,
):
    cdef Py_ssize_t n = logits.shape[0]
    cdef Py_ssize_t v = logits.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((n, v), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] new_logp = np.zeros(n, dtype=np.float64)
    cdef double loss = 0.0
    cdef double zmax, lse, lp, ratio, clipped, a, u, c, coef, p
    cdef Py_ssize_t i, j, act
    for i in range(n):
        zmax = logits[i, 0] / temperature
        for j in range(1, v):
            if logits[i, j] / temperature > zmax:
                zmax = logits[i, j] / temperature
        lse = 0.0
        for j in range(v):
            lse += exp(logits[i, j] / temperature - zmax)
        lse = log(lse)
        act = actions[i]
        lp = logits[i, act] / temperature - zmax - lse
        new_logp[i] = lp
        ratio = exp(lp - old_logp[i])
        clipped = ratio
        if clipped < 1.0 - clip_eps:
            clipped = 1.0 - clip_eps
        elif clipped > 1.0 + clip_eps:
            clipped = 1.0 + clip_eps
        a = advantages[i]
        u = ratio * a
        c = clipped * a
        if u <= c:
            loss -= weights[i] * u
            coef = -weights[i] * a * ratio
        else:
            loss -= weights[i] * c
            coef = 0.0
        if coef != 0.0:
            for j in range(v):
                p = exp(logits[i, j] / temperature - zmax - lse)
                grad[i, j] = -p * coef / temperature
            grad[i, act] += coef / temperature
    return loss, grad, new_logp
