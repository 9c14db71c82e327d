# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see _pykernels for the reference semantics."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, isnan, nextafterf
from libc.stdint cimport uint16_t, uint32_t, uint64_t, int64_t

cnp.import_array()

BACKEND = "cython"


def accumulate(double[::1] acc, const float[::1] src, double weight):
    cdef Py_ssize_t i, n = acc.shape[0]
    if src.shape[0] != n:
        raise ValueError("length mismatch")
    with nogil:
        for i in range(n):
            acc[i] += weight * <double>src[i]


cdef inline uint16_t _round_bf16(double x) nogil:
    cdef float t = <float>x
    cdef uint32_t bits
    cdef uint64_t wide
    if isnan(x):
        t = <float>x
        bits = (<uint32_t*>&t)[0]
        return <uint16_t>((bits >> 16) | 0x0040)
    if fabs(<double>t) > fabs(x):
        t = nextafterf(t, 0.0)
    bits = (<uint32_t*>&t)[0]
    if <double>t != x:
        bits |= 1
    wide = bits
    return <uint16_t>((wide + 0x7FFF + ((wide >> 16) & 1)) >> 16)


def f64_to_bf16(x):
    cdef const double[::1] src = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty(src.shape[0], dtype=np.uint16)
    cdef uint16_t[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = _round_bf16(src[i])
    return out.reshape(np.shape(x))


def bf16_to_f32(bits):
    cdef const uint16_t[::1] src = np.ascontiguousarray(bits, dtype=np.uint16).reshape(-1)
    out = np.empty(src.shape[0], dtype=np.uint32)
    cdef uint32_t[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = (<uint32_t>src[i]) << 16
    return out.view(np.float32).reshape(np.shape(bits))


def transition_counts(flat, offsets, weights, int64_t bos, Py_ssize_t vocab_size):
    cdef const int64_t[::1] ids = np.ascontiguousarray(flat, dtype=np.int64)
    cdef const int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    counts = np.zeros((vocab_size, vocab_size), dtype=np.float64)
    cdef double[:, ::1] c = counts
    cdef Py_ssize_t s, t, nseq = off.shape[0] - 1
    cdef int64_t prev, cur
    cdef double ws
    with nogil:
        for s in range(nseq):
            prev = bos
            ws = w[s]
            for t in range(off[s], off[s + 1]):
                cur = ids[t]
                c[prev, cur] += ws
                prev = cur
    return counts
