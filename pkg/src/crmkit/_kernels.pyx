# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: trigram feature hashing and chrF n-gram statistics."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef unsigned long long FNV_OFFSET = 0xCBF29CE484222325ULL
cdef unsigned long long FNV_PRIME = 0x100000001B3ULL


cdef inline unsigned long long _fnv_step(unsigned long long h, Py_UCS4 cp) noexcept nogil:
    cdef unsigned int c = <unsigned int>cp
    h ^= c & 0xFF
    h *= FNV_PRIME
    h ^= (c >> 8) & 0xFF
    h *= FNV_PRIME
    h ^= (c >> 16) & 0xFF
    h *= FNV_PRIME
    h ^= (c >> 24) & 0xFF
    h *= FNV_PRIME
    return h


def fnv1a_codepoints(str text):
    cdef unsigned long long h = FNV_OFFSET
    cdef Py_UCS4 ch
    for ch in text:
        h = _fnv_step(h, ch)
    return h


def hashed_trigram_counts(str text, Py_ssize_t dimension):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.zeros(dimension, dtype=np.float64)
    cdef double[::1] view = out
    cdef Py_ssize_t n = len(text)
    cdef Py_ssize_t i, j
    cdef unsigned long long h
    if n == 0:
        return out
    if n < 3:
        h = FNV_OFFSET
        for j in range(n):
            h = _fnv_step(h, text[j])
        view[h % <unsigned long long>dimension] += -1.0 if (h >> 63) & 1 else 1.0
        return out
    for i in range(n - 2):
        h = FNV_OFFSET
        h = _fnv_step(h, text[i])
        h = _fnv_step(h, text[i + 1])
        h = _fnv_step(h, text[i + 2])
        view[h % <unsigned long long>dimension] += -1.0 if (h >> 63) & 1 else 1.0
    return out


def char_ngram_stats(str reference, str hypothesis, int order):
    cdef Py_ssize_t n, i
    cdef Py_ssize_t len_ref = len(reference)
    cdef Py_ssize_t len_hyp = len(hypothesis)
    cdef long matches, c, r
    cdef dict ref_counts, hyp_counts
    cdef list stats = []
    for n in range(1, order + 1):
        ref_counts = {}
        for i in range(len_ref - n + 1):
            g = reference[i:i + n]
            ref_counts[g] = ref_counts.get(g, 0) + 1
        hyp_counts = {}
        for i in range(len_hyp - n + 1):
            g = hypothesis[i:i + n]
            hyp_counts[g] = hyp_counts.get(g, 0) + 1
        matches = 0
        for g, cnt in hyp_counts.items():
            r = ref_counts.get(g, 0)
            if r:
                c = cnt
                matches += c if c < r else r
        stats.append((matches, max(len_hyp - n + 1, 0), max(len_ref - n + 1, 0)))
    return stats
