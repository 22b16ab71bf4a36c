# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pack/unpack and packed-weight matmul.

Signatures mirror ``binquant._kernels_py``; ``binquant.kernels`` picks one.
"""

import numpy as np
cimport cython
from cython.parallel cimport prange


def pack1(const signed char[::1] bits):
    """Pack 0/1 values LSB-first, 8 per byte."""
    cdef Py_ssize_t n = bits.shape[0], i
    out = np.zeros((n + 7) // 8, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    for i in range(n):
        if bits[i] < 0 or bits[i] > 1:
            raise ValueError(f"1-bit code out of range at {i}")
        o[i >> 3] |= <unsigned char>(bits[i] << (i & 7))
    return out


def pack2(const signed char[::1] codes):
    """Pack 0..3 values LSB-first, 4 per byte."""
    cdef Py_ssize_t n = codes.shape[0], i
    out = np.zeros((n + 3) // 4, dtype=np.uint8)
    cdef unsigned char[::1] o = out
    for i in range(n):
        if codes[i] < 0 or codes[i] > 3:
            raise ValueError(f"2-bit code out of range at {i}")
        o[i >> 2] |= <unsigned char>(codes[i] << ((i & 3) * 2))
    return out


def unpack1(const unsigned char[::1] data, Py_ssize_t n):
    out = np.empty(n, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = (data[i >> 3] >> (i & 7)) & 1
    return out


def unpack2(const unsigned char[::1] data, Py_ssize_t n):
    out = np.empty(n, dtype=np.int8)
    cdef signed char[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = (data[i >> 2] >> ((i & 3) * 2)) & 3
    return out


cdef inline double _block_dot(const double[:, ::1] a, Py_ssize_t b, Py_ssize_t kofs,
                              const unsigned char[::1] packed, Py_ssize_t base,
                              Py_ssize_t gs, int bit_width, bint signed_codes,
                              double *asum) noexcept nogil:
    cdef Py_ssize_t k, i
    cdef double part = 0.0, s = 0.0, x
    cdef int code
    for k in range(gs):
        i = base + k
        x = a[b, kofs + k]
        s = s + x
        if bit_width == 1:
            code = (packed[i >> 3] >> (i & 7)) & 1
            if signed_codes:
                if code:
                    part = part + x
                else:
                    part = part - x
            elif code:
                part = part + x
        else:
            code = (packed[i >> 2] >> ((i & 3) * 2)) & 3
            part = part + code * x
    asum[0] = s
    return part


cdef inline double _output(const double[:, ::1] a, Py_ssize_t b, Py_ssize_t c,
                           const unsigned char[::1] packed, Py_ssize_t nb, Py_ssize_t gs,
                           int bit_width, bint signed_codes,
                           const double[::1] scales, const double[::1] zps, bint has_zp) noexcept nogil:
    cdef Py_ssize_t j, g
    cdef double acc = 0.0, part, asum = 0.0
    for j in range(nb):
        g = c * nb + j
        part = _block_dot(a, b, j * gs, packed, g * gs, gs, bit_width, signed_codes, &asum)
        # one multiply per block partial sum
        acc = acc + scales[g] * part
        if has_zp:
            acc = acc + zps[g] * asum
    return acc


cdef void _build_table(const double[:, ::1] a, Py_ssize_t b, Py_ssize_t ngroups, int bit_width,
                       bint signed_codes, double *table) noexcept nogil:
    # table[g*256 + byte] = sum of code * x over the codes of one packed byte,
    # built one code at a time so each entry is a plain left-to-right sum
    cdef Py_ssize_t g, i, j, n, d
    cdef int per = 8 if bit_width == 1 else 4
    cdef int levels = 2 if bit_width == 1 else 4
    cdef double x, v
    cdef double *t
    for g in range(ngroups):
        t = table + g * 256
        t[0] = 0.0
        n = 1
        for i in range(per):
            x = a[b, g * per + i]
            # code i occupies digit i; descend so t[j] is read before it is overwritten
            for d in range(levels - 1, -1, -1):
                if bit_width == 1 and signed_codes:
                    v = x if d else -x
                else:
                    v = d * x
                for j in range(n):
                    t[j + d * n] = t[j] + v
            n = n * levels


cdef void _table_row(const double[:, ::1] a, Py_ssize_t b, const unsigned char[::1] packed,
                     Py_ssize_t n_channels, Py_ssize_t nb, Py_ssize_t gs, int bit_width,
                     const double[::1] scales, const double[::1] zps, bint has_zp,
                     const double *table, const double *bsum, double[:, ::1] y,
                     int num_threads) noexcept nogil:
    cdef int per = 8 if bit_width == 1 else 4
    cdef Py_ssize_t bpb = gs // per, bpr = nb * bpb
    cdef Py_ssize_t c, j, t, g, base
    cdef double acc, part
    for c in prange(n_channels, num_threads=num_threads, schedule="static"):
        acc = 0.0
        base = c * bpr
        for j in range(nb):
            part = 0.0
            for t in range(bpb):
                g = j * bpb + t
                part = part + table[g * 256 + packed[base + g]]
            # one multiply per block partial sum
            acc = acc + scales[c * nb + j] * part
            if has_zp:
                acc = acc + zps[c * nb + j] * bsum[j]
        y[b, c] = acc


def packed_matmul(const double[:, ::1] a, const unsigned char[::1] packed, int bit_width,
                  bint signed_codes, Py_ssize_t n_channels, Py_ssize_t blocks_per_channel,
                  Py_ssize_t group_size, const double[::1] scales, zero_points=None,
                  int num_threads=1):
    cdef Py_ssize_t B = a.shape[0], b, c, j, k
    cdef Py_ssize_t nb = blocks_per_channel, gs = group_size
    cdef bint has_zp = zero_points is not None
    cdef const double[::1] zps
    cdef int per = 8 if bit_width == 1 else 4
    cdef double s
    cdef double[::1] ptbl, psum
    if has_zp:
        zps = zero_points
    else:
        zps = scales
    out = np.zeros((B, n_channels), dtype=np.float64)
    cdef double[:, ::1] y = out
    if num_threads < 1:
        num_threads = 1
    if gs % per == 0 and B > 0:
        # byte-aligned blocks: one lookup per packed byte into per-row partial-sum tables
        ptbl = np.empty(((nb * gs) // per) * 256, dtype=np.float64)
        psum = np.zeros(nb, dtype=np.float64)
        for b in range(B):
            _build_table(a, b, (nb * gs) // per, bit_width, signed_codes, &ptbl[0])
            if has_zp:
                for j in range(nb):
                    s = 0.0
                    for k in range(gs):
                        s = s + a[b, j * gs + k]
                    psum[j] = s
            _table_row(a, b, packed, n_channels, nb, gs, bit_width, scales, zps, has_zp,
                       &ptbl[0], &psum[0], y, num_threads)
        return out
    for b in prange(B, nogil=True, num_threads=num_threads, schedule="static"):
        for c in range(n_channels):
            y[b, c] = _output(a, b, c, packed, nb, gs, bit_width, signed_codes, scales, zps, has_zp)
    return out
