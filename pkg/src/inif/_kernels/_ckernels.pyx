# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: per-point sine-network forward and Exp-Golomb coding.

Semantics match ``_pykernels`` exactly; see that module for the formats.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sin
from libc.stdint cimport int64_t, uint8_t, uint64_t
from libc.stdlib cimport free, malloc

from ..errors import CorruptStream

cnp.import_array()


def siren_forward_points(flat, dims, coords):
    cdef const double[::1] p = np.ascontiguousarray(flat, dtype=np.float64)
    cdef const long[::1] d = np.ascontiguousarray(dims, dtype=np.int_)
    cdef const double[:, ::1] x = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t depth = d.shape[0] - 1
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t width = 0, i
    for i in range(depth + 1):
        if d[i] > width:
            width = d[i]
    out_np = np.empty((n, d[depth]), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef double *buf_a = <double *> malloc(width * sizeof(double))
    cdef double *buf_b = <double *> malloc(width * sizeof(double))
    cdef double *cur
    cdef double *nxt
    cdef double *tmp
    cdef Py_ssize_t pt, layer, j, k, pos, fan_in, fan_out, wpos, bpos
    cdef double acc, omega
    if buf_a == NULL or buf_b == NULL:
        free(buf_a)
        free(buf_b)
        raise MemoryError()
    try:
        with nogil:
            for pt in range(n):
                cur = buf_a
                nxt = buf_b
                for j in range(d[0]):
                    cur[j] = x[pt, j]
                pos = 0
                for layer in range(depth):
                    fan_in = d[layer]
                    fan_out = d[layer + 1]
                    wpos = pos
                    bpos = pos + fan_in * fan_out
                    omega = p[bpos + fan_out]
                    for k in range(fan_out):
                        acc = 0.0
                        for j in range(fan_in):
                            acc = acc + cur[j] * p[wpos + k * fan_in + j]
                        acc = acc + p[bpos + k]
                        if layer < depth - 1:
                            nxt[k] = sin(omega * acc)
                        else:
                            nxt[k] = acc
                    pos = bpos + fan_out + 1
                    tmp = cur
                    cur = nxt
                    nxt = tmp
                for k in range(d[depth]):
                    out[pt, k] = cur[k]
    finally:
        free(buf_a)
        free(buf_b)
    return out_np


cdef struct Writer:
    uint8_t *buf
    Py_ssize_t cap
    Py_ssize_t nbytes
    uint64_t acc
    int nacc
    Py_ssize_t nbits


cdef int _grow(Writer *w) nogil:
    cdef Py_ssize_t cap = w.cap * 2 + 64
    cdef uint8_t *nb = <uint8_t *> malloc(cap)
    cdef Py_ssize_t i
    if nb == NULL:
        return -1
    for i in range(w.nbytes):
        nb[i] = w.buf[i]
    free(w.buf)
    w.buf = nb
    w.cap = cap
    return 0


cdef int _write(Writer *w, uint64_t value, int nbits) nogil:
    # nbits <= 64; flush through a 64-bit accumulator in 8-bit steps
    cdef int chunk
    while nbits > 0:
        chunk = nbits if nbits < 32 else 32
        nbits -= chunk
        w.acc = (w.acc << chunk) | ((value >> nbits) & ((<uint64_t> 1 << chunk) - 1))
        w.nacc += chunk
        w.nbits += chunk
        while w.nacc >= 8:
            if w.nbytes >= w.cap:
                if _grow(w) != 0:
                    return -1
            w.nacc -= 8
            w.buf[w.nbytes] = <uint8_t> ((w.acc >> w.nacc) & 0xFF)
            w.nbytes += 1
        w.acc &= ((<uint64_t> 1 << w.nacc) - 1)
    return 0


cdef int _ue(Writer *w, uint64_t v) nogil:
    cdef uint64_t x = v + 1
    cdef int n = 0
    cdef uint64_t t = x
    while t:
        n += 1
        t >>= 1
    if _write(w, 0, n - 1) != 0:
        return -1
    return _write(w, x, n)


cdef int _se(Writer *w, int64_t v) nogil:
    if v > 0:
        return _ue(w, <uint64_t> (2 * v - 1))
    return _ue(w, <uint64_t> (-2 * v))


def encode_symbols(dc, ac):
    cdef const int64_t[::1] dcv = np.ascontiguousarray(dc, dtype=np.int64)
    cdef const int64_t[:, ::1] acv = np.ascontiguousarray(ac, dtype=np.int64).reshape(len(dc), -1)
    cdef Py_ssize_t nblocks = dcv.shape[0]
    cdef Py_ssize_t ncoef = acv.shape[1]
    cdef Writer w
    cdef Py_ssize_t k, i, prev, nnz
    cdef int64_t level
    cdef int err = 0
    w.cap = 64 + nblocks * 4
    w.buf = <uint8_t *> malloc(w.cap)
    w.nbytes = 0
    w.acc = 0
    w.nacc = 0
    w.nbits = 0
    if w.buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for k in range(nblocks):
                err |= _se(&w, dcv[k])
                nnz = 0
                for i in range(ncoef):
                    if acv[k, i] != 0:
                        nnz += 1
                err |= _ue(&w, <uint64_t> nnz)
                prev = -1
                for i in range(ncoef):
                    level = acv[k, i]
                    if level != 0:
                        err |= _ue(&w, <uint64_t> (i - prev - 1))
                        if level < 0:
                            err |= _write(&w, 1, 1)
                            err |= _ue(&w, <uint64_t> (-level - 1))
                        else:
                            err |= _write(&w, 0, 1)
                            err |= _ue(&w, <uint64_t> (level - 1))
                        prev = i
            if w.nacc > 0:
                if w.nbytes >= w.cap:
                    err |= _grow(&w)
                if err == 0:
                    w.buf[w.nbytes] = <uint8_t> ((w.acc << (8 - w.nacc)) & 0xFF)
                    w.nbytes += 1
        if err != 0:
            raise MemoryError()
        return bytes(w.buf[:w.nbytes]), w.nbits
    finally:
        free(w.buf)


cdef struct Reader:
    const uint8_t *buf
    Py_ssize_t pos
    Py_ssize_t nbits


cdef inline int _bit(Reader *r) nogil:
    cdef int b = (r.buf[r.pos >> 3] >> (7 - (r.pos & 7))) & 1
    r.pos += 1
    return b


cdef int _read_ue(Reader *r, uint64_t *out) nogil:
    cdef int zeros = 0
    cdef uint64_t v
    cdef int i
    while True:
        if r.pos >= r.nbits:
            return -1
        if _bit(r):
            break
        zeros += 1
        if zeros > 62:
            return -2
    if r.pos + zeros > r.nbits:
        return -1
    v = 1
    for i in range(zeros):
        v = (v << 1) | <uint64_t> _bit(r)
    out[0] = v - 1
    return 0


def decode_symbols(payload, nbits, nblocks, ncoef):
    cdef bytes data = bytes(payload)
    if nbits > 8 * len(data):
        raise CorruptStream("corrupt stream: bit length exceeds payload", "decode_volume", "codec-prior")
    dc_np = np.zeros(nblocks, dtype=np.int64)
    ac_np = np.zeros((nblocks, ncoef - 1), dtype=np.int64)
    cdef int64_t[::1] dc = dc_np
    cdef int64_t[:, ::1] ac = ac_np
    cdef Reader r
    r.buf = <const uint8_t *> data
    r.pos = 0
    r.nbits = nbits
    cdef Py_ssize_t k, j, nnz, pos
    cdef Py_ssize_t nb = nblocks, nac = ncoef - 1
    cdef uint64_t u
    cdef int err = 0, neg
    with nogil:
        for k in range(nb):
            err = _read_ue(&r, &u)
            if err:
                break
            if u & 1:
                dc[k] = <int64_t> ((u + 1) // 2)
            else:
                dc[k] = -<int64_t> (u // 2)
            err = _read_ue(&r, &u)
            if err:
                break
            nnz = <Py_ssize_t> u
            pos = -1
            for j in range(nnz):
                err = _read_ue(&r, &u)
                if err:
                    break
                pos += <Py_ssize_t> u + 1
                if pos >= nac or pos < 0:
                    err = -3
                    break
                if r.pos >= r.nbits:
                    err = -1
                    break
                neg = _bit(&r)
                err = _read_ue(&r, &u)
                if err:
                    break
                ac[k, pos] = -<int64_t> (u + 1) if neg else <int64_t> (u + 1)
            if err:
                break
    if err == -1:
        raise CorruptStream("corrupt stream: ran out of bits", "decode_volume", "codec-prior")
    if err == -2:
        raise CorruptStream("corrupt stream: oversized code", "decode_volume", "codec-prior")
    if err == -3:
        raise CorruptStream("corrupt stream: coefficient index overflow", "decode_volume", "codec-prior")
    if r.pos != r.nbits:
        raise CorruptStream("corrupt stream: trailing bits", "decode_volume", "codec-prior")
    return dc_np, ac_np
