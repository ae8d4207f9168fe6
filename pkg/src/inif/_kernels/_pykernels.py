"""Pure-Python/numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation. The forward kernel
accumulates each dot product sequentially over the input features so a
point's value never depends on which other points share its batch.
"""

import numpy as np

from ..errors import CorruptStream


def siren_forward_points(flat, dims, coords):
    """Evaluate a packed sine network at every row of ``coords``.

    ``flat`` holds, per layer, W (row-major), b and the frequency. ``dims``
    lists layer widths ``[in, h1, ..., out]``.
    """
    flat = np.asarray(flat, dtype=np.float64)
    a = np.ascontiguousarray(coords, dtype=np.float64)
    depth = len(dims) - 1
    pos = 0
    for layer in range(depth):
        fan_in, fan_out = int(dims[layer]), int(dims[layer + 1])
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_out, fan_in)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        omega = flat[pos]
        pos += 1
        acc = np.zeros((a.shape[0], fan_out))
        for j in range(fan_in):
            acc += a[:, j : j + 1] * w[:, j]
        z = acc + b
        a = np.sin(omega * z) if layer < depth - 1 else z
    return a


# Exp-Golomb symbol coding. Per block: se(dc), ue(nnz), then per nonzero AC
# coefficient ue(zero run), sign bit, ue(|level| - 1).


class _BitWriter:
    def __init__(self):
        self.out = bytearray()
        self.acc = 0
        self.nacc = 0
        self.nbits = 0

    def write(self, value, nbits):
        self.acc = (self.acc << nbits) | value
        self.nacc += nbits
        self.nbits += nbits
        while self.nacc >= 8:
            self.nacc -= 8
            self.out.append((self.acc >> self.nacc) & 0xFF)
        self.acc &= (1 << self.nacc) - 1

    def ue(self, v):
        v += 1
        n = v.bit_length()
        self.write(v, 2 * n - 1)

    def se(self, v):
        self.ue(2 * v - 1 if v > 0 else -2 * v)

    def finish(self):
        if self.nacc:
            self.out.append((self.acc << (8 - self.nacc)) & 0xFF)
        return bytes(self.out), self.nbits


def encode_symbols(dc, ac):
    dc = np.asarray(dc, dtype=np.int64)
    ac = np.asarray(ac, dtype=np.int64)
    w = _BitWriter()
    for k in range(dc.shape[0]):
        w.se(int(dc[k]))
        row = ac[k]
        nz = np.flatnonzero(row)
        w.ue(len(nz))
        prev = -1
        for i in nz:
            level = int(row[i])
            w.ue(int(i) - prev - 1)
            w.write(1 if level < 0 else 0, 1)
            w.ue(abs(level) - 1)
            prev = int(i)
    return w.finish()


class _BitReader:
    def __init__(self, payload, nbits):
        if nbits > 8 * len(payload):
            raise CorruptStream("corrupt stream: bit length exceeds payload", "decode_volume", "codec-prior")
        self.bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[:nbits].tobytes()
        self.pos = 0
        self.nbits = nbits

    def _fail(self):
        raise CorruptStream("corrupt stream: ran out of bits", "decode_volume", "codec-prior")

    def bit(self):
        if self.pos >= self.nbits:
            self._fail()
        b = self.bits[self.pos]
        self.pos += 1
        return b

    def ue(self):
        start = self.pos
        end = self.bits.find(b"\x01", start)
        if end < 0 or end >= self.nbits:
            self._fail()
        zeros = end - start
        if zeros > 62:
            raise CorruptStream("corrupt stream: oversized code", "decode_volume", "codec-prior")
        stop = end + zeros + 1
        if stop > self.nbits:
            self._fail()
        v = 0
        for b in self.bits[end:stop]:
            v = (v << 1) | b
        self.pos = stop
        return v - 1

    def se(self):
        u = self.ue()
        return (u + 1) // 2 if u & 1 else -(u // 2)


def decode_symbols(payload, nbits, nblocks, ncoef):
    r = _BitReader(bytes(payload), int(nbits))
    dc = np.zeros(nblocks, dtype=np.int64)
    ac = np.zeros((nblocks, ncoef - 1), dtype=np.int64)
    for k in range(nblocks):
        dc[k] = r.se()
        nnz = r.ue()
        pos = -1
        for _ in range(nnz):
            pos += r.ue() + 1
            if pos >= ncoef - 1:
                raise CorruptStream("corrupt stream: coefficient index overflow", "decode_volume", "codec-prior")
            negative = r.bit()
            level = r.ue() + 1
            ac[k, pos] = -level if negative else level
    if r.pos != r.nbits:
        raise CorruptStream("corrupt stream: trailing bits", "decode_volume", "codec-prior")
    return dc, ac
