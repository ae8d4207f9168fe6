"""Simplified block-transform codec used as the prior in hybrid mode.

Every (t, c, z) plane is tiled into B x B blocks (edges padded by
replication), each block goes through an orthonormal 2D DCT-II, and the
coefficients are quantized with step ``q = 2 ** ((QP - 4) / 6)``. DC values
are predicted from the previous block of the same plane in closed loop;
the first block of a plane uses step ``min(1, q)`` so constant integer
volumes survive any QP exactly. Levels are serialized in zig-zag order as
Exp-Golomb symbols (see ``_kernels``).

Stream layout: ``BDC1``, u8 block size, u8 QP, u8 dtype code, packed shape,
u64 payload bit count, payload bits MSB-first.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.fft import dctn, idctn

from . import _kernels
from .errors import CorruptStream, DataError, TruncatedPayload
from .volume import DTYPES, Volume, dtype_code, pack_shape, unpack_shape

_MODULE = "codec-prior"

BDC_MAGIC = b"BDC1"
BLOCK_SIZES = (4, 8, 16)
QP_MAX_8BIT = 51


def qp_max(dtype) -> int:
    """Largest QP equivalent to 51 at 8 bits: six steps per extra bit of depth."""
    dt = np.dtype(dtype)
    bits = 8 * dt.itemsize if dt.kind == "u" else 16
    return QP_MAX_8BIT + 6 * (bits - 8)


def q_step(qp: float) -> float:
    return 2.0 ** ((qp - 4.0) / 6.0)


@dataclass(frozen=True)
class BlockCodecConfig:
    block: int = 8
    qp: int = 30

    def __post_init__(self):
        if self.block not in BLOCK_SIZES:
            raise DataError(f"block size must be one of {BLOCK_SIZES}", "BlockCodecConfig", _MODULE)
        if not (isinstance(self.qp, (int, np.integer)) and 0 <= self.qp <= 255):
            raise DataError(f"QP must be an integer in [0, 255], got {self.qp}", "BlockCodecConfig", _MODULE)


@dataclass(frozen=True)
class Bitstream:
    config: BlockCodecConfig
    dtype: np.dtype
    shape: tuple[int, ...]
    nbits: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != (self.nbits + 7) // 8:
            raise CorruptStream("corrupt stream: bit count does not match payload", "Bitstream", _MODULE)

    def to_bytes(self) -> bytes:
        head = BDC_MAGIC + struct.pack("<BBB", self.config.block, self.config.qp, dtype_code(self.dtype))
        return head + pack_shape(self.shape) + struct.pack("<Q", self.nbits) + self.payload

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["Bitstream", int]:
        """Parse a stream starting at ``offset``; returns it and the end offset."""
        if buf[offset : offset + 4] != BDC_MAGIC:
            raise CorruptStream("corrupt stream: bad codec magic", "decode_volume", _MODULE)
        if offset + 7 > len(buf):
            raise TruncatedPayload("corrupt stream: truncated codec header", "decode_volume", _MODULE)
        block, qp, code = struct.unpack_from("<BBB", buf, offset + 4)
        if code not in DTYPES:
            raise CorruptStream(f"corrupt stream: dtype code {code}", "decode_volume", _MODULE)
        try:
            shape, pos = unpack_shape(buf, offset + 7)
        except DataError as exc:
            raise CorruptStream(f"corrupt stream: {exc}", "decode_volume", _MODULE) from exc
        if pos + 8 > len(buf):
            raise TruncatedPayload("corrupt stream: truncated codec header", "decode_volume", _MODULE)
        (nbits,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        nbytes = (nbits + 7) // 8
        if pos + nbytes > len(buf):
            raise TruncatedPayload("corrupt stream: truncated payload", "decode_volume", _MODULE)
        try:
            cfg = BlockCodecConfig(block, qp)
        except DataError as exc:
            raise CorruptStream(f"corrupt stream: {exc}", "decode_volume", _MODULE) from exc
        return cls(cfg, DTYPES[code], shape, nbits, bytes(buf[pos : pos + nbytes])), pos + nbytes


@lru_cache(maxsize=None)
def zigzag_order(block: int) -> np.ndarray:
    """Flat indices of a B x B block in zig-zag scan order."""
    cells = [(i, j) for i in range(block) for j in range(block)]
    cells.sort(key=lambda ij: (ij[0] + ij[1], ij[0] if (ij[0] + ij[1]) % 2 else -ij[0]))
    return np.array([i * block + j for i, j in cells], dtype=np.intp)


def _grid(shape, block):
    _, _, _, Y, X = shape
    return -(-Y // block), -(-X // block)


def _to_blocks(data5d, block):
    """(planes, blocks_per_plane, B, B) float64 blocks, edges replicated."""
    T, C, Z, Y, X = data5d.shape
    by, bx = _grid(data5d.shape, block)
    planes = np.asarray(data5d, dtype=np.float64).reshape(T * C * Z, Y, X)
    planes = np.pad(planes, ((0, 0), (0, by * block - Y), (0, bx * block - X)), mode="edge")
    blocks = planes.reshape(-1, by, block, bx, block).transpose(0, 1, 3, 2, 4)
    return blocks.reshape(T * C * Z, by * bx, block, block)


def _from_blocks(blocks, shape, block):
    T, C, Z, Y, X = shape
    by, bx = _grid(shape, block)
    n = blocks.shape[0]
    planes = blocks.reshape(n, by, bx, block, block).transpose(0, 1, 3, 2, 4).reshape(n, by * block, bx * block)
    return planes[:, :Y, :X]


def dct2(blocks):
    return dctn(blocks, type=2, axes=(-2, -1), norm="ortho")


def idct2(coefs):
    return idctn(coefs, type=2, axes=(-2, -1), norm="ortho")


def _round(x):
    # symmetric round-half-away-from-zero keeps quantization sign-symmetric
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(coefs, qp: int):
    """Quantization levels of (planes, blocks, B, B) DCT coefficients.

    Returns ``(dc_symbols, ac_levels)`` shaped (planes, blocks) and
    (planes, blocks, B*B - 1) in zig-zag order.
    """
    q = q_step(qp)
    first = min(1.0, q)
    flat = coefs.reshape(coefs.shape[0], coefs.shape[1], -1)[..., zigzag_order(coefs.shape[-1])]
    ac = _round(flat[..., 1:] / q).astype(np.int64)
    dc = flat[..., 0]
    base = _round(dc[:, :1] / first) * first
    idx = _round((dc - base) / q).astype(np.int64)
    idx[:, 0] = 0
    sym = np.diff(idx, axis=1, prepend=0)
    sym[:, 0] = _round(dc[:, 0] / first).astype(np.int64)
    return sym, ac


def dequantize(dc_sym, ac, qp: int, block: int):
    q = q_step(qp)
    first = min(1.0, q)
    base = dc_sym[:, :1] * first
    rest = dc_sym.copy()
    rest[:, 0] = 0
    dc = base + np.cumsum(rest, axis=1) * q
    flat = np.empty(dc_sym.shape + (block * block,))
    flat[..., 0] = dc
    flat[..., 1:] = ac * q
    coefs = np.empty_like(flat)
    coefs[..., zigzag_order(block)] = flat
    return coefs.reshape(dc_sym.shape + (block, block))


def _cast(values, dtype):
    dt = np.dtype(dtype)
    if dt.kind == "u":
        info = np.iinfo(dt)
        return np.clip(np.rint(values), info.min, info.max).astype(dt)
    return values.astype(dt)


def transform(v: Volume, block: int = 8):
    """DCT coefficients of every block, shaped (planes, blocks, B, B)."""
    return dct2(_to_blocks(v.data, block))


def encode_levels(cfg: BlockCodecConfig, dtype, shape, dc_sym, ac) -> Bitstream:
    payload, nbits = _kernels.encode_symbols(dc_sym.reshape(-1), ac.reshape(-1, ac.shape[-1]))
    return Bitstream(cfg, np.dtype(dtype), tuple(shape), int(nbits), payload)


def encode_volume(v: Volume, cfg: BlockCodecConfig = BlockCodecConfig()) -> Bitstream:
    if not isinstance(v, Volume):
        v = Volume(np.asarray(v))
    dc, ac = quantize(transform(v, cfg.block), cfg.qp)
    return encode_levels(cfg, v.dtype, v.shape, dc, ac)


def _symbols(bs: Bitstream):
    T, C, Z, _, _ = bs.shape
    by, bx = _grid(bs.shape, bs.config.block)
    nplanes, per = T * C * Z, by * bx
    ncoef = bs.config.block**2
    dc, ac = _kernels.decode_symbols(bs.payload, bs.nbits, nplanes * per, ncoef)
    return dc.reshape(nplanes, per), ac.reshape(nplanes, per, ncoef - 1)


def plane_index(shape, t: int, c: int, z: int) -> int:
    _, C, Z, _, _ = shape
    return (t * C + c) * Z + z


def decode_planes(bs: Bitstream, planes) -> np.ndarray:
    """Reconstruct only the listed flat plane indices; returns (n, Y, X) float64."""
    dc, ac = _symbols(bs)
    planes = np.asarray(planes, dtype=np.intp)
    coefs = dequantize(dc[planes], ac[planes], bs.config.qp, bs.config.block)
    out = _from_blocks(idct2(coefs), bs.shape, bs.config.block)
    return _cast(out, bs.dtype).astype(np.float64)


def decode_volume(bs: Bitstream) -> Volume:
    if isinstance(bs, (bytes, bytearray, memoryview)):
        bs, end = Bitstream.from_bytes(bytes(bs))
    dc, ac = _symbols(bs)
    coefs = dequantize(dc, ac, bs.config.qp, bs.config.block)
    planes = _from_blocks(idct2(coefs), bs.shape, bs.config.block)
    return Volume(_cast(planes, bs.dtype).reshape(bs.shape))
