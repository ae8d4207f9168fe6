"""INIF container: header, weight payload, optional codec prior, and decoding.

Layout (little-endian)::

    "INIF" u8 version u8 flags u8 dtype
    u8 axis-count, u32 axis lengths (leading singleton axes dropped)
    per channel: f32 y_min, f32 y_max
    u8 depth, u32 hidden, u8 in_dim, u8 out_dim, f32 omega0 per layer
    u32 optimizer id, u32 T, u64 seed
    u32 prior length + codec stream
    f32 residual min, f32 residual max       (only with a prior)
    u32 comment length + UTF-8 comment
    weights: per layer W row-major, b, omega; f32

Decoding evaluates the network point by point (see ``_kernels``), so any
region of interest reproduces the matching voxels of a full decode exactly.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .codec import Bitstream, decode_planes, plane_index
from .errors import (
    BadMagic,
    DataError,
    FormatError,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedVersion,
)
from .siren import SirenArchitecture, SirenParams, param_count
from .volume import (
    CHANNEL_AXIS,
    DTYPES,
    INTENSITY_SCALE,
    NormalizationParams,
    RoiSpec,
    Volume,
    as_5d_shape,
    coord_axes,
    coords_of_indices,
    dtype_code,
    pack_shape,
    unpack_shape,
)

_MODULE = "inif-format"

INIF_MAGIC = b"INIF"
VERSION = 1
FLAG_PRIOR = 0x01
OPTIMIZER_NAMES = {0: "adam", 1: "learned"}
# normalized intensity is coded as u16 when the prior has to carry float data
PROXY_SCALE = 65535.0 / INTENSITY_SCALE


def _f32(x) -> float:
    return float(np.float32(x))


@dataclass(frozen=True)
class InifHeader:
    shape: tuple[int, ...]
    dtype: np.dtype
    y_min: tuple[float, ...]
    y_max: tuple[float, ...]
    arch: SirenArchitecture
    optimizer_id: int = 0
    steps: int = 0
    seed: int = 0
    prior: bytes = b""
    residual_range: tuple[float, float] | None = None
    comment: str = ""
    version: int = VERSION

    def __post_init__(self):
        object.__setattr__(self, "shape", as_5d_shape(self.shape))
        object.__setattr__(self, "dtype", np.dtype(self.dtype).newbyteorder("="))
        object.__setattr__(self, "y_min", tuple(_f32(v) for v in self.y_min))
        object.__setattr__(self, "y_max", tuple(_f32(v) for v in self.y_max))
        if self.residual_range is not None:
            object.__setattr__(self, "residual_range", tuple(_f32(v) for v in self.residual_range))
        self.check()

    @property
    def channels(self) -> int:
        return self.shape[CHANNEL_AXIS]

    @property
    def has_prior(self) -> bool:
        return bool(self.prior)

    @property
    def fold_channels(self) -> bool:
        return self.channels > 1 and self.arch.out_dim == self.channels

    @property
    def axes(self) -> tuple[int, ...]:
        return coord_axes(self.shape, self.fold_channels)

    @property
    def normalization(self) -> NormalizationParams:
        return NormalizationParams(self.y_min, self.y_max, self.dtype)

    @property
    def optimizer(self) -> str:
        return OPTIMIZER_NAMES.get(self.optimizer_id, f"id{self.optimizer_id}")

    def check(self):
        op = "serialize"
        if len(self.y_min) != self.channels or len(self.y_max) != self.channels:
            raise FormatError("need one (y_min, y_max) pair per channel", op, _MODULE)
        if any(lo > hi for lo, hi in zip(self.y_min, self.y_max)):
            raise FormatError("y_min exceeds y_max", op, _MODULE)
        if self.arch.in_dim != len(self.axes):
            raise FormatError(
                f"network takes {self.arch.in_dim} coordinates, shape {self.shape} provides {len(self.axes)}",
                op,
                _MODULE,
            )
        if self.arch.out_dim not in (1, self.channels):
            raise FormatError(f"out_dim {self.arch.out_dim} fits neither 1 nor {self.channels} channels", op, _MODULE)
        if self.has_prior != (self.residual_range is not None):
            raise FormatError("residual range must be present exactly when a prior is", op, _MODULE)
        if self.arch.depth > 255 or self.arch.in_dim > 255 or self.arch.out_dim > 255:
            raise FormatError("architecture does not fit the header fields", op, _MODULE)

    def to_bytes(self) -> bytes:
        a = self.arch
        parts = [
            INIF_MAGIC,
            struct.pack("<BBB", self.version, FLAG_PRIOR if self.has_prior else 0, dtype_code(self.dtype)),
            pack_shape(self.shape),
            b"".join(struct.pack("<ff", lo, hi) for lo, hi in zip(self.y_min, self.y_max)),
            struct.pack("<BIBB", a.depth, a.hidden, a.in_dim, a.out_dim),
            struct.pack(f"<{a.depth}f", *a.omega0),
            struct.pack("<IIQ", self.optimizer_id, self.steps, self.seed),
            struct.pack("<I", len(self.prior)),
            self.prior,
        ]
        if self.has_prior:
            parts.append(struct.pack("<ff", *self.residual_range))
        raw = self.comment.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
        return b"".join(parts)


def header_size(shape, channels: int, depth: int, prior_bytes: int = 0, comment: str = "", prior: bool = None) -> int:
    """Exact header byte count for the given layout parameters."""
    axes = (len(pack_shape(shape)) - 1) // 4
    has_prior = prior_bytes > 0 if prior is None else prior
    return 39 + 4 * axes + 8 * channels + 4 * depth + prior_bytes + (8 if has_prior else 0) + len(
        comment.encode("utf-8")
    )


@dataclass
class InifFile:
    header: InifHeader
    params: SirenParams

    def __post_init__(self):
        if self.params.arch != self.header.arch:
            raise FormatError("parameters do not match the header architecture", "serialize", _MODULE)

    def to_bytes(self) -> bytes:
        return serialize(self.params, self.header)

    @property
    def nbytes(self) -> int:
        return len(self.to_bytes())

    @property
    def bitstream(self) -> Bitstream | None:
        if not self.header.has_prior:
            return None
        return Bitstream.from_bytes(self.header.prior)[0]

    def save(self, path) -> int:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)


def serialize(params: SirenParams, header: InifHeader) -> bytes:
    if params.arch != header.arch:
        raise FormatError("parameters do not match the header architecture", "serialize", _MODULE)
    flat = params.flat(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError("non-finite weights", "serialize", _MODULE)
    payload = flat.astype("<f4").tobytes()
    assert len(payload) == 4 * param_count(params.arch)
    return header.to_bytes() + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        n = struct.calcsize(fmt)
        if self.pos + n > len(self.buf):
            raise TruncatedPayload("truncated header", "deserialize", _MODULE)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += n
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload("truncated header", "deserialize", _MODULE)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def deserialize(buf: bytes) -> InifFile:
    buf = bytes(buf)
    op = "deserialize"
    if buf[:4] != INIF_MAGIC:
        raise BadMagic("bad magic: not an INIF file", op, _MODULE)
    r = _Reader(buf)
    r.pos = 4
    version, flags, code = r.take("<BBB")
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}", op, _MODULE)
    if flags & ~FLAG_PRIOR:
        raise FormatError(f"unknown flag bits 0x{flags:02x}", op, _MODULE)
    if code not in DTYPES:
        raise UnsupportedDtype(f"unsupported dtype code {code}", op, _MODULE)
    try:
        shape, r.pos = unpack_shape(buf, r.pos)
    except TruncatedPayload as exc:
        raise TruncatedPayload("truncated header", op, _MODULE) from exc
    except DataError as exc:
        raise FormatError(f"bad shape: {exc}", op, _MODULE) from exc
    channels = shape[CHANNEL_AXIS]
    pairs = r.take(f"<{2 * channels}f")
    depth, hidden, in_dim, out_dim = r.take("<BIBB")
    if depth < 2 or hidden < 1 or in_dim < 1 or out_dim < 1:
        raise FormatError("invalid architecture fields", op, _MODULE)
    omegas = r.take(f"<{depth}f")
    opt_id, steps, seed = r.take("<IIQ")
    (plen,) = r.take("<I")
    prior = r.raw(plen)
    has_prior = bool(flags & FLAG_PRIOR)
    if has_prior != (plen > 0):
        raise FormatError("prior flag disagrees with prior length", op, _MODULE)
    residual = r.take("<ff") if has_prior else None
    if has_prior:
        try:
            bs, end = Bitstream.from_bytes(prior)
        except DataError as exc:
            raise FormatError(f"embedded prior: {exc}", op, _MODULE) from exc
        if end != len(prior) or bs.shape != shape:
            raise FormatError("embedded prior does not match the volume", op, _MODULE)
    (clen,) = r.take("<I")
    try:
        comment = r.raw(clen).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("comment is not UTF-8", op, _MODULE) from exc
    try:
        arch = SirenArchitecture(in_dim, out_dim, hidden, depth, tuple(omegas))
        header = InifHeader(
            shape, DTYPES[code], pairs[0::2], pairs[1::2], arch, opt_id, steps, seed, prior, residual, comment
        )
    except DataError as exc:
        raise FormatError(f"inconsistent header: {exc}", op, _MODULE) from exc
    n = param_count(arch)
    payload = buf[r.pos :]
    if len(payload) < 4 * n:
        raise TruncatedPayload(
            f"truncated payload: expected {4 * n} weight bytes, found {len(payload)}", op, _MODULE
        )
    if len(payload) > 4 * n:
        raise FormatError(f"{len(payload) - 4 * n} trailing bytes after weights", op, _MODULE)
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError("non-finite weights", op, _MODULE)
    return InifFile(header, SirenParams.from_flat(arch, flat))


def load_inif(path) -> InifFile:
    return deserialize(Path(path).read_bytes())


# ---------------------------------------------------------------- evaluation


def evaluate(params: SirenParams, coords, workers: int = 1, shard: int = 1 << 15) -> np.ndarray:
    """Per-point network evaluation; independent of batching and sharding."""
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != params.arch.in_dim:
        raise DataError("coordinate arity does not match the network", "evaluate", _MODULE)
    flat = params.flat(np.float64)
    dims = np.asarray(params.arch.dims, dtype=np.int_)
    n = coords.shape[0]
    if workers <= 1 or n <= shard:
        return _kernels.siren_forward_points(flat, dims, coords)
    bounds = list(range(0, n, shard)) + [n]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(
            pool.map(lambda ab: _kernels.siren_forward_points(flat, dims, coords[ab[0] : ab[1]]), zip(bounds, bounds[1:]))
        )
    return np.concatenate(parts, axis=0)


def residual_to_target(r, rmin: float, rmax: float):
    """Map residuals in [rmin, rmax] onto the network's [-50, 50] range."""
    span = rmax - rmin
    if span <= 0:
        return np.zeros_like(np.asarray(r, dtype=np.float64))
    return (np.asarray(r, dtype=np.float64) - rmin) * (INTENSITY_SCALE / span) - INTENSITY_SCALE / 2


def target_to_residual(s, rmin: float, rmax: float):
    span = rmax - rmin
    s = np.asarray(s, dtype=np.float64)
    if span <= 0:
        return np.full_like(s, rmin)
    return (s + INTENSITY_SCALE / 2) * (span / INTENSITY_SCALE) + rmin


def prior_normalized(header: InifHeader, bs: Bitstream, planes) -> np.ndarray:
    """Codec reconstruction of the listed planes in normalized intensity space."""
    vals = decode_planes(bs, planes)
    if np.dtype(bs.dtype) != header.dtype:
        return vals / PROXY_SCALE
    lo, hi = header.normalization.arrays()
    C = header.channels
    ch = (np.asarray(planes) // header.shape[2]) % C
    lo_c, hi_c = lo[ch][:, None, None], hi[ch][:, None, None]
    span = hi_c - lo_c
    scale = np.where(span > 0, INTENSITY_SCALE / np.where(span > 0, span, 1.0), 0.0)
    return (vals - lo_c) * scale


def normalized_at(file: InifFile, index: np.ndarray, workers: int = 1) -> np.ndarray:
    """Unclamped normalized reconstruction at an (N, 5) index array."""
    h = file.header
    index = np.asarray(index, dtype=np.int64).reshape(-1, 5)
    if len(index) == 0:
        return np.zeros(0)
    if h.fold_channels:
        spatial = index.copy()
        spatial[:, CHANNEL_AXIS] = 0
        uniq, inverse = np.unique(spatial, axis=0, return_inverse=True)
        out = evaluate(file.params, coords_of_indices(uniq, h.shape, h.axes), workers)
        vals = out[inverse.reshape(-1), index[:, CHANNEL_AXIS]]
    else:
        vals = evaluate(file.params, coords_of_indices(index, h.shape, h.axes), workers)[:, 0]
    if h.has_prior:
        rmin, rmax = h.residual_range
        vals = target_to_residual(vals, rmin, rmax)
        planes = plane_index(h.shape, index[:, 0], index[:, 1], index[:, 2])
        uniq_planes, inv = np.unique(planes, return_inverse=True)
        base = prior_normalized(h, file.bitstream, uniq_planes)
        vals = vals + base[inv.reshape(-1), index[:, 3], index[:, 4]]
    return vals


def _denormalize(vals, header: InifHeader, channels) -> np.ndarray:
    n = np.clip(vals, 0.0, INTENSITY_SCALE)
    lo, hi = header.normalization.arrays()
    lo_c, hi_c = lo[channels], hi[channels]
    y = np.clip(lo_c + n * ((hi_c - lo_c) / INTENSITY_SCALE), lo_c, hi_c)
    if header.dtype.kind == "u":
        y = np.rint(y)
    return y.astype(header.dtype)


def decode_indices(file: InifFile, index, workers: int = 1) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64).reshape(-1, 5)
    if len(index) and (np.any(index < 0) or np.any(index >= np.asarray(file.header.shape))):
        raise DataError("ROI out of bounds", "decode", _MODULE)
    return _denormalize(normalized_at(file, index, workers), file.header, index[:, CHANNEL_AXIS])


def decode(file: InifFile, roi: RoiSpec | None = None, workers: int = 1) -> Volume:
    """Decode a box ROI (full volume by default) into a Volume fragment."""
    roi = RoiSpec.full() if roi is None else roi
    if roi.kind != "box":
        raise DataError("decode takes a box ROI; use decode_mask for masks", "decode", _MODULE)
    try:
        _, out_shape = roi.resolved(file.header.shape)
    except DataError as exc:
        raise DataError(f"ROI out of bounds: {exc}", "decode", _MODULE) from exc
    index = roi.index_array(file.header.shape)
    return Volume(decode_indices(file, index, workers).reshape(out_shape))


def decode_mask(file: InifFile, mask, workers: int = 1):
    """Values at the true positions of ``mask`` (row-major) and their indices."""
    m = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    m = m.reshape(as_5d_shape(m.shape)) if m.ndim != 5 else m
    if m.shape != file.header.shape:
        raise DataError(f"mask shape {m.shape} does not match stored shape {file.header.shape}", "decode_mask", _MODULE)
    index = np.argwhere(m.astype(bool))
    return decode_indices(file, index, workers), index


def compression_ratio(file_or_bytes, raw_bytes: int) -> float:
    """Raw bytes over stored bytes; accepts an InifFile, a byte count or a list of them."""
    if isinstance(file_or_bytes, (list, tuple)):
        stored = sum(_stored(x) for x in file_or_bytes)
    else:
        stored = _stored(file_or_bytes)
    return raw_bytes / stored


def _stored(x) -> int:
    if isinstance(x, InifFile):
        return x.nbytes
    if isinstance(x, (bytes, bytearray)):
        return len(x)
    if isinstance(x, (str, Path)):
        return Path(x).stat().st_size
    return int(x)


# ---------------------------------------------------------------- chunk manifest


@dataclass(frozen=True)
class ManifestEntry:
    part: str
    z0: int
    z1: int


@dataclass(frozen=True)
class Manifest:
    raw_bytes: int
    ratio: float
    entries: tuple[ManifestEntry, ...]

    def to_text(self) -> str:
        lines = [f"raw_bytes={self.raw_bytes}", f"ratio={self.ratio!r}"]
        lines += [f"part={e.part} z0={e.z0} z1={e.z1}" for e in self.entries]
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        return self.to_text().encode("utf-8")

    def owner(self, z: int) -> ManifestEntry:
        for e in self.entries:
            if e.z0 <= z < e.z1:
                return e
        raise DataError(f"slice {z} is not covered by the manifest", "decode", _MODULE)

    @classmethod
    def parse(cls, text: str) -> "Manifest":
        raw_bytes = ratio = None
        entries = []
        try:
            for line in text.splitlines():
                if not line.strip():
                    continue
                if line.startswith("raw_bytes="):
                    raw_bytes = int(line.split("=", 1)[1])
                elif line.startswith("ratio="):
                    ratio = float(line.split("=", 1)[1])
                elif line.startswith("part="):
                    fields = dict(tok.split("=", 1) for tok in line.split())
                    entries.append(ManifestEntry(fields["part"], int(fields["z0"]), int(fields["z1"])))
                else:
                    raise ValueError(line)
        except (ValueError, KeyError) as exc:
            raise FormatError(f"bad manifest line: {exc}", "read_manifest", _MODULE) from exc
        if raw_bytes is None or ratio is None or not entries:
            raise FormatError("manifest lacks raw_bytes, ratio or parts", "read_manifest", _MODULE)
        z = 0
        for e in entries:
            if e.z0 != z or e.z1 <= e.z0:
                raise FormatError("manifest parts do not tile the z axis", "read_manifest", _MODULE)
            z = e.z1
        return cls(raw_bytes, ratio, tuple(entries))


def is_manifest(path) -> bool:
    try:
        with open(path, "rb") as fh:
            return fh.read(10) == b"raw_bytes="
    except OSError:
        return False


def read_manifest(path) -> Manifest:
    return Manifest.parse(Path(path).read_text(encoding="utf-8"))


@dataclass
class ChunkedFile:
    manifest: Manifest
    parts: list[InifFile]

    @property
    def nbytes(self) -> int:
        return len(self.manifest.to_bytes()) + sum(p.nbytes for p in self.parts)

    @property
    def shape(self) -> tuple[int, ...]:
        s = list(self.parts[0].header.shape)
        s[2] = self.manifest.entries[-1].z1
        return tuple(s)

    def save(self, manifest_path) -> list[Path]:
        manifest_path = Path(manifest_path)
        written = []
        for e, p in zip(self.manifest.entries, self.parts):
            target = manifest_path.parent / e.part
            p.save(target)
            written.append(target)
        manifest_path.write_bytes(self.manifest.to_bytes())
        return written + [manifest_path]

    @classmethod
    def load(cls, manifest_path) -> "ChunkedFile":
        manifest_path = Path(manifest_path)
        m = read_manifest(manifest_path)
        return cls(m, [load_inif(manifest_path.parent / e.part) for e in m.entries])


def decode_chunked(chunked: ChunkedFile, roi: RoiSpec | None = None, workers: int = 1) -> Volume:
    """Decode a box ROI across parts; each voxel comes from its owning part."""
    roi = RoiSpec.full() if roi is None else roi
    shape = chunked.shape
    ranges, out_shape = roi.resolved(shape)
    zs = list(ranges[2])
    pieces = []
    for e, part in zip(chunked.manifest.entries, chunked.parts):
        local = [z - e.z0 for z in zs if e.z0 <= z < e.z1]
        if not local:
            continue
        sub = list(roi.ranges)
        sub[2] = (local[0], local[-1] + 1)
        strides = list(roi.strides)
        pieces.append(decode(part, RoiSpec.box(sub, strides), workers).data)
    return Volume(np.concatenate(pieces, axis=2).reshape(out_shape))


def decode_mask_chunked(chunked: ChunkedFile, mask, workers: int = 1):
    """Masked decode across parts; values stay in global row-major order."""
    m = mask.data if isinstance(mask, Volume) else np.asarray(mask)
    m = m.reshape(as_5d_shape(m.shape)) if m.ndim != 5 else m
    if m.shape != chunked.shape:
        raise DataError(f"mask shape {m.shape} does not match stored shape {chunked.shape}", "decode_mask", _MODULE)
    index = np.argwhere(m.astype(bool))
    values = np.empty(len(index), dtype=chunked.parts[0].header.dtype)
    for e, part in zip(chunked.manifest.entries, chunked.parts):
        sel = (index[:, 2] >= e.z0) & (index[:, 2] < e.z1)
        if sel.any():
            local = index[sel].copy()
            local[:, 2] -= e.z0
            values[sel] = decode_indices(part, local, workers)
    return values, index
