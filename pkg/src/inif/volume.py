"""N-dimensional volumes: container, NDV I/O, normalization, coordinates, phantoms.

Volumes are always held as 5-D arrays ordered ``(T, C, Z, Y, X)``; absent
axes have length 1. Coordinates are generated only for axes longer than one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagic, DataError, TruncatedPayload, UnsupportedDtype

AXES = "TCZYX"
CHANNEL_AXIS = 1
Z_AXIS = 2

DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}
DTYPE_NAMES = {"u8": 0, "u16": 1, "f32": 2}

NDV_MAGIC = b"NDV1"

_MODULE = "volume-core"


def dtype_code(dtype) -> int:
    dt = np.dtype(dtype).newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise UnsupportedDtype(f"unsupported dtype {np.dtype(dtype)}", "dtype", _MODULE)
    return DTYPE_CODES[dt]


def dtype_peak(dtype) -> float:
    """Largest representable intensity used as the PSNR peak and phantom max."""
    dt = np.dtype(dtype)
    if dt.kind == "u":
        return float(np.iinfo(dt).max)
    return 1.0


def dtype_quantum(dtype) -> float:
    dt = np.dtype(dtype)
    if dt.kind == "u":
        return 1.0
    return float(np.finfo(dt).eps)


def as_5d_shape(shape: Sequence[int]) -> tuple[int, ...]:
    """Left-pad ``shape`` with ones up to five axes (trailing-axis convention)."""
    shape = tuple(int(s) for s in shape)
    if not 1 <= len(shape) <= 5:
        raise DataError(f"expected 1 to 5 axes, got {len(shape)}", "shape", _MODULE)
    if any(s < 1 for s in shape):
        raise DataError(f"axis lengths must be >= 1, got {shape}", "shape", _MODULE)
    return (1,) * (5 - len(shape)) + shape


def pack_shape(shape: Sequence[int]) -> bytes:
    """Axis count byte plus u32 lengths, leading singleton axes dropped."""
    shape = as_5d_shape(shape)
    first = next((i for i, s in enumerate(shape) if s > 1), 4)
    present = shape[first:]
    return struct.pack("<B", len(present)) + struct.pack(f"<{len(present)}I", *present)


def unpack_shape(buf: bytes, offset: int) -> tuple[tuple[int, ...], int]:
    if offset + 1 > len(buf):
        raise TruncatedPayload("missing axis count", "unpack_shape", _MODULE)
    (count,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    if not 1 <= count <= 5:
        raise DataError(f"axis count {count} outside 1..5", "unpack_shape", _MODULE)
    if offset + 4 * count > len(buf):
        raise TruncatedPayload("missing axis lengths", "unpack_shape", _MODULE)
    lengths = struct.unpack_from(f"<{count}I", buf, offset)
    offset += 4 * count
    if any(n < 1 for n in lengths):
        raise DataError(f"zero axis length in {lengths}", "unpack_shape", _MODULE)
    return as_5d_shape(lengths), offset


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 5-D intensity volume with per-channel intensity range.

    ``intensity_min``/``intensity_max`` default to the per-channel data range.
    """

    data: np.ndarray
    intensity_min: np.ndarray | None = None
    intensity_max: np.ndarray | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 5:
            data = data.reshape(as_5d_shape(data.shape))
        if data.size == 0:
            raise DataError("empty volume", "Volume", _MODULE)
        dtype_code(data.dtype)
        data = np.ascontiguousarray(data, dtype=data.dtype.newbyteorder("="))
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise DataError("non-finite voxel values", "Volume", _MODULE)
        data.setflags(write=False)
        per_channel = np.moveaxis(data, CHANNEL_AXIS, 0).reshape(data.shape[1], -1)
        lo = per_channel.min(axis=1).astype(np.float64)
        hi = per_channel.max(axis=1).astype(np.float64)
        if self.intensity_min is not None:
            lo_given = np.broadcast_to(np.asarray(self.intensity_min, np.float64), lo.shape)
            if np.any(lo_given > lo):
                raise DataError("intensity_min exceeds stored values", "Volume", _MODULE)
            lo = lo_given.copy()
        if self.intensity_max is not None:
            hi_given = np.broadcast_to(np.asarray(self.intensity_max, np.float64), hi.shape)
            if np.any(hi_given < hi):
                raise DataError("intensity_max below stored values", "Volume", _MODULE)
            hi = hi_given.copy()
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "intensity_min", lo)
        object.__setattr__(self, "intensity_max", hi)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def nbytes(self) -> int:
        return int(self.data.nbytes)

    @property
    def channels(self) -> int:
        return self.data.shape[CHANNEL_AXIS]

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dtype == other.dtype
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
        )

    def crop_z(self, z0: int, z1: int) -> "Volume":
        return Volume(self.data[:, :, z0:z1])


# ---------------------------------------------------------------- NDV I/O


def ndv_bytes(v: Volume) -> bytes:
    header = NDV_MAGIC + struct.pack("<BBB", dtype_code(v.dtype), 0, 0) + pack_shape(v.shape)
    return header + v.data.astype(v.dtype.newbyteorder("<"), copy=False).tobytes()


def parse_ndv(buf: bytes) -> Volume:
    if len(buf) < 8 or buf[:4] != NDV_MAGIC:
        raise BadMagic("bad magic: not an NDV1 file", "load_ndv", _MODULE)
    code = buf[4]
    if code not in DTYPES:
        raise UnsupportedDtype(f"unsupported dtype code {code}", "load_ndv", _MODULE)
    shape, offset = unpack_shape(buf, 7)
    dtype = DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = buf[offset:]
    if len(payload) < expected:
        raise TruncatedPayload(
            f"truncated payload: expected {expected} bytes, found {len(payload)}",
            "load_ndv",
            _MODULE,
        )
    if len(payload) > expected:
        raise DataError(
            f"payload has {len(payload) - expected} trailing bytes", "load_ndv", _MODULE
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return Volume(data.astype(dtype.newbyteorder("=")))


def load_ndv(path) -> Volume:
    return parse_ndv(Path(path).read_bytes())


def save_ndv(v: Volume, path) -> None:
    Path(path).write_bytes(ndv_bytes(v))


def meta_path(path) -> Path:
    return Path(path).with_suffix(".ndvmeta")


def read_ndvmeta(path) -> dict[str, str] | None:
    """Read the optional ``key=value`` sidecar next to an NDV file."""
    p = meta_path(path)
    if not p.exists():
        return None
    meta = {}
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip() or "=" not in line:
            continue
        key, value = line.split("=", 1)
        meta[key.strip()] = value.strip()
    return meta


def write_ndvmeta(path, meta: dict[str, str]) -> None:
    text = "".join(f"{k}={v}\n" for k, v in meta.items())
    meta_path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- normalization

INTENSITY_SCALE = 100.0


@dataclass(frozen=True)
class NormalizationParams:
    y_min: tuple[float, ...]
    y_max: tuple[float, ...]
    dtype: np.dtype = field(default=np.dtype("<u2"))

    @classmethod
    def of(cls, v: Volume) -> "NormalizationParams":
        return cls(tuple(v.intensity_min.tolist()), tuple(v.intensity_max.tolist()), v.dtype)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.y_min, np.float64), np.asarray(self.y_max, np.float64)


# broadcast shape for per-channel parameters against a 5-D array
_PER_CHANNEL = (1, -1, 1, 1, 1)


def normalize_intensity(v: Volume) -> tuple[np.ndarray, NormalizationParams]:
    """Map each channel linearly so its min goes to 0 and its max to 100.

    A channel with a degenerate range maps to the constant 0.
    """
    params = NormalizationParams.of(v)
    lo, hi = params.arrays()
    span = hi - lo
    scale = np.where(span > 0, INTENSITY_SCALE / np.where(span > 0, span, 1.0), 0.0)
    out = (v.data.astype(np.float64) - lo.reshape(_PER_CHANNEL)) * scale.reshape(
        _PER_CHANNEL
    )
    return out, params


def denormalize_intensity(n, params: NormalizationParams, channel: int | np.ndarray = 0):
    """Inverse of :func:`normalize_intensity` for scalars or arrays.

    ``channel`` selects the per-channel range; it broadcasts against ``n``.
    Results are clamped to the channel range and rounded for integer dtypes.
    """
    lo, hi = params.arrays()
    lo_c = lo[channel]
    hi_c = hi[channel]
    y = lo_c + np.asarray(n, np.float64) * ((hi_c - lo_c) / INTENSITY_SCALE)
    y = np.clip(y, lo_c, hi_c)
    dt = np.dtype(params.dtype)
    if dt.kind == "u":
        y = np.rint(y)
    return y.astype(dt.newbyteorder("=")) if np.ndim(y) else dt.type(y)


def denormalize_volume(n: np.ndarray, params: NormalizationParams) -> np.ndarray:
    """Denormalize a 5-D array whose channel axis matches ``params``."""
    channel = np.arange(n.shape[CHANNEL_AXIS]).reshape(_PER_CHANNEL)
    return denormalize_intensity(n, params, channel)


# ---------------------------------------------------------------- coordinates


def coord_axes(shape: Sequence[int], fold_channels: bool = False) -> tuple[int, ...]:
    """Axes that contribute a coordinate component.

    Axes of length one never do; the channel axis is skipped when channels are
    folded into the network output. A single-voxel volume keeps the X axis so
    the network still has one input.
    """
    shape = as_5d_shape(shape)
    axes = tuple(
        i for i, n in enumerate(shape) if n > 1 and not (fold_channels and i == CHANNEL_AXIS)
    )
    return axes or (4,)


def axis_coordinates(length: int) -> np.ndarray:
    """Normalized positions of every index along an axis of ``length``."""
    if length == 1:
        return np.zeros(1)
    i = np.arange(length, dtype=np.float64)
    c = 2.0 * i / (length - 1) - 1.0
    c[0], c[-1] = -1.0, 1.0
    return c


def coord_of_index(idx: Sequence[int], shape: Sequence[int], axes: Sequence[int] | None = None):
    shape = as_5d_shape(shape)
    idx = tuple(int(i) for i in idx)
    if len(idx) != 5:
        idx = (0,) * (5 - len(idx)) + idx
    for i, n in zip(idx, shape):
        if not 0 <= i < n:
            raise DataError(f"index {idx} out of range for shape {shape}", "coord_of_index", _MODULE)
    if axes is None:
        axes = coord_axes(shape)
    return np.array([axis_coordinates(shape[a])[idx[a]] for a in axes])


@dataclass(frozen=True)
class RoiSpec:
    """Region of interest: a strided box, an explicit index list, or a mask.

    Box ranges are half-open ``(lo, hi)`` pairs per TCZYX axis; ``None`` means
    the full axis.
    """

    ranges: tuple[tuple[int, int] | None, ...] | None = None
    strides: tuple[int, ...] | None = None
    indices: np.ndarray | None = None
    mask: np.ndarray | None = None

    @classmethod
    def full(cls) -> "RoiSpec":
        return cls(ranges=(None,) * 5, strides=(1,) * 5)

    @classmethod
    def box(cls, ranges=None, strides=None) -> "RoiSpec":
        ranges = tuple(ranges) if ranges is not None else (None,) * 5
        strides = tuple(int(s) for s in strides) if strides is not None else (1,) * 5
        if len(ranges) != 5 or len(strides) != 5:
            raise DataError("box ROI needs 5 ranges and 5 strides", "RoiSpec", _MODULE)
        return cls(ranges=ranges, strides=strides)

    @classmethod
    def from_indices(cls, indices) -> "RoiSpec":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != 5:
            raise DataError("index ROI must be an (N, 5) array", "RoiSpec", _MODULE)
        return cls(indices=idx)

    @classmethod
    def from_mask(cls, mask) -> "RoiSpec":
        return cls(mask=np.asarray(mask).astype(bool))

    @property
    def kind(self) -> str:
        if self.mask is not None:
            return "mask"
        if self.indices is not None:
            return "indices"
        return "box"

    def resolved(self, shape: Sequence[int]) -> tuple[list[range], tuple[int, ...]]:
        """Validate a box ROI against ``shape``; return per-axis ranges and output shape."""
        shape = as_5d_shape(shape)
        axes = []
        for n, r, s in zip(shape, self.ranges, self.strides):
            lo, hi = (0, n) if r is None else (int(r[0]), int(r[1]))
            if not 0 <= lo < hi <= n:
                raise DataError(f"ROI range [{lo}, {hi}) invalid for axis length {n}", "coords_of_roi", _MODULE)
            if s < 1:
                raise DataError(f"stride {s} must be >= 1", "coords_of_roi", _MODULE)
            axes.append(range(lo, hi, s))
        return axes, tuple(len(a) for a in axes)

    def index_array(self, shape: Sequence[int]) -> np.ndarray:
        """All selected voxel indices, row-major, as an (N, 5) array."""
        shape = as_5d_shape(shape)
        if self.kind == "mask":
            mask = self.mask.reshape(as_5d_shape(self.mask.shape)) if self.mask.ndim != 5 else self.mask
            if mask.shape != shape:
                raise DataError(
                    f"mask shape {mask.shape} does not match volume shape {shape}",
                    "coords_of_roi",
                    _MODULE,
                )
            return np.argwhere(mask)
        if self.kind == "indices":
            idx = self.indices
            if np.any(idx < 0) or np.any(idx >= np.asarray(shape)):
                raise DataError("index ROI out of bounds", "coords_of_roi", _MODULE)
            return idx
        axes, _ = self.resolved(shape)
        grids = np.meshgrid(*[np.asarray(a) for a in axes], indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)


def coords_of_indices(index: np.ndarray, shape: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    shape = as_5d_shape(shape)
    cols = [axis_coordinates(shape[a])[index[:, a]] for a in axes]
    return np.stack(cols, axis=1) if cols else np.zeros((len(index), 0))


def coords_of_roi(roi: RoiSpec, shape: Sequence[int], axes: Sequence[int] | None = None):
    """Coordinates of every ROI voxel in row-major order plus the voxel index map.

    Row ``k`` of the returned coordinates belongs to voxel ``index_map[k]``,
    which is also output position ``k`` of the flattened fragment.
    """
    shape = as_5d_shape(shape)
    if axes is None:
        axes = coord_axes(shape)
    index_map = roi.index_array(shape)
    return coords_of_indices(index_map, shape, axes), index_map


def grid_coordinates(shape: Sequence[int], axes: Sequence[int]) -> np.ndarray:
    """Coordinates of the full grid spanned by ``axes`` in row-major order."""
    shape = as_5d_shape(shape)
    per_axis = [axis_coordinates(shape[a]) for a in axes]
    grids = np.meshgrid(*per_axis, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


# ---------------------------------------------------------------- phantoms

PHANTOM_KINDS = ("gaussian_blobs", "stripes", "shells")

# half-max radius of each blob in unit-cube coordinates, by number of axes
_BLOB_RADIUS = {1: 0.1, 2: 0.15, 3: 0.22}
_SPATIAL = (2, 3, 4)


def _blob_field(shape, rng, n_blobs):
    axes = [a for a in _SPATIAL if shape[a] > 1] or [4]
    d = len(axes)
    radius = _BLOB_RADIUS.get(d, 0.22)
    spacing = 2 * radius + 0.04
    centres = []
    for _ in range(10000):
        c = rng.uniform(radius, 1 - radius, size=d)
        if all(np.linalg.norm(c - o) >= spacing for o in centres):
            centres.append(c)
            if len(centres) == n_blobs:
                break
    else:
        raise DataError(f"cannot place {n_blobs} separated blobs", "generate_phantom", _MODULE)
    unit = np.meshgrid(
        *[np.linspace(0.0, 1.0, shape[a]) if shape[a] > 1 else np.zeros(1) for a in axes],
        indexing="ij",
    )
    field = np.zeros(unit[0].shape)
    for c in centres:
        r2 = sum((u - ci) ** 2 for u, ci in zip(unit, c))
        # flat-topped profile reaching half max exactly at ``radius``
        field = np.maximum(field, np.exp2(-((r2 / radius**2) ** 2)))
    return field, axes


def _stripe_field(shape, rng, period):
    x = np.arange(shape[4], dtype=np.float64)
    phase = rng.integers(period)
    return 0.5 + 0.5 * np.cos(2 * np.pi * (x + phase) / period), [4]


def _shell_field(shape, rng, period):
    axes = [a for a in _SPATIAL if shape[a] > 1] or [4]
    centre = [shape[a] / 2 + rng.uniform(-0.1, 0.1) * shape[a] for a in axes]
    grids = np.meshgrid(*[np.arange(shape[a], dtype=np.float64) for a in axes], indexing="ij")
    r = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, centre)))
    return 0.5 + 0.5 * np.cos(2 * np.pi * r / period), axes


def generate_phantom(
    kind: str,
    shape: Sequence[int],
    seed: int = 0,
    dtype: str = "u16",
    n_blobs: int = 3,
    period: int = 8,
) -> Volume:
    """Deterministic synthetic volume spanning ``[0, dtype max]``.

    ``gaussian_blobs`` places ``n_blobs`` separated flat-topped bright blobs;
    ``stripes`` is a cosine grating along X with the given ``period``;
    ``shells`` are concentric spherical shells with radial ``period``.
    Extra channels and time points are gamma-warped copies so they differ.
    """
    shape = as_5d_shape(shape)
    if kind not in PHANTOM_KINDS:
        raise DataError(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}", "generate_phantom", _MODULE)
    if dtype not in DTYPE_NAMES:
        raise UnsupportedDtype(f"unsupported dtype {dtype!r}", "generate_phantom", _MODULE)
    rng = np.random.default_rng(seed)
    if kind == "gaussian_blobs":
        field, axes = _blob_field(shape, rng, n_blobs)
    elif kind == "stripes":
        field, axes = _stripe_field(shape, rng, period)
    else:
        field, axes = _shell_field(shape, rng, period)

    lo, hi = field.min(), field.max()
    field = (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)
    spatial = [1, 1, 1]
    for a, n in zip(axes, field.shape):
        spatial[a - 2] = n
    field = np.broadcast_to(field.reshape(spatial), shape[2:])

    out = np.empty(shape, dtype=np.float64)
    for t in range(shape[0]):
        for c in range(shape[1]):
            out[t, c] = field ** (1.0 + 0.5 * c + 0.1 * t)

    dt = DTYPES[DTYPE_NAMES[dtype]]
    peak = dtype_peak(dt)
    if dt.kind == "u":
        data = np.rint(out * peak).astype(dt.newbyteorder("="))
    else:
        data = (out * peak).astype(np.float32)
    return Volume(data)
