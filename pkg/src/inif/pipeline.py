"""Compression jobs: sampling, the training loop, hybrid prior mode and chunking."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
import numpy as np

from . import optim
from .codec import Bitstream, decode_volume
from .errors import DataError, DivergenceError, InifError
from .fileformat import (
    PROXY_SCALE,
    ChunkedFile,
    InifFile,
    InifHeader,
    Manifest,
    ManifestEntry,
    header_size,
    normalized_at,
    residual_to_target,
)
from .guidance import (
    FeatureExtractor,
    LossTerm,
    QualityReport,
    SoftSegConfig,
    compose_loss,
    mse_loss,
    perceptual_loss,
    quality_report,
    random_patch,
    soft_iou_loss,
)
from .rate import allocate_bits, normalize_with, rate_control_encode
from .siren import (
    DEFAULT_DEPTH,
    SirenArchitecture,
    SirenParams,
    architecture_for_budget,
    backward_batch,
    forward_batch,
    init_siren,
    min_network_bytes,
)
from .volume import (
    CHANNEL_AXIS,
    INTENSITY_SCALE,
    NormalizationParams,
    Volume,
    as_5d_shape,
    axis_coordinates,
    coord_axes,
    normalize_intensity,
)

_MODULE = "pipeline"

MAX_BATCH = 1 << 16
DEFAULT_STEPS = 2000
DEFAULT_PRIOR_STEPS = 500
MAX_FOLDED_CHANNELS = 8
# bytes of training state per voxel: raw value, normalized target, a 5-wide
# coordinate row and one hidden activation row of float64
WORKING_BYTES_PER_VOXEL = 8 * (1 + 1 + 5 + 8)


@dataclass(frozen=True)
class GuidanceSpec:
    """One extra loss term: ``seg`` (soft IoU) or ``perceptual``."""

    kind: str
    weight: float
    seg: SoftSegConfig = SoftSegConfig()
    reference: Volume | None = None
    extractor_seed: int = 0
    patch_size: int = 32

    def __post_init__(self):
        if self.kind not in ("seg", "perceptual"):
            raise DataError(f"unknown guidance kind {self.kind!r}", "CompressionJob", _MODULE)
        if not self.weight >= 0:
            raise DataError("guidance weight must be >= 0", "CompressionJob", _MODULE)
        if self.kind == "perceptual" and self.reference is None:
            raise DataError("perceptual guidance needs a reference volume", "CompressionJob", _MODULE)


@dataclass(frozen=True)
class PriorSpec:
    split: float = 0.9
    block: int = 8


@dataclass
class CompressionJob:
    volume: Volume
    ratio: float
    steps: int | None = None
    optimizer: str = optim.ADAM
    guidance: tuple[GuidanceSpec, ...] = ()
    prior: PriorSpec | None = None
    batch_size: int | None = None
    seed: int = 0
    chunks: tuple[tuple[int, int], ...] | None = None
    chunk_mem_bytes: int | None = None
    lr: float = optim.DEFAULT_ADAM_LR
    learned_weights: str | None = None
    fold_channels: bool = True
    comment: str = ""
    depth: int = DEFAULT_DEPTH

    def __post_init__(self):
        if isinstance(self.guidance, GuidanceSpec):
            self.guidance = (self.guidance,)
        self.guidance = tuple(self.guidance)
        if not self.ratio > 1:
            raise DataError(f"ratio must exceed 1, got {self.ratio}", "CompressionJob", _MODULE)
        if self.steps is None:
            self.steps = DEFAULT_PRIOR_STEPS if self.prior is not None else DEFAULT_STEPS
        if self.steps < 1:
            raise DataError("steps T must be >= 1", "CompressionJob", _MODULE)
        if self.optimizer not in optim.OPTIMIZER_IDS:
            raise DataError(f"unknown optimizer {self.optimizer!r}", "CompressionJob", _MODULE)
        if self.batch_size is not None and self.batch_size < 1:
            raise DataError("batch size must be >= 1", "CompressionJob", _MODULE)
        if self.chunks is not None:
            check_plan(self.chunks, self.volume.shape[2])


@dataclass
class TrainLog:
    losses: dict[str, list[float]] = field(default_factory=dict)
    step_seconds: list[float] = field(default_factory=list)
    report: QualityReport | None = None
    initial_report: QualityReport | None = None
    provenance: str | None = None

    def record(self, terms: dict[str, float], seconds: float):
        for k, v in terms.items():
            self.losses.setdefault(k, []).append(float(v))
        self.step_seconds.append(seconds)

    @property
    def total(self) -> list[float]:
        return self.losses.get("total", [])


@dataclass
class CompressionResult:
    file: InifFile | ChunkedFile
    log: TrainLog | list[TrainLog]
    raw_bytes: int
    stored_bytes: int
    bitstream: Bitstream | None = None

    @property
    def ratio(self) -> float:
        return self.raw_bytes / self.stored_bytes


# ---------------------------------------------------------------- sampling


class PointGrid:
    """The training points of a volume and their normalized targets.

    With folded channels a point is one (t, z, y, x) location carrying C
    target values; otherwise every voxel is a point with one value.
    """

    def __init__(self, volume: Volume, fold_channels: bool = True, normalized=None):
        self.volume = volume
        self.shape = volume.shape
        C = volume.channels
        self.fold = fold_channels and 1 < C <= MAX_FOLDED_CHANNELS
        self.axes = coord_axes(self.shape, self.fold)
        n5 = normalize_intensity(volume)[0] if normalized is None else normalized
        self.normalized = n5
        if self.fold:
            self.point_shape = (self.shape[0], 1) + self.shape[2:]
            self.targets = np.moveaxis(n5, CHANNEL_AXIS, -1).reshape(-1, C)
        else:
            self.point_shape = self.shape
            self.targets = n5.reshape(-1, 1)
        self.out_dim = self.targets.shape[1]
        self.tables = [axis_coordinates(self.shape[a]) for a in self.axes]

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    def coords(self, ids) -> np.ndarray:
        multi = np.unravel_index(np.asarray(ids), self.point_shape)
        return np.stack([tab[multi[a]] for tab, a in zip(self.tables, self.axes)], axis=1)

    def locate(self, index5) -> tuple[np.ndarray, np.ndarray]:
        """Point ids and output columns of (N, 5) voxel indices."""
        index5 = np.asarray(index5)
        cols = index5[:, CHANNEL_AXIS] if self.fold else np.zeros(len(index5), dtype=np.intp)
        idx = index5.copy()
        if self.fold:
            idx[:, CHANNEL_AXIS] = 0
        return np.ravel_multi_index(tuple(idx.T), self.point_shape), cols


class BatchSampler:
    """Uniform sampling without replacement, sweeping the grid every epoch."""

    def __init__(self, n_points: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise DataError("batch size must be >= 1", "sample_batch", _MODULE)
        self.n = n_points
        self.batch = min(batch_size, n_points)
        self.rng = rng
        self.perm = rng.permutation(n_points)
        self.pos = 0

    def next(self) -> np.ndarray:
        """Next batch; the final batch of an epoch may be short."""
        if self.pos >= self.n:
            self.perm = self.rng.permutation(self.n)
            self.pos = 0
        out = self.perm[self.pos : self.pos + self.batch]
        self.pos += len(out)
        return out


def default_batch(n_points: int) -> int:
    return min(n_points, MAX_BATCH)


def sample_batch(volume: Volume, batch_size: int, rng: np.random.Generator, fold_channels: bool = True):
    """One batch of (coords, normalized targets) drawn without replacement."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1", "sample_batch", _MODULE)
    grid = PointGrid(volume, fold_channels)
    ids = rng.permutation(grid.size)[: min(batch_size, grid.size)]
    return grid.coords(ids), grid.targets[ids]


# ---------------------------------------------------------------- training


def _make_optimizer(job: CompressionJob, tensors, log: TrainLog):
    if job.optimizer == optim.LEARNED:
        weights, log.provenance = optim.load_learned_weights(job.learned_weights)
        return optim.learned_init(tensors, job.steps, weights)
    return optim.adam_init(tensors, lr=job.lr)


def _optimizer_step(job, state, tensors, grads, loss):
    if job.optimizer == optim.LEARNED:
        return optim.learned_step(state, tensors, grads, loss)
    return optim.adam_step(state, tensors, grads)


@dataclass
class _Target:
    """What the network fits and how its output maps to reconstruction.

    ``recon = base + gain * output`` in normalized intensity space, where the
    base is zero (plain) or the codec reconstruction plus offset (prior).
    """

    grid: PointGrid
    fit: np.ndarray
    gain: float = 1.0
    base: np.ndarray | None = None  # normalized 5D, prior mode only


def _guidance_terms(job, arch, params, target: _Target, rng, extractors) -> list[tuple[LossTerm, list]]:
    out = []
    grid = target.grid
    shape = grid.shape
    for k, g in enumerate(job.guidance):
        ps = min(g.patch_size, shape[3], shape[4])
        if g.kind == "seg":
            loc = random_patch(shape, ps, rng)
            idx5 = loc.indices()
            truth = loc.slice_of(grid.normalized)
        else:
            ex = extractors[k]
            if ps < ex.receptive_field:
                raise DataError(
                    f"planes of {shape[3]}x{shape[4]} are smaller than the perceptual receptive field",
                    "train",
                    _MODULE,
                )
            loc = random_patch(shape, ps, rng)
            idx5 = loc.indices()
            ref5, _ = normalize_intensity(g.reference)
            truth = random_patch(ref5.shape, ps, rng).slice_of(ref5)
        ids, cols = grid.locate(idx5)
        vals, trace = forward_batch(params, grid.coords(ids))
        pred = vals[np.arange(len(ids)), cols] * target.gain
        if target.base is not None:
            pred = pred + loc.slice_of(target.base).reshape(-1)
        pred = pred.reshape(ps, ps)
        if g.kind == "seg":
            value, dimg = soft_iou_loss(pred, truth, g.seg)
        else:
            value, dimg = perceptual_loss(pred, truth, extractors[k])
        dout = np.zeros_like(vals)
        dout[np.arange(len(ids)), cols] = dimg.reshape(-1) * target.gain
        out.append((LossTerm(g.kind, g.weight, value, None), backward_batch(params, trace, dout)))
    return out


def _fit(job: CompressionJob, arch: SirenArchitecture, target: _Target, log: TrainLog) -> SirenParams:
    grid = target.grid
    rng = np.random.default_rng(job.seed)
    params = init_siren(arch, job.seed)
    tensors = params.tensors()
    state = _make_optimizer(job, tensors, log)
    sampler = BatchSampler(grid.size, job.batch_size or default_batch(grid.size), rng)
    guide_rng = np.random.default_rng([job.seed, 1])
    extractors = {
        k: FeatureExtractor.seeded(g.extractor_seed) for k, g in enumerate(job.guidance) if g.kind == "perceptual"
    }
    for step in range(job.steps):
        t0 = time.perf_counter()
        ids = sampler.next()
        params = SirenParams.from_tensors(arch, tensors)
        out, trace = forward_batch(params, grid.coords(ids))
        loss, dout = mse_loss(out, target.fit[ids])
        grads = backward_batch(params, trace, dout)
        terms = [LossTerm("mse", 1.0, loss, None)]
        grad_sets = [grads]
        for term, g in _guidance_terms(job, arch, params, target, guide_rng, extractors):
            terms.append(term)
            grad_sets.append(g)
        total = sum(t.weight * t.value for t in terms)
        if len(terms) > 1:
            grads = [
                compose_loss([LossTerm(t.name, t.weight, t.value, gs[i]) for t, gs in zip(terms, grad_sets)])[1]
                for i in range(len(grads))
            ]
        if not math.isfinite(total):
            raise DivergenceError(f"diverged: non-finite loss at step {step}", "train", _MODULE, step=step)
        try:
            state, tensors = _optimizer_step(job, state, tensors, grads, total)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc.args[0]} at step {step}", "train", _MODULE, step=step) from exc
        log.record({"total": total, **{t.name: t.value for t in terms}}, time.perf_counter() - t0)
    return SirenParams.from_tensors(arch, tensors)


def _comment(job: CompressionJob) -> str:
    return job.comment


def _plain_header(job, grid: PointGrid, arch, prior=b"", residual=None) -> InifHeader:
    v = grid.volume
    return InifHeader(
        v.shape,
        v.dtype,
        tuple(v.intensity_min.tolist()),
        tuple(v.intensity_max.tolist()),
        arch,
        optim.OPTIMIZER_IDS[job.optimizer],
        job.steps,
        job.seed,
        prior,
        residual,
        _comment(job),
    )


def _report(file: InifFile, grid: PointGrid) -> QualityReport:
    index = np.stack(np.unravel_index(np.arange(int(np.prod(grid.shape))), grid.shape), axis=1)
    rec = np.clip(normalized_at(file, index), 0.0, INTENSITY_SCALE).reshape(grid.shape)
    return quality_report(rec, grid.normalized)


def _train_plain(job: CompressionJob, volume: Volume, budget: int):
    grid = PointGrid(volume, job.fold_channels)
    overhead = header_size(volume.shape, volume.channels, job.depth, comment=_comment(job))
    arch = architecture_for_budget(budget, len(grid.axes), grid.out_dim, overhead, job.depth)
    log = TrainLog()
    init = InifFile(_plain_header(job, grid, arch), init_siren(arch, job.seed).quantized())
    log.initial_report = _report(init, grid)
    params = _fit(job, arch, _Target(grid, grid.targets), log)
    file = InifFile(_plain_header(job, grid, arch), params.quantized())
    log.report = _report(file, grid)
    return file, log


def train(job: CompressionJob) -> tuple[SirenParams, TrainLog]:
    """Size the network for the job's ratio and fit it; plain or guided mode."""
    file, log = _train_plain(job, job.volume, math.floor(job.volume.nbytes / job.ratio))
    return file.params, log


def _prior_source(volume: Volume, normalized) -> Volume:
    """The volume the codec sees: raw integers, or a u16 proxy of float data."""
    if volume.dtype.kind == "u":
        return volume
    proxy = np.rint(np.clip(normalized, 0.0, INTENSITY_SCALE) * PROXY_SCALE).astype(np.uint16)
    return Volume(proxy)


def _codec_normalized(volume: Volume, decoded: Volume) -> np.ndarray:
    if decoded.dtype != volume.dtype:
        return decoded.data.astype(np.float64) / PROXY_SCALE
    return normalize_with(decoded.data, NormalizationParams.of(volume))


def _train_prior(job: CompressionJob, volume: Volume, budget: int):
    prior = job.prior or PriorSpec()
    grid = PointGrid(volume, job.fold_channels)
    in_dim, out_dim = len(grid.axes), grid.out_dim
    overhead = header_size(volume.shape, volume.channels, job.depth, comment=_comment(job), prior=True)
    min_inr = min_network_bytes(in_dim, out_dim, overhead, job.depth)
    codec_bytes, inr_bytes = allocate_bits(budget, prior.split, min_inr=min_inr)
    rc = rate_control_encode(_prior_source(volume, grid.normalized), codec_bytes, prior.block)
    stream = rc.stream
    base = _codec_normalized(volume, decode_volume(stream))
    residual = grid.normalized - base
    rmin, rmax = float(np.float32(residual.min())), float(np.float32(residual.max()))
    span = rmax - rmin
    arch = architecture_for_budget(inr_bytes, in_dim, out_dim, overhead, job.depth)
    rgrid = PointGrid(volume, job.fold_channels, normalized=residual_to_target(residual, rmin, rmax))
    rgrid.normalized = grid.normalized
    gain = span / INTENSITY_SCALE
    offset = rmin + (INTENSITY_SCALE / 2) * gain
    target = _Target(rgrid, rgrid.targets, gain, base + offset)
    log = TrainLog()
    prior_bytes = stream.to_bytes()
    header = _plain_header(job, grid, arch, prior_bytes, (rmin, rmax))
    log.initial_report = _report(InifFile(header, init_siren(arch, job.seed).quantized()), grid)
    params = _fit(job, arch, target, log)
    file = InifFile(header, params.quantized())
    log.report = _report(file, grid)
    return file, log, stream


def train_with_prior(job: CompressionJob) -> tuple[SirenParams, Bitstream, TrainLog]:
    file, log, stream = _train_prior(job, job.volume, math.floor(job.volume.nbytes / job.ratio))
    return file.params, stream, log


def _compress_one(job: CompressionJob, volume: Volume, budget: int):
    if job.prior is not None:
        file, log, stream = _train_prior(job, volume, budget)
        return file, log, stream
    file, log = _train_plain(job, volume, budget)
    return file, log, None


# ---------------------------------------------------------------- chunking


def check_plan(plan, Z: int):
    z = 0
    for z0, z1 in plan:
        if z0 != z or z1 <= z0:
            raise DataError(f"chunk ranges must partition [0, {Z})", "plan_chunks", _MODULE)
        z = z1
    if z != Z:
        raise DataError(f"chunk ranges must partition [0, {Z})", "plan_chunks", _MODULE)


def even_partition(Z: int, n: int) -> tuple[tuple[int, int], ...]:
    bounds = [(k * Z) // n for k in range(n + 1)]
    return tuple((bounds[k], bounds[k + 1]) for k in range(n))


def slice_cost(shape) -> int:
    T, C, _, Y, X = shape
    return T * C * Y * X * WORKING_BYTES_PER_VOXEL


def plan_chunks(shape, memory_budget: int, per_slice_bytes: int | None = None):
    """Contiguous even z-ranges whose working sets each fit ``memory_budget``."""
    shape = as_5d_shape(shape)
    cost = slice_cost(shape) if per_slice_bytes is None else int(per_slice_bytes)
    if memory_budget < cost:
        raise DataError(
            f"memory budget {memory_budget} is below the one-slice footprint {cost}", "plan_chunks", _MODULE
        )
    Z = shape[2]
    per_chunk = memory_budget // cost
    n = -(-Z // per_chunk)
    return even_partition(Z, n)


def part_name(stem: str, k: int) -> str:
    return f"{stem}.part{k:03d}.inif"


def compress_chunked(job: CompressionJob, stem: str = "volume") -> CompressionResult:
    """Compress each z-chunk independently; the manifest counts toward the budget.

    A one-chunk plan needs no manifest and yields the plain single file.
    """
    v = job.volume
    Z = v.shape[2]
    plan = job.chunks
    if plan is None:
        plan = plan_chunks(v.shape, job.chunk_mem_bytes) if job.chunk_mem_bytes else ((0, Z),)
    check_plan(plan, Z)
    raw = v.nbytes
    total_budget = math.floor(raw / job.ratio)
    if len(plan) == 1:
        file, log, stream = _compress_one(job, v, total_budget)
        return CompressionResult(file, log, raw, file.nbytes, stream)
    entries = tuple(ManifestEntry(part_name(stem, k), z0, z1) for k, (z0, z1) in enumerate(plan))
    manifest = Manifest(raw, float(job.ratio), entries)
    budget = total_budget - len(manifest.to_bytes())
    parts, logs = [], []
    for k, (z0, z1) in enumerate(plan):
        chunk = v.crop_z(z0, z1)
        chunk_budget = (budget * chunk.nbytes) // raw
        try:
            file, log, _ = _compress_one(job, chunk, chunk_budget)
        except InifError as exc:
            exc.args = (f"chunk {k} [{z0}, {z1}): {exc.args[0]}",) + exc.args[1:]
            raise
        parts.append(file)
        logs.append(log)
    chunked = ChunkedFile(manifest, parts)
    return CompressionResult(chunked, logs, raw, chunked.nbytes)


def compress(job: CompressionJob, stem: str = "volume") -> CompressionResult:
    """Run a job in whichever mode it describes."""
    if job.chunks is not None or job.chunk_mem_bytes:
        return compress_chunked(job, stem)
    file, log, stream = _compress_one(job, job.volume, math.floor(job.volume.nbytes / job.ratio))
    return CompressionResult(file, log, job.volume.nbytes, file.nbytes, stream)
