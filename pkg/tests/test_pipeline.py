import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inif.codec import decode_volume
from inif.errors import BudgetInfeasible, DataError, DivergenceError
from inif.fileformat import ChunkedFile, decode, decode_chunked
from inif.pipeline import (
    BatchSampler,
    CompressionJob,
    GuidanceSpec,
    PointGrid,
    PriorSpec,
    compress,
    plan_chunks,
    sample_batch,
    slice_cost,
    train,
    train_with_prior,
)
from inif.rate import normalize_with
from inif.siren import forward_batch
from inif.volume import NormalizationParams, RoiSpec, Volume, generate_phantom, grid_coordinates, normalize_intensity


def test_sampler_covers_each_epoch_once():
    s = BatchSampler(100, 30, np.random.default_rng(0))
    for _ in range(3):
        seen = np.concatenate([s.next() for _ in range(4)])
        assert sorted(seen) == list(range(100))


def test_sampler_is_deterministic():
    a = BatchSampler(50, 16, np.random.default_rng(4))
    b = BatchSampler(50, 16, np.random.default_rng(4))
    for _ in range(7):
        assert np.array_equal(a.next(), b.next())


def test_sample_batch_targets_match_coords(small_blobs):
    norm, _ = normalize_intensity(small_blobs)
    coords, targets = sample_batch(small_blobs, 64, np.random.default_rng(0))
    assert coords.shape == (64, 3) and targets.shape == (64, 1)
    grid = PointGrid(small_blobs)
    full = grid.coords(np.arange(grid.size))
    for c, t in zip(coords, targets):
        i = np.flatnonzero(np.all(full == c, axis=1))
        assert len(i) == 1 and grid.targets[i[0], 0] == t[0]


def test_folded_channels_use_one_output_per_channel():
    v = generate_phantom("gaussian_blobs", (1, 3, 2, 8, 8), seed=0)
    grid = PointGrid(v)
    assert grid.out_dim == 3 and grid.size == 2 * 8 * 8
    norm, _ = normalize_intensity(v)
    ids, cols = grid.locate(np.array([[0, 2, 1, 3, 4]]))
    assert grid.targets[ids[0], cols[0]] == norm[0, 2, 1, 3, 4]


def test_single_step_job(small_blobs):
    params, log = train(CompressionJob(small_blobs, ratio=8, steps=1))
    assert len(log.total) == 1 and math.isfinite(log.total[0])


def test_constant_volume_fits_in_300_steps():
    v = Volume(np.full((1, 1, 16, 16, 16), 700, dtype=np.uint16))
    params, log = train(CompressionJob(v, ratio=4, steps=300, seed=0))
    out, _ = forward_batch(params, grid_coordinates(v.shape, (2, 3, 4)))
    assert float(np.mean(out**2)) < 1e-4


def test_training_reduces_error_on_blobs(small_blobs):
    wins = 0
    for seed in range(10):
        _, log = train(CompressionJob(small_blobs, ratio=8, steps=60, seed=seed))
        wins += log.report.mse < log.initial_report.mse
    assert wins >= 9


def test_divergence_is_reported(small_blobs):
    with pytest.raises(DivergenceError, match="diverged"):
        train(CompressionJob(small_blobs, ratio=8, steps=50, lr=1e300))


def test_job_validation(small_blobs):
    for kwargs in [dict(ratio=1), dict(ratio=8, steps=0), dict(ratio=8, optimizer="sgd"), dict(ratio=8, chunks=((0, 3),))]:
        with pytest.raises(DataError):
            CompressionJob(small_blobs, **kwargs)
    for r in (1024, 2048):
        assert CompressionJob(small_blobs, ratio=r).ratio == r
    with pytest.raises(DataError):
        GuidanceSpec("perceptual", 0.1)


# ---------------------------------------------------------------- prior mode


@pytest.fixture(scope="module")
def prior_run(blobs):
    job = CompressionJob(blobs, ratio=16, steps=150, prior=PriorSpec(), seed=0)
    return job, compress(job)


def test_prior_byte_accounting(blobs, prior_run):
    job, res = prior_run
    budget = math.floor(blobs.nbytes / 16)
    assert res.stored_bytes <= budget
    stream = res.file.bitstream
    assert stream.nbytes <= math.floor(0.9 * budget)
    assert res.file.to_bytes().count(stream.to_bytes()) == 1


def test_hybrid_beats_its_own_prior(blobs, prior_run):
    _, res = prior_run
    norm, params = normalize_intensity(blobs)
    codec_only = normalize_with(decode_volume(res.file.bitstream).data, params)
    prior_mse = float(np.mean((np.clip(codec_only, 0, 100) - norm) ** 2))
    assert res.log.report.mse <= prior_mse


def test_near_lossless_prior_correction_is_small(small_blobs):
    res = compress(CompressionJob(small_blobs, ratio=1.2, steps=30, prior=PriorSpec()))
    assert res.file.bitstream.config.qp == 0
    codec = decode_volume(res.file.bitstream).data.astype(np.int64)
    assert np.max(np.abs(codec - small_blobs.data.astype(np.int64))) <= 1
    norm_params = NormalizationParams.of(small_blobs)
    hybrid = normalize_with(decode(res.file).data, norm_params)
    assert np.mean(np.abs(hybrid - normalize_with(codec, norm_params))) < 1.0


def test_prior_infeasible_budget(blobs):
    with pytest.raises(BudgetInfeasible):
        train_with_prior(CompressionJob(blobs, ratio=512, steps=1, prior=PriorSpec()))


# ---------------------------------------------------------------- chunking


def test_plan_chunks_counts():
    shape = (1, 1, 64, 32, 32)
    assert len(plan_chunks(shape, 16 * slice_cost(shape))) == 4
    assert plan_chunks(shape, 10**12) == ((0, 64),)
    with pytest.raises(DataError):
        plan_chunks(shape, slice_cost(shape) - 1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 300), st.integers(1, 400))
def test_plan_chunks_partition(Z, per_chunk):
    shape = (1, 1, Z, 4, 4)
    plan = plan_chunks(shape, per_chunk * slice_cost(shape))
    assert plan[0][0] == 0 and plan[-1][1] == Z
    assert all(a[1] == b[0] for a, b in zip(plan, plan[1:]))
    assert all(0 < z1 - z0 <= per_chunk for z0, z1 in plan)
    assert len(plan) == -(-Z // per_chunk)


def test_one_chunk_plan_equals_plain(small_blobs):
    plain = compress(CompressionJob(small_blobs, ratio=8, steps=20))
    one = compress(CompressionJob(small_blobs, ratio=8, steps=20, chunks=((0, 8),)))
    assert one.file.to_bytes() == plain.file.to_bytes()


@pytest.fixture(scope="module")
def chunked_run(small_blobs):
    return compress(CompressionJob(small_blobs, ratio=4, steps=20, chunks=((0, 3), (3, 8))))


def test_chunked_budget_and_slices(small_blobs, chunked_run):
    res = chunked_run
    assert isinstance(res.file, ChunkedFile)
    assert res.stored_bytes <= math.floor(small_blobs.nbytes / 4)
    full = decode_chunked(res.file).data
    for z in range(8):
        k = 0 if z < 3 else 1
        z0 = (0, 3)[k]
        part = decode(res.file.parts[k], RoiSpec.box([None, None, (z - z0, z - z0 + 1), None, None])).data
        got = decode_chunked(res.file, RoiSpec.box([None, None, (z, z + 1), None, None])).data
        assert np.array_equal(got, part) and np.array_equal(got[:, :, 0], full[:, :, z])


def test_chunked_save_load(tmp_path, chunked_run):
    path = tmp_path / "v.manifest"
    chunked_run.file.save(path)
    again = ChunkedFile.load(path)
    assert [p.to_bytes() for p in again.parts] == [p.to_bytes() for p in chunked_run.file.parts]


def test_compression_is_deterministic(small_blobs):
    a = compress(CompressionJob(small_blobs, ratio=8, steps=15, seed=3))
    b = compress(CompressionJob(small_blobs, ratio=8, steps=15, seed=3))
    assert a.file.to_bytes() == b.file.to_bytes()


def test_guidance_keeps_the_layout(small_blobs):
    plain = compress(CompressionJob(small_blobs, ratio=8, steps=10))
    guided = compress(CompressionJob(small_blobs, ratio=8, steps=10, guidance=GuidanceSpec("seg", 1.0)))
    assert guided.file.header.arch == plain.file.header.arch
    assert guided.file.nbytes == plain.file.nbytes
    assert guided.file.to_bytes() != plain.file.to_bytes()
