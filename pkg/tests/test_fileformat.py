import numpy as np
import pytest

from inif.errors import BadMagic, DataError, FormatError, TruncatedPayload, UnsupportedDtype, UnsupportedVersion
from inif.fileformat import (
    InifFile,
    InifHeader,
    compression_ratio,
    decode,
    decode_chunked,
    decode_indices,
    decode_mask,
    decode_mask_chunked,
    deserialize,
    evaluate,
    header_size,
    load_inif,
    serialize,
)
from inif.pipeline import CompressionJob, PriorSpec, compress
from inif.siren import SirenArchitecture, init_siren, param_count
from inif.volume import RoiSpec, grid_coordinates


@pytest.fixture(scope="module")
def plain(small_blobs):
    return compress(CompressionJob(small_blobs, ratio=8, steps=20, comment="note é")).file


@pytest.fixture(scope="module")
def hybrid(small_blobs):
    return compress(CompressionJob(small_blobs, ratio=2, steps=10, prior=PriorSpec())).file


@pytest.fixture(scope="module")
def chunked(small_blobs):
    return compress(CompressionJob(small_blobs, ratio=4, steps=10, chunks=((0, 5), (5, 8)))).file


def _header(arch, shape=(1, 1, 1, 4, 4), **kw):
    return InifHeader(shape, np.uint8, (0.0,), (255.0,), arch, **kw)


def test_roundtrip_is_exact(plain, hybrid, tmp_path):
    for f in (plain, hybrid):
        buf = f.to_bytes()
        again = deserialize(buf)
        assert again.header == f.header
        assert np.array_equal(again.params.flat(), f.params.flat())
        assert again.to_bytes() == buf
    path = tmp_path / "x.inif"
    assert plain.save(path) == path.stat().st_size
    assert load_inif(path).to_bytes() == plain.to_bytes()


def test_sizes_add_up(plain, hybrid):
    for f in (plain, hybrid):
        h = f.header
        assert len(f.to_bytes()) == len(h.to_bytes()) + 4 * param_count(h.arch)
        want = header_size(h.shape, h.channels, h.arch.depth, len(h.prior), h.comment)
        assert len(h.to_bytes()) == want
    assert hybrid.header.to_bytes().count(hybrid.header.prior) == 1


def test_distinct_errors(plain):
    buf = plain.to_bytes()
    with pytest.raises(BadMagic):
        deserialize(b"XNIF" + buf[4:])
    with pytest.raises(UnsupportedVersion):
        deserialize(buf[:4] + bytes([9]) + buf[5:])
    with pytest.raises(UnsupportedDtype):
        deserialize(buf[:6] + bytes([77]) + buf[7:])
    with pytest.raises(TruncatedPayload):
        deserialize(buf[:-1])
    with pytest.raises(TruncatedPayload):
        deserialize(buf[:20])
    with pytest.raises(FormatError):
        deserialize(buf + b"\0")


def test_single_byte_flips_never_pass_silently(hybrid):
    buf = hybrid.to_bytes()
    rng = np.random.default_rng(0)
    # every header byte plus a sample of payload positions
    hlen = len(hybrid.header.to_bytes())
    positions = list(range(hlen)) + list(rng.choice(np.arange(hlen, len(buf)), 100, replace=False))
    for pos in positions:
        bad = bytearray(buf)
        bad[pos] ^= 0xFF
        try:
            got = deserialize(bytes(bad))
        except FormatError:
            continue
        assert got.header != hybrid.header or not np.array_equal(got.params.flat(), hybrid.params.flat())


def test_header_validation():
    arch = SirenArchitecture(2, 1, 4)
    with pytest.raises(FormatError):
        _header(SirenArchitecture(3, 1, 4))
    with pytest.raises(FormatError):
        InifHeader((1, 1, 1, 4, 4), np.uint8, (0.0, 1.0), (255.0, 2.0), arch)
    with pytest.raises(FormatError):
        _header(arch, prior=b"BDC1")
    h = _header(arch)
    with pytest.raises(FormatError):
        serialize(init_siren(SirenArchitecture(2, 1, 5), 0), h)
    with pytest.raises(FormatError):
        InifFile(h, init_siren(SirenArchitecture(2, 1, 5), 0))


# ---------------------------------------------------------------- decode equivalences


def test_box_roi_is_restriction(plain, hybrid):
    for f in (plain, hybrid):
        full = decode(f).data
        roi = RoiSpec.box([None, None, (2, 6), (5, 20), (0, 31)])
        assert np.array_equal(decode(f, roi).data, full[:, :, 2:6, 5:20, 0:31])


def test_strided_roi_is_restriction(plain):
    full = decode(plain).data
    roi = RoiSpec.box([None, None, (1, 8), None, (3, 32)], [1, 1, 3, 2, 5])
    assert np.array_equal(decode(plain, roi).data, full[:, :, 1:8:3, ::2, 3:32:5])


def test_single_voxel_and_slice(plain):
    full = decode(plain).data
    assert decode_indices(plain, [[0, 0, 7, 31, 0]])[0] == full[0, 0, 7, 31, 0]
    sl = decode(plain, RoiSpec.box([None, None, (4, 5), None, None])).data
    assert np.array_equal(sl, full[:, :, 4:5])


def test_mask_decode(plain, chunked):
    full = decode(plain).data
    rng = np.random.default_rng(1)
    mask = rng.random(full.shape) < 0.1
    vals, idx = decode_mask(plain, mask)
    assert np.array_equal(vals, full[mask])
    assert np.array_equal(idx, np.argwhere(mask))
    cvals, cidx = decode_mask_chunked(chunked, mask)
    assert np.array_equal(cvals, decode_chunked(chunked).data[mask])
    assert np.array_equal(cidx, idx)
    with pytest.raises(DataError):
        decode_mask(plain, mask[:, :, :4])


def test_worker_count_does_not_change_values(plain):
    coords = grid_coordinates(plain.header.shape, plain.header.axes)
    one = evaluate(plain.params, coords)
    two = evaluate(plain.params, coords, workers=2, shard=1000)
    assert np.array_equal(one, two)
    assert np.array_equal(decode(plain, workers=2).data, decode(plain).data)


def test_out_of_bounds_roi(plain):
    with pytest.raises(DataError, match="out of bounds"):
        decode(plain, RoiSpec.box([None, None, (0, 9), None, None]))
    with pytest.raises(DataError):
        decode_indices(plain, [[0, 0, 8, 0, 0]])


def test_compression_ratio(plain, chunked, small_blobs):
    raw = small_blobs.nbytes
    assert compression_ratio(plain, raw) == raw / len(plain.to_bytes())
    parts = [len(chunked.manifest.to_bytes())] + [p.to_bytes() for p in chunked.parts]
    assert compression_ratio(parts, raw) == pytest.approx(raw / chunked.nbytes)
    assert raw / chunked.nbytes >= 4
