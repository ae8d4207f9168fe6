import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inif.codec import (
    BlockCodecConfig,
    Bitstream,
    decode_planes,
    decode_volume,
    dequantize,
    encode_volume,
    idct2,
    dct2,
    q_step,
    qp_max,
    quantize,
    transform,
    zigzag_order,
)
from inif.errors import BudgetInfeasible, CorruptStream, DataError, InifError, TruncatedPayload
from inif.rate import (
    RateModel,
    allocate_bits,
    compute_residual,
    fit_rate_model,
    lambda_from_rate,
    normalize_with,
    qp_from_lambda,
    rate_control_encode,
)
from inif.volume import Volume, generate_phantom, normalize_intensity


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom("gaussian_blobs", (1, 1, 4, 40, 36), seed=2)


def _naive_dct2(block):
    n = block.shape[0]
    out = np.zeros_like(block)
    for u in range(n):
        for v in range(n):
            au = math.sqrt((1 if u == 0 else 2) / n)
            av = math.sqrt((1 if v == 0 else 2) / n)
            s = 0.0
            for x in range(n):
                for y in range(n):
                    s += block[x, y] * math.cos(math.pi * (2 * x + 1) * u / (2 * n)) * math.cos(
                        math.pi * (2 * y + 1) * v / (2 * n)
                    )
            out[u, v] = au * av * s
    return out


@pytest.mark.parametrize("n", [4, 8])
def test_dct_matches_naive_sum(n):
    rng = np.random.default_rng(n)
    b = rng.uniform(-50, 50, (n, n))
    assert np.max(np.abs(dct2(b) - _naive_dct2(b))) < 1e-9
    assert np.max(np.abs(idct2(dct2(b)) - b)) < 1e-9


def test_zigzag_is_a_permutation_starting_at_dc():
    for b in (4, 8, 16):
        z = zigzag_order(b)
        assert sorted(z) == list(range(b * b))
        assert z[0] == 0 and set(z[1:3]) == {1, b}


@pytest.mark.parametrize("qp", [0, 30, 51, 90])
def test_constant_volume_is_exact(qp):
    v = Volume(np.full((1, 1, 2, 20, 20), 1234, dtype=np.uint16))
    dc, ac = quantize(transform(v), qp)
    assert not ac.any()
    assert np.array_equal(decode_volume(encode_volume(v, BlockCodecConfig(qp=qp))).data, v.data)


def test_stream_size_decreases_with_qp(phantom):
    sizes = [encode_volume(phantom, BlockCodecConfig(qp=q)).nbytes for q in range(10, 41)]
    assert all(a >= b for a, b in zip(sizes, sizes[1:]))
    assert sizes[0] > sizes[-1]


def test_qp0_is_near_lossless(phantom):
    rec = decode_volume(encode_volume(phantom, BlockCodecConfig(qp=0))).data.astype(np.int64)
    assert np.max(np.abs(rec - phantom.data.astype(np.int64))) <= 1


@pytest.mark.parametrize("qp", [4, 22, 37])
def test_per_coefficient_error_within_half_step(phantom, qp):
    coefs = transform(phantom)
    dc, ac = quantize(coefs, qp)
    back = dequantize(dc, ac, qp, 8)
    assert np.max(np.abs(back - coefs)) <= q_step(qp) / 2 + 1e-9


def test_stream_roundtrip_bytes(phantom):
    bs = encode_volume(phantom, BlockCodecConfig(block=4, qp=25))
    again, end = Bitstream.from_bytes(bs.to_bytes())
    assert end == bs.nbytes and again == bs
    assert np.array_equal(decode_volume(bs.to_bytes()).data, decode_volume(bs).data)


def test_decode_planes_matches_full(phantom):
    bs = encode_volume(phantom, BlockCodecConfig(qp=30))
    full = decode_volume(bs).data.astype(np.float64)
    got = decode_planes(bs, [2, 0])
    assert np.array_equal(got, full[0, 0, [2, 0]])


def test_stream_errors(phantom):
    buf = encode_volume(phantom).to_bytes()
    with pytest.raises(TruncatedPayload):
        decode_volume(buf[:-5])
    with pytest.raises(CorruptStream):
        decode_volume(b"XXXX" + buf[4:])
    with pytest.raises(DataError):
        BlockCodecConfig(block=5)


def test_qp_max_by_depth():
    assert qp_max(np.uint8) == 51
    assert qp_max(np.uint16) == 99


# ---------------------------------------------------------------- rate model


def test_qp_lambda_law():
    assert qp_from_lambda(1.0) == pytest.approx(13.7122, abs=1e-12)
    assert qp_from_lambda(math.e) == pytest.approx(17.9127, abs=1e-4)
    assert qp_from_lambda(math.e**2) - qp_from_lambda(1.0) == pytest.approx(8.4010, abs=1e-4)
    for bad in (0.0, -1.0):
        with pytest.raises(DataError):
            qp_from_lambda(bad)


def test_lambda_is_negative_slope_of_distortion():
    m = RateModel.from_dr(5.0, 1.2)
    assert lambda_from_rate(m, 1.0) == pytest.approx(5.0 * 1.2)
    R, h = 3.0, 1e-5
    slope = (m.distortion(R + h) - m.distortion(R - h)) / (2 * h)
    assert lambda_from_rate(m, R) == pytest.approx(-slope, rel=1e-8)
    assert lambda_from_rate(m, 2 * R) / lambda_from_rate(m, R) == pytest.approx(2 ** (-2.2), rel=1e-12)
    with pytest.raises(DataError):
        lambda_from_rate(m, 0.0)


def test_fit_rate_model_recovers_parameters():
    R = np.array([10.0, 40.0, 160.0, 900.0])
    m = fit_rate_model(zip(R, 5.0 * R**-1.2))
    assert m.C == pytest.approx(5.0, abs=1e-6) and m.K == pytest.approx(1.2, abs=1e-6)
    two = fit_rate_model([(2.0, 5.0 * 2**-1.2), (7.0, 5.0 * 7**-1.2)])
    assert two.K == pytest.approx(1.2, abs=1e-9)
    with pytest.raises(DataError, match="degenerate"):
        fit_rate_model([(3.0, 1.0), (3.0, 2.0)])
    with pytest.raises(DataError, match="degenerate"):
        fit_rate_model([(3.0, 1.0)])


def test_allocate_bits():
    assert allocate_bits(1000) == (900, 100)
    with pytest.raises(BudgetInfeasible):
        allocate_bits(1000, 1.0)
    with pytest.raises(DataError):
        allocate_bits(1000, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(100, 10**9), st.floats(0.05, 0.95))
def test_allocate_bits_sums(total, split):
    codec, inr = allocate_bits(total, split)
    assert codec + inr == total
    assert codec == math.floor(total * split)


# ---------------------------------------------------------------- rate control


@pytest.fixture(scope="module")
def rc_volume():
    return generate_phantom("gaussian_blobs", (1, 1, 4, 48, 48), seed=5)


def test_rate_control_never_exceeds_target(rc_volume):
    qps = []
    finest = encode_volume(rc_volume, BlockCodecConfig(qp=0)).nbytes
    for target in [900, 1500, 3000, 6000, 12000]:
        res = rate_control_encode(rc_volume, target)
        assert res.stream.nbytes <= target
        assert res.stream.nbytes >= min(0.9 * target, finest)
        qps.append(res.qp)
    assert all(a >= b for a, b in zip(qps, qps[1:]))


def test_rate_control_without_refinement_is_smallest_fitting_qp(rc_volume):
    target = 4000
    res = rate_control_encode(rc_volume, target, refine=False)
    assert res.stream.nbytes <= target
    assert encode_volume(rc_volume, BlockCodecConfig(qp=res.qp - 1)).nbytes > target


def test_rate_control_at_raw_size(rc_volume):
    raw = rc_volume.data.nbytes
    res = rate_control_encode(rc_volume, raw)
    assert res.stream.nbytes <= raw
    rec = decode_volume(res.stream).data.astype(np.int64)
    assert np.max(np.abs(rec - rc_volume.data.astype(np.int64))) <= 2


def test_rate_control_infeasible_target(rc_volume):
    with pytest.raises(BudgetInfeasible):
        rate_control_encode(rc_volume, 50)


# ---------------------------------------------------------------- residual


def test_residual_identities(rc_volume):
    assert not compute_residual(rc_volume, rc_volume).any()
    dec = decode_volume(rate_control_encode(rc_volume, 3000).stream)
    res = compute_residual(rc_volume, dec)
    norm, params = normalize_intensity(rc_volume)
    np.testing.assert_allclose(normalize_with(dec.data, params) + res, norm, atol=1e-12)
    with pytest.raises(DataError):
        compute_residual(rc_volume, Volume(dec.data[:, :, :2]))


def test_residual_smaller_than_signal(rc_volume):
    dec = decode_volume(encode_volume(rc_volume, BlockCodecConfig(qp=30)))
    res = compute_residual(rc_volume, dec)
    norm, _ = normalize_intensity(rc_volume)
    assert np.mean(np.abs(res)) <= np.mean(np.abs(norm))


def test_errors_are_inif_errors():
    assert issubclass(BudgetInfeasible, InifError) and issubclass(CorruptStream, InifError)
