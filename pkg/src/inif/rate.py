"""Rate control for the block codec and residual computation for hybrid mode.

Distortion follows the hyperbolic model ``D = C * R ** -K``; its slope gives
``lambda = C * K * R ** (-K - 1)`` and QP follows from
``QP = 4.2005 * ln(lambda) + 13.7122``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .codec import (
    BlockCodecConfig,
    Bitstream,
    dequantize,
    encode_levels,
    idct2,
    qp_max,
    q_step,
    quantize,
    transform,
    _from_blocks,
    _cast,
    zigzag_order,
)
from .errors import BudgetInfeasible, DataError
from .volume import INTENSITY_SCALE, NormalizationParams, Volume, normalize_intensity

_MODULE = "codec-prior"

QP_C1 = 4.2005
QP_C2 = 13.7122
PROBE_QPS = (22, 30, 38)


def qp_from_lambda(lam: float) -> float:
    if not lam > 0:
        raise DataError(f"lambda must be positive, got {lam}", "qp_from_lambda", _MODULE)
    return QP_C1 * math.log(lam) + QP_C2


def lambda_from_qp(qp: float) -> float:
    return math.exp((qp - QP_C2) / QP_C1)


@dataclass(frozen=True)
class RateModel:
    C: float
    K: float
    alpha: float
    beta: float
    c1: float = QP_C1
    c2: float = QP_C2

    @classmethod
    def from_dr(cls, C: float, K: float) -> "RateModel":
        if not (C > 0 and K > 0):
            raise DataError(f"rate model needs C > 0 and K > 0, got C={C}, K={K}", "RateModel", _MODULE)
        return cls(C, K, C * K, -K - 1.0)

    def distortion(self, R: float) -> float:
        return self.C * R ** (-self.K)


def lambda_from_rate(model: RateModel, R: float) -> float:
    if not R > 0:
        raise DataError(f"rate must be positive, got {R}", "lambda_from_rate", _MODULE)
    return model.alpha * R**model.beta


def fit_rate_model(samples) -> RateModel:
    """Least-squares fit of ``ln D = ln C - K ln R`` over (R, D) samples."""
    pts = np.asarray(list(samples), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise DataError("degenerate samples: need at least two (R, D) pairs", "fit_rate_model", _MODULE)
    R, D = pts[:, 0], pts[:, 1]
    if np.any(R <= 0) or np.any(D <= 0):
        raise DataError("degenerate samples: R and D must be positive", "fit_rate_model", _MODULE)
    if len(np.unique(R)) != len(R):
        raise DataError("degenerate samples: duplicated R", "fit_rate_model", _MODULE)
    x, y = np.log(R), np.log(D)
    A = np.stack([np.ones_like(x), -x], axis=1)
    (lnC, K), *_ = np.linalg.lstsq(A, y, rcond=None)
    return RateModel.from_dr(math.exp(lnC), float(K))


def allocate_bits(total_budget_bytes: int, split: float = 0.9, min_codec: int = 1, min_inr: int = 1):
    """Split a byte budget between the codec stream and the network."""
    total = int(total_budget_bytes)
    if not 0 < split <= 1:
        raise DataError(f"split must be in (0, 1], got {split}", "allocate_bits", _MODULE)
    codec = math.floor(total * split)
    inr = total - codec
    if codec < max(min_codec, 1) or inr < max(min_inr, 1):
        raise BudgetInfeasible(
            f"budget infeasible: {total} bytes split {split:g} gives codec {codec}, network {inr}",
            "allocate_bits",
            _MODULE,
        )
    return codec, inr


@dataclass
class RateControlResult:
    stream: Bitstream
    qp: int
    lam: float
    probes: list[tuple[int, int, float]]
    model: RateModel | None
    dropped: int


class _Encoder:
    """Caches the transform of one volume and encodes it at any QP."""

    def __init__(self, v: Volume, block: int):
        self.v = v
        self.block = block
        self.coefs = transform(v, block)
        self.cache: dict[int, tuple[Bitstream, np.ndarray, np.ndarray]] = {}

    def levels(self, qp):
        return quantize(self.coefs, qp)

    def encode(self, qp: int) -> Bitstream:
        if qp not in self.cache:
            dc, ac = self.levels(qp)
            bs = encode_levels(BlockCodecConfig(self.block, qp), self.v.dtype, self.v.shape, dc, ac)
            self.cache[qp] = (bs, dc, ac)
        return self.cache[qp][0]

    def size(self, qp: int) -> int:
        return self.encode(qp).nbytes

    def distortion(self, qp: int) -> float:
        bs, dc, ac = self.cache[qp]
        return self.mse_of(dc, ac, qp)

    def mse_of(self, dc, ac, qp) -> float:
        rec = _cast(_from_blocks(idct2(dequantize(dc, ac, qp, self.block)), self.v.shape, self.block), self.v.dtype)
        ref = self.v.data.reshape(rec.shape).astype(np.float64)
        return float(np.mean((rec.astype(np.float64) - ref) ** 2))


def _warm_start(model: RateModel, probes, target: int, qmax: int) -> int:
    """QP guess from the model slope at ``target`` through the lambda-QP law.

    The law's slope is kept; its intercept is re-estimated from the probes
    because this codec's rate and distortion units differ from the
    encoder the constants were fitted on.
    """
    offsets = [q - QP_C1 * math.log(lambda_from_rate(model, r)) for q, r, _ in probes]
    guess = QP_C1 * math.log(lambda_from_rate(model, target)) + float(np.mean(offsets))
    return int(np.clip(round(guess), 0, qmax))


def _drop_to_target(enc: _Encoder, qp: int, target: int):
    """Zero the least useful AC levels at ``qp`` until the stream fits ``target``."""
    dc, ac = enc.levels(qp)
    nz = np.flatnonzero(ac)
    if nz.size == 0:
        return None
    q = q_step(qp)
    # distortion added by zeroing each level, smallest first; ties by position
    flat = enc.coefs.reshape(enc.coefs.shape[0], enc.coefs.shape[1], -1)[..., zigzag_order(enc.block)][..., 1:]
    c = flat.reshape(-1)[nz]
    lv = ac.reshape(-1)[nz]
    cost = c * c - (c - lv * q) ** 2
    order = nz[np.lexsort((nz, cost))]

    def encoded(n):
        a = ac.reshape(-1).copy()
        a[order[:n]] = 0
        a = a.reshape(ac.shape)
        return encode_levels(BlockCodecConfig(enc.block, qp), enc.v.dtype, enc.v.shape, dc, a)

    lo, hi = 0, order.size  # encoded(hi) drops every AC level
    if encoded(hi).nbytes > target:
        return None
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if encoded(mid).nbytes <= target:
            hi = mid
        else:
            lo = mid
    return encoded(hi), hi


def rate_control_encode(v: Volume, target_bytes: int, block: int = 8, refine: bool = True) -> RateControlResult:
    """Encode ``v`` in at most ``target_bytes`` bytes (stream header included).

    Probe encodes seed the rate model, which warm-starts an integer bisection
    for the smallest QP that fits. With ``refine`` the next finer QP is then
    tried with its least useful AC levels zeroed, bringing the size to within
    a few symbols of the target.
    """
    target = int(target_bytes)
    qmax = qp_max(v.dtype)
    enc = _Encoder(v, block)
    probes = []
    for qp in PROBE_QPS:
        if qp <= qmax:
            probes.append((qp, enc.size(qp), enc.distortion(qp)))
    model = None
    start = qmax // 2
    usable = [(q, r, d) for q, r, d in probes if d > 0]
    if len(usable) >= 2 and len({r for _, r, _ in usable}) == len(usable):
        try:
            model = fit_rate_model([(r, d) for _, r, d in usable])
            start = _warm_start(model, usable, target, qmax)
        except (DataError, ValueError, OverflowError):
            model = None
    if enc.size(qmax) > target:
        raise BudgetInfeasible(
            f"target infeasible: {target} bytes, smallest stream is {enc.size(qmax)} bytes at QP {qmax}",
            "rate_control_encode",
            _MODULE,
        )
    # bracket [lo, hi] with size(lo) > target >= size(hi)
    if enc.size(start) <= target:
        hi, step = start, 1
        lo = hi - step
        while lo >= 0 and enc.size(lo) <= target:
            hi = lo
            step *= 2
            lo = hi - step
        lo = max(lo, -1)
    else:
        lo, step = start, 1
        hi = lo + step
        while hi < qmax and enc.size(hi) > target:
            lo = hi
            step *= 2
            hi = min(lo + step, qmax)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if enc.size(mid) <= target:
            hi = mid
        else:
            lo = mid
    qp = hi
    while enc.size(qp) > target:  # guards a non-monotone size curve
        qp += 1
    stream, dropped = enc.encode(qp), 0
    if refine and qp > 0:
        got = _drop_to_target(enc, qp - 1, target)
        if got is not None:
            stream, dropped = got
            qp -= 1
    return RateControlResult(stream, qp, lambda_from_qp(qp), probes, model, dropped)


def compute_residual(raw: Volume, codec_decoded: Volume, params: NormalizationParams | None = None):
    """``raw - decoded`` in the raw volume's normalized intensity space."""
    if raw.shape != codec_decoded.shape:
        raise DataError(f"shape mismatch {raw.shape} vs {codec_decoded.shape}", "compute_residual", _MODULE)
    n_raw, p = normalize_intensity(raw)
    if params is None:
        params = p
    return n_raw - normalize_with(codec_decoded.data, params)


def normalize_with(data, params: NormalizationParams) -> np.ndarray:
    """Normalize ``data`` with another volume's per-channel range.

    Same arithmetic as ``normalize_intensity``, so a volume normalized with
    its own parameters gives identical values either way.
    """
    lo, hi = params.arrays()
    span = hi - lo
    scale = np.where(span > 0, INTENSITY_SCALE / np.where(span > 0, span, 1.0), 0.0)
    shape = (1, -1, 1, 1, 1)
    return (np.asarray(data, np.float64) - lo.reshape(shape)) * scale.reshape(shape)
