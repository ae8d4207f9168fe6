"""Training losses with gradients, and full-reference quality metrics.

All losses return ``(value, grad)`` with the gradient taken with respect to
the first (predicted) argument. Images are in normalized intensity space
[0, 100] unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import DataError
from .volume import INTENSITY_SCALE

_MODULE = "guidance"


# ---------------------------------------------------------------- pixel loss


def mse_loss(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {truth.shape}", "mse_loss", _MODULE)
    n = pred.size
    if n == 0:
        raise DataError("mse of empty arrays", "mse_loss", _MODULE)
    diff = pred - truth
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


# ---------------------------------------------------------------- segmentation


@dataclass(frozen=True)
class SoftSegConfig:
    sigma: float = 1.0
    tau: float = 50.0
    sharpness: float = 5.0
    min_object: int = 20
    # evaluation-path contrast stretch: [mean - lo*std, mean + hi*std]
    stretch: tuple[float, float] = (1.5, 10.5)
    stretch_mode: str = "std"

    def __post_init__(self):
        if self.sigma < 0 or not self.sharpness > 0 or not 0 <= self.tau <= INTENSITY_SCALE:
            raise DataError(f"invalid segmentation config {self}", "SoftSegConfig", _MODULE)
        if self.stretch_mode not in ("std", "percentile"):
            raise DataError(f"unknown stretch mode {self.stretch_mode!r}", "SoftSegConfig", _MODULE)


def _smooth(img, sigma):
    # zero padding keeps the operator symmetric, so it is its own adjoint
    if sigma == 0:
        return np.array(img, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="constant", cval=0.0)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def soft_segment(img, cfg: SoftSegConfig = SoftSegConfig()):
    """Differentiable segmentation proxy: smoothing then a logistic threshold."""
    return _logistic((_smooth(img, cfg.sigma) - cfg.tau) / cfg.sharpness)


def soft_iou(a, b):
    """Soft IoU ``sum(min) / sum(max)`` of two masks, with both-empty giving 1."""
    den = float(np.sum(np.maximum(a, b)))
    if den == 0.0:
        return 1.0
    return float(np.sum(np.minimum(a, b))) / den


def soft_iou_loss(pred_img, truth_img, cfg: SoftSegConfig = SoftSegConfig()):
    pred_img = np.asarray(pred_img, dtype=np.float64)
    truth_img = np.asarray(truth_img, dtype=np.float64)
    if pred_img.shape != truth_img.shape:
        raise DataError(f"shape mismatch {pred_img.shape} vs {truth_img.shape}", "soft_iou_loss", _MODULE)
    a = soft_segment(pred_img, cfg)
    b = soft_segment(truth_img, cfg)
    inter = float(np.sum(np.minimum(a, b)))
    union = float(np.sum(np.maximum(a, b)))
    if union == 0.0:
        return 0.0, np.zeros_like(pred_img)
    # ties split the subgradient evenly between min and max
    dmin = np.where(a < b, 1.0, np.where(a == b, 0.5, 0.0))
    dmax = 1.0 - dmin
    d_iou = (dmin * union - dmax * inter) / (union * union)
    d_pre = -d_iou * a * (1.0 - a) / cfg.sharpness
    return 1.0 - inter / union, _smooth(d_pre, cfg.sigma)


def _contrast_stretch(img, cfg):
    lo_p, hi_p = cfg.stretch
    if cfg.stretch_mode == "std":
        mu, sd = float(np.mean(img)), float(np.std(img))
        lo, hi = mu - lo_p * sd, mu + hi_p * sd
    else:
        lo, hi = np.percentile(img, [lo_p, 100.0 - hi_p])
    if hi <= lo:
        return np.zeros_like(img, dtype=np.float64)
    return np.clip((img - lo) / (hi - lo), 0.0, 1.0)


def hard_segment(img, cfg: SoftSegConfig = SoftSegConfig(), threshold: float | None = None):
    """Report-time binary segmentation: stretch, smooth, threshold, drop small objects.

    The default cutoff is Otsu's threshold of the smoothed, stretched image.
    """
    img = np.asarray(img, dtype=np.float64)
    work = _contrast_stretch(img, cfg)
    if cfg.sigma > 0:
        work = ndimage.gaussian_filter(work, cfg.sigma, mode="nearest")
    if threshold is None:
        if np.ptp(work) == 0:
            return np.zeros(work.shape, dtype=bool)
        threshold = threshold_otsu(work)
    mask = work > threshold
    if cfg.min_object > 1 and mask.any():
        labels, n = ndimage.label(mask)
        sizes = np.bincount(labels.ravel())
        keep = sizes >= cfg.min_object
        keep[0] = False
        mask = keep[labels]
    return mask


def iou(a, b) -> float:
    """IoU of two boolean masks; both empty gives 1, one empty gives 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


# ---------------------------------------------------------------- perceptual


def _conv_valid(x, k, stride):
    # x (Cin, H, W), k (Cout, Cin, kh, kw)
    kh, kw = k.shape[2:]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    return np.einsum("oikl,ihwkl->ohw", k, win, optimize=True)


def _conv_valid_grad(g, k, stride, in_shape):
    kh, kw = k.shape[2:]
    ho, wo = g.shape[1:]
    dx = np.zeros(in_shape)
    for p in range(kh):
        for q in range(kw):
            dx[:, p : p + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride] += np.einsum(
                "oi,ohw->ihw", k[:, :, p, q], g
            )
    return dx


@dataclass
class FeatureExtractor:
    """Fixed, seeded convolutional feature stack for the perceptual loss.

    Kernels are zero-mean, so every stage ignores a constant offset of its
    input. Features are unit-normalized across channels at each location
    before distances are taken.
    """

    kernels: list[np.ndarray]
    weights: list[float]
    stride: int = 2
    slope: float = 0.2
    input_scale: float = 1.0 / INTENSITY_SCALE
    eps: float = 1e-10

    @classmethod
    def seeded(cls, seed: int = 0, channels: Sequence[int] = (16, 32, 64), weights=None, ksize: int = 3):
        rng = np.random.default_rng(seed)
        kernels, cin = [], 1
        for cout in channels:
            k = rng.standard_normal((cout, cin, ksize, ksize))
            k -= k.mean(axis=(2, 3), keepdims=True)
            k /= math.sqrt(cin * ksize * ksize)
            kernels.append(k)
            cin = cout
        if weights is None:
            weights = [1.0] * len(channels)
        return cls(kernels, [float(w) for w in weights])

    def __post_init__(self):
        if len(self.weights) != len(self.kernels) or any(w < 0 for w in self.weights):
            raise DataError("need one non-negative weight per stage", "FeatureExtractor", _MODULE)

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k in self.kernels:
            rf += (k.shape[-1] - 1) * jump
            jump *= self.stride
        return rf

    def _forward(self, patch):
        x = np.asarray(patch, dtype=np.float64)[None] * self.input_scale
        cache, maps = [], []
        for k in self.kernels:
            pre = _conv_valid(x, k, self.stride)
            act = np.where(pre > 0, pre, self.slope * pre)
            norm = np.sqrt(np.sum(act * act, axis=0, keepdims=True) + self.eps)
            cache.append((x, pre, act, norm))
            maps.append(act / norm)
            x = act
        return maps, cache

    def features(self, patch) -> list[np.ndarray]:
        self._check(patch)
        return self._forward(patch)[0]

    def _check(self, patch):
        patch = np.asarray(patch)
        if patch.ndim != 2:
            raise DataError("perceptual patches are 2D", "perceptual_loss", _MODULE)
        if min(patch.shape) < self.receptive_field:
            raise DataError(
                f"patch {patch.shape} smaller than receptive field {self.receptive_field}",
                "perceptual_loss",
                _MODULE,
            )


def perceptual_loss(pred_patch, ref_patch, extractor: FeatureExtractor):
    """Weighted per-stage mean squared distance between normalized feature maps."""
    pred_patch = np.asarray(pred_patch, dtype=np.float64)
    ref_patch = np.asarray(ref_patch, dtype=np.float64)
    if pred_patch.shape != ref_patch.shape:
        raise DataError(f"shape mismatch {pred_patch.shape} vs {ref_patch.shape}", "perceptual_loss", _MODULE)
    extractor._check(pred_patch)
    maps_p, cache = extractor._forward(pred_patch)
    maps_r, _ = extractor._forward(ref_patch)
    total = 0.0
    dmaps = []
    for w, fp, fr in zip(extractor.weights, maps_p, maps_r):
        hw = fp.shape[1] * fp.shape[2]
        diff = w * (fp - fr)
        total += float(np.sum(diff * diff)) / hw
        dmaps.append(2.0 * w * diff / hw)
    # backward through the stack; each stage's normalized map feeds the
    # loss and its activation feeds the next stage
    g_act = None
    for i in range(len(extractor.kernels) - 1, -1, -1):
        x, pre, act, norm = cache[i]
        gphi = dmaps[i]
        phi = act / norm
        g = (gphi - phi * np.sum(gphi * phi, axis=0, keepdims=True)) / norm
        if g_act is not None:
            g = g + g_act
        g_pre = g * np.where(pre > 0, 1.0, extractor.slope)
        g_act = _conv_valid_grad(g_pre, extractor.kernels[i], extractor.stride, x.shape)
    return total, g_act[0] * extractor.input_scale


@dataclass(frozen=True)
class GuidancePatch:
    plane: tuple[int, int, int]  # (t, c, z)
    y0: int
    x0: int
    size: int

    def indices(self) -> np.ndarray:
        """(size*size, 5) TCZYX indices of the patch in row-major order."""
        yy, xx = np.meshgrid(
            np.arange(self.y0, self.y0 + self.size), np.arange(self.x0, self.x0 + self.size), indexing="ij"
        )
        n = self.size * self.size
        out = np.empty((n, 5), dtype=np.int64)
        out[:, :3] = self.plane
        out[:, 3] = yy.ravel()
        out[:, 4] = xx.ravel()
        return out

    def slice_of(self, vol5d) -> np.ndarray:
        t, c, z = self.plane
        return np.asarray(vol5d)[t, c, z, self.y0 : self.y0 + self.size, self.x0 : self.x0 + self.size]


def random_patch(shape5d, patch_size: int, rng: np.random.Generator, channel: int | None = None) -> GuidancePatch:
    T, C, Z, Y, X = shape5d
    if patch_size > Y or patch_size > X:
        raise DataError(f"patch size {patch_size} exceeds plane {Y}x{X}", "sample_guidance_patches", _MODULE)
    t = int(rng.integers(T))
    c = int(rng.integers(C)) if channel is None else channel
    z = int(rng.integers(Z))
    y0 = int(rng.integers(Y - patch_size + 1))
    x0 = int(rng.integers(X - patch_size + 1))
    return GuidancePatch((t, c, z), y0, x0, patch_size)


def sample_guidance_patches(
    recon_source,
    reference_volume,
    patch_size: int,
    seed: int | np.random.Generator,
    shape=None,
):
    """Pick one random patch from the reconstruction and one from the reference.

    ``recon_source`` is either a 5D array or a callable mapping an (N, 5)
    index array to N values (the current network); ``shape`` gives the
    reconstruction grid when it is a callable. Returns
    ``(pred_patch, ref_patch, pred_location, ref_location)``.
    """
    if reference_volume is None:
        raise DataError("perceptual guidance needs a reference volume", "sample_guidance_patches", _MODULE)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ref = np.asarray(reference_volume)
    if ref.ndim != 5:
        raise DataError("reference volume must be 5D", "sample_guidance_patches", _MODULE)
    callable_src = callable(recon_source)
    if shape is None:
        if callable_src:
            raise DataError("shape is required for a callable source", "sample_guidance_patches", _MODULE)
        shape = np.shape(recon_source)
    loc_p = random_patch(shape, patch_size, rng)
    loc_r = random_patch(ref.shape, patch_size, rng)
    if callable_src:
        pred = np.asarray(recon_source(loc_p.indices()), dtype=np.float64).reshape(patch_size, patch_size)
    else:
        pred = loc_p.slice_of(recon_source).astype(np.float64)
    return pred, loc_r.slice_of(ref).astype(np.float64), loc_p, loc_r


# ---------------------------------------------------------------- composition


@dataclass
class LossTerm:
    name: str
    weight: float
    value: float
    grad: np.ndarray


def compose_loss(terms: Sequence[LossTerm]):
    """Weighted sum of loss terms and of their gradients."""
    if not terms:
        raise DataError("compose_loss needs at least one term", "compose_loss", _MODULE)
    total = 0.0
    grad = None
    for t in terms:
        if t.weight < 0 or not math.isfinite(t.weight):
            raise DataError(f"negative weight for term {t.name}", "compose_loss", _MODULE)
        total += t.weight * t.value
        g = t.weight * np.asarray(t.grad, dtype=np.float64)
        grad = g if grad is None else grad + g
    return total, grad


# ---------------------------------------------------------------- metrics


def mse(pred, truth) -> float:
    return mse_loss(pred, truth)[0]


def psnr(pred, truth, peak: float = INTENSITY_SCALE) -> float:
    """PSNR in dB; ``math.inf`` when the inputs are identical."""
    m = mse(pred, truth)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def _window_means(x, window):
    view = sliding_window_view(x, window)
    axes = tuple(range(x.ndim, 2 * x.ndim))
    return view.mean(axis=axes)


def ssim(pred, truth, peak: float = INTENSITY_SCALE, window: int | Sequence[int] = 7) -> float:
    """Mean structural similarity over all fully contained uniform windows.

    Uses the combined form of luminance, contrast and structure, which is
    exact for ``c3 = c2 / 2``.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError(f"shape mismatch {x.shape} vs {y.shape}", "ssim", _MODULE)
    win = (window,) * x.ndim if np.isscalar(window) else tuple(window)
    if len(win) != x.ndim or any(w > n for w, n in zip(win, x.shape)) or x.ndim == 0:
        raise DataError(f"window {win} larger than image {x.shape}", "ssim", _MODULE)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx, my = _window_means(x, win), _window_means(y, win)
    sxx = _window_means(x * x, win) - mx * mx
    syy = _window_means(y * y, win) - my * my
    sxy = _window_means(x * y, win) - mx * my
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


def ssim_volume(pred5d, truth5d, peak: float = INTENSITY_SCALE, window: int = 7) -> float:
    """SSIM averaged over (t, c) of the spatial block, window clipped to each axis."""
    p = np.asarray(pred5d, dtype=np.float64)
    t = np.asarray(truth5d, dtype=np.float64)
    spatial = [ax for ax in (2, 3, 4) if p.shape[ax] > 1] or [4]
    win = tuple(min(window, p.shape[ax]) for ax in spatial)
    vals = []
    for ti in range(p.shape[0]):
        for ci in range(p.shape[1]):
            a = p[ti, ci].reshape([p.shape[ax] for ax in spatial])
            b = t[ti, ci].reshape([p.shape[ax] for ax in spatial])
            vals.append(ssim(a, b, peak, win))
    return float(np.mean(vals))


@dataclass
class QualityReport:
    mse: float
    psnr: float
    ssim: float
    iou: float | None = None
    count: int = 0

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr)

    def lines(self) -> list[str]:
        out = [
            f"mse={self.mse:.6g}",
            f"psnr_db={'inf' if self.psnr_infinite else f'{self.psnr:.4f}'}",
            f"ssim={self.ssim:.6f}",
        ]
        if self.iou is not None:
            out.append(f"iou={self.iou:.6f}")
        out.append(f"voxels={self.count}")
        return out


def quality_report(pred5d, truth5d, peak: float = INTENSITY_SCALE, seg: SoftSegConfig | None = None) -> QualityReport:
    """Full-reference comparison of two 5D arrays in the same intensity space."""
    p = np.asarray(pred5d, dtype=np.float64)
    t = np.asarray(truth5d, dtype=np.float64)
    m = mse(p, t)
    value_iou = None
    if seg is not None:
        value_iou = iou(hard_segment(np.squeeze(p), seg), hard_segment(np.squeeze(t), seg))
    return QualityReport(m, psnr(p, t, peak), ssim_volume(p, t, peak), value_iou, p.size)
