"""Sinusoidal coordinate network: sizing, initialization, forward and backward.

Layer ``l`` computes ``sin(omega_l * (W_l a + b_l))`` except the last, which
is affine. Every layer owns a trainable frequency ``omega_l`` so the payload
layout is uniform; the last layer's frequency is stored but unused.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetInfeasible, DataError

_MODULE = "siren-net"

DEFAULT_DEPTH = 7
MIN_HIDDEN = 4
FIRST_OMEGA = 30.0
HIDDEN_OMEGA = 1.0

# INIF header bytes that do not depend on shape, channels or depth; see
# fileformat.header_size for the exact accounting.
HEADER_FIXED_BYTES = 39


def default_omegas(depth: int) -> tuple[float, ...]:
    return (FIRST_OMEGA,) + (HIDDEN_OMEGA,) * (depth - 1)


@dataclass(frozen=True)
class SirenArchitecture:
    in_dim: int
    out_dim: int
    hidden: int
    depth: int = DEFAULT_DEPTH
    omega0: tuple[float, ...] = ()

    def __post_init__(self):
        if not self.omega0:
            object.__setattr__(self, "omega0", default_omegas(self.depth))
        object.__setattr__(self, "omega0", tuple(float(w) for w in self.omega0))
        if self.depth < 2 or self.hidden < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise DataError(f"invalid architecture {self}", "SirenArchitecture", _MODULE)
        if len(self.omega0) != self.depth or any(not w > 0 for w in self.omega0):
            raise DataError("omega0 needs one positive value per layer", "SirenArchitecture", _MODULE)

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [self.hidden] * (self.depth - 1) + [self.out_dim]

    def layer_shapes(self) -> list[tuple[int, int]]:
        d = self.dims
        return [(d[i + 1], d[i]) for i in range(self.depth)]


def param_count(arch: SirenArchitecture) -> int:
    return sum(fo * fi + fo for fo, fi in arch.layer_shapes()) + arch.depth


def _count(in_dim, out_dim, hidden, depth):
    return param_count(SirenArchitecture(in_dim, out_dim, hidden, depth))


def width_for_budget(max_params: int, in_dim: int, out_dim: int, depth: int = DEFAULT_DEPTH) -> int:
    """Largest hidden width whose parameter count fits ``max_params`` (0 if none)."""
    # count = (depth-2) w^2 + (in + out + depth - 1) w + out + depth
    a = depth - 2
    b = in_dim + out_dim + depth - 1
    c = out_dim + depth - max_params
    if c > 0:
        return 0
    if a == 0:
        w = int(-c // b)
    else:
        w = int((-b + math.sqrt(b * b - 4 * a * c)) / (2 * a))
    w = max(w, 0)
    while w > 0 and _count(in_dim, out_dim, w, depth) > max_params:
        w -= 1
    while _count(in_dim, out_dim, w + 1, depth) <= max_params:
        w += 1
    return w


def default_overhead(out_dim: int, depth: int = DEFAULT_DEPTH, axes: int = 5) -> int:
    return HEADER_FIXED_BYTES + 4 * axes + 8 * out_dim + 4 * depth


def size_architecture(
    target_ratio: float,
    volume_bytes: int,
    in_dim: int,
    out_dim: int,
    overhead: int | None = None,
    depth: int = DEFAULT_DEPTH,
) -> SirenArchitecture:
    """Widest depth-``depth`` network whose stored file meets the target ratio.

    ``overhead`` is the byte count of everything in the file except the
    weights; it defaults to the largest plain INIF header for ``out_dim``.
    """
    if not target_ratio > 1:
        raise DataError(f"target ratio must exceed 1, got {target_ratio}", "size_architecture", _MODULE)
    if volume_bytes < 1:
        raise DataError("volume_bytes must be >= 1", "size_architecture", _MODULE)
    if overhead is None:
        overhead = default_overhead(out_dim, depth)
    budget = math.floor(volume_bytes / target_ratio)
    return architecture_for_budget(budget, in_dim, out_dim, overhead, depth)


def architecture_for_budget(
    budget_bytes: int, in_dim: int, out_dim: int, overhead: int, depth: int = DEFAULT_DEPTH
) -> SirenArchitecture:
    """Widest network whose weights plus ``overhead`` fit in ``budget_bytes``."""
    max_params = (int(budget_bytes) - overhead) // 4
    hidden = width_for_budget(max_params, in_dim, out_dim, depth) if max_params > 0 else 0
    if hidden < MIN_HIDDEN:
        smallest = min_network_bytes(in_dim, out_dim, overhead, depth)
        raise BudgetInfeasible(
            f"budget infeasible: {budget_bytes} bytes available, smallest network needs {smallest}",
            "size_architecture",
            _MODULE,
        )
    return SirenArchitecture(in_dim, out_dim, hidden, depth)


def min_network_bytes(in_dim: int, out_dim: int, overhead: int, depth: int = DEFAULT_DEPTH) -> int:
    return 4 * _count(in_dim, out_dim, MIN_HIDDEN, depth) + overhead


@dataclass
class SirenParams:
    """Weights, biases and per-layer frequencies, in payload order."""

    arch: SirenArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    omegas: list[np.ndarray] = field(default_factory=list)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b, om in zip(self.weights, self.biases, self.omegas):
            out.extend((w, b, om))
        return out

    @classmethod
    def from_tensors(cls, arch: SirenArchitecture, tensors) -> "SirenParams":
        tensors = list(tensors)
        if len(tensors) != 3 * arch.depth:
            raise DataError("tensor count does not match architecture", "SirenParams", _MODULE)
        p = cls(arch, tensors[0::3], tensors[1::3], tensors[2::3])
        p.check()
        return p

    def check(self):
        for (fo, fi), w, b, om in zip(self.arch.layer_shapes(), self.weights, self.biases, self.omegas):
            if w.shape != (fo, fi) or b.shape != (fo,) or om.shape != ():
                raise DataError("parameter shapes do not match architecture", "SirenParams", _MODULE)

    def flat(self, dtype=np.float64) -> np.ndarray:
        return np.concatenate([np.asarray(t, dtype).ravel() for t in self.tensors()])

    @classmethod
    def from_flat(cls, arch: SirenArchitecture, flat) -> "SirenParams":
        flat = np.asarray(flat)
        if flat.size != param_count(arch):
            raise DataError(
                f"payload holds {flat.size} values, architecture needs {param_count(arch)}",
                "SirenParams",
                _MODULE,
            )
        tensors, pos = [], 0
        for fo, fi in arch.layer_shapes():
            for shape in ((fo, fi), (fo,), ()):
                n = int(np.prod(shape))
                tensors.append(flat[pos : pos + n].reshape(shape).copy())
                pos += n
        return cls.from_tensors(arch, tensors)

    def astype(self, dtype) -> "SirenParams":
        return SirenParams(
            self.arch,
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            [np.asarray(o, dtype) for o in self.omegas],
        )

    def quantized(self) -> "SirenParams":
        """The values exactly as stored on disk (single precision), held as float64."""
        return self.astype(np.float32).astype(np.float64)


def init_siren(arch: SirenArchitecture, seed: int) -> SirenParams:
    rng = np.random.default_rng(seed)
    weights, biases, omegas = [], [], []
    for layer, (fo, fi) in enumerate(arch.layer_shapes()):
        omega = arch.omega0[layer]
        bound = 1.0 / fi if layer == 0 else math.sqrt(6.0 / fi) / omega
        weights.append(rng.uniform(-bound, bound, size=(fo, fi)))
        bb = 1.0 / math.sqrt(fi)
        biases.append(rng.uniform(-bb, bb, size=fo))
        omegas.append(np.asarray(omega, dtype=np.float64))
    return SirenParams(arch, weights, biases, omegas)


@dataclass
class ForwardTrace:
    """Layer inputs and pre-frequency sums retained for the backward pass."""

    inputs: list[np.ndarray]
    sums: list[np.ndarray]

    @property
    def batch(self) -> int:
        return self.inputs[0].shape[0]


def forward_batch(params: SirenParams, coords) -> tuple[np.ndarray, ForwardTrace]:
    """Batched forward pass in float64.

    Affine maps go through ``einsum`` rather than BLAS so every row's value
    is independent of the other rows in the batch. Decoding uses the
    sequential per-point kernel in :func:`inif.fileformat.evaluate`.
    """
    a = np.asarray(coords, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != params.arch.in_dim:
        raise DataError(
            f"coordinate arity {a.shape[-1] if a.ndim else 0} != in_dim {params.arch.in_dim}",
            "forward_batch",
            _MODULE,
        )
    inputs, sums = [], []
    last = params.arch.depth - 1
    for layer, (w, b, om) in enumerate(zip(params.weights, params.biases, params.omegas)):
        inputs.append(a)
        z = np.einsum("nk,ok->no", a, w) + b
        sums.append(z)
        a = np.sin(om * z) if layer < last else z
    return a, ForwardTrace(inputs, sums)


def backward_batch(params: SirenParams, trace: ForwardTrace, output_grad) -> list[np.ndarray]:
    """Gradients matching ``params.tensors()`` order: dW, db, d(omega) per layer."""
    g = np.asarray(output_grad, dtype=np.float64)
    depth = params.arch.depth
    if len(trace.inputs) != depth or g.shape != (trace.batch, params.arch.out_dim):
        raise DataError("trace does not match parameters", "backward_batch", _MODULE)
    for (fo, fi), a, z in zip(params.arch.layer_shapes(), trace.inputs, trace.sums):
        if a.shape[1] != fi or z.shape[1] != fo:
            raise DataError("trace does not match parameters", "backward_batch", _MODULE)
    grads: list[np.ndarray] = [None] * (3 * depth)
    for layer in range(depth - 1, -1, -1):
        a = trace.inputs[layer]
        z = trace.sums[layer]
        w = params.weights[layer]
        if layer == depth - 1:
            dz = g
            domega = np.zeros(())
        else:
            om = params.omegas[layer]
            gu = g * np.cos(om * z)
            domega = np.asarray(np.sum(gu * z))
            dz = gu * om
        grads[3 * layer] = dz.T @ a
        grads[3 * layer + 1] = dz.sum(axis=0)
        grads[3 * layer + 2] = domega
        if layer:
            g = dz @ w
    return grads
