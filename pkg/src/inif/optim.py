"""Parameter-update engines.

``adam_step`` is the default conventional optimizer. The learned optimizer
is a hierarchical update rule: a per-tensor gated recurrent controller reads
training-state features and emits, for each tensor, the weights of a tiny
per-parameter MLP plus a direction scale ``d`` and log learning rate
``c_lr``. The MLP maps each parameter's gradient statistics to a raw update
that is rescaled by ``0.001 * d * exp(0.001 * c_lr) * ||theta||_2``.

No pretrained weights ship with this package. Without a weight bundle the
controller is hand-initialized: its head is wired so the update behaves like
normalized-momentum descent with a warm-up and a late decay, and the
recurrent path only adds a small perturbation.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DivergenceError, MalformedBundle

_MODULE = "optim"

ADAM, LEARNED = "adam", "learned"
OPTIMIZER_IDS = {ADAM: 0, LEARNED: 1}

# ---------------------------------------------------------------- Adam

DEFAULT_ADAM_LR = 0.01


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = DEFAULT_ADAM_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(tensors, lr: float = DEFAULT_ADAM_LR, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        [np.zeros_like(t, dtype=np.float64) for t in tensors],
        [np.zeros_like(t, dtype=np.float64) for t in tensors],
        0,
        lr,
        beta1,
        beta2,
        eps,
    )


def _check_grads(tensors, grads, op):
    if len(tensors) != len(grads) or any(np.shape(p) != np.shape(g) for p, g in zip(tensors, grads)):
        raise DataError("gradient shapes do not match parameters", op, _MODULE)
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("diverged: non-finite gradient", op, _MODULE)


def adam_step(state: AdamState, tensors, grads):
    """One bias-corrected adaptive-moment update. Inputs are not modified."""
    _check_grads(tensors, grads, "adam_step")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    m_new, v_new, out = [], [], []
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * np.square(g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        m_new.append(m)
        v_new.append(v)
        out.append(p - step)
    new_state = AdamState(m_new, v_new, t, state.lr, b1, b2, state.eps)
    return new_state, out


# ---------------------------------------------------------------- features

PROGRESS_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
EMA_DECAYS = (0.5, 0.9, 0.99, 0.999)
MOMENTUM_DECAYS = (0.5, 0.9, 0.99)
SECOND_MOMENT_DECAY = 0.999
RANK_SLOTS = 4
CONTROLLER_WIDTH = 512
PREDICTOR_HIDDEN = (4, 4)
N_PARAM_FEATURES = 2 + len(MOMENTUM_DECAYS)
N_TENSOR_FEATURES = len(PROGRESS_THRESHOLDS) + len(EMA_DECAYS) + 1 + 2 * len(MOMENTUM_DECAYS) + RANK_SLOTS + 1

_SIZE_FEATURE = N_TENSOR_FEATURES - 1
_TINY = 1e-30


def progress_features(t: int, T: int, thresholds=PROGRESS_THRESHOLDS) -> np.ndarray:
    """Soft training-progress values ``tanh(10 (t/T - s))`` for each threshold."""
    if T <= 0:
        raise DataError("total iterations T must be positive", "progress_features", _MODULE)
    if not 0 <= t <= T:
        raise DataError(f"iteration {t} outside [0, {T}]", "progress_features", _MODULE)
    return np.tanh(10.0 * (t / T - np.asarray(thresholds, dtype=np.float64)))


@dataclass
class LossTracker:
    """EMA bank and running minimum of the loss."""

    ema: np.ndarray = field(default_factory=lambda: np.zeros(len(EMA_DECAYS)))
    minimum: float = math.inf
    count: int = 0

    def observe(self, loss: float) -> np.ndarray:
        """Features for ``loss`` against the history seen so far, then record it.

        Each feature is the relative change of ``loss`` from an EMA (or the
        running minimum) clamped to [-1, 1]: negative when the loss is going
        down, positive when it goes up, zero when it is flat.
        """
        loss = float(loss)
        if not math.isfinite(loss):
            raise DivergenceError("diverged: non-finite loss", "loss_features", _MODULE)
        if self.count == 0:
            feats = np.zeros(len(EMA_DECAYS) + 1)
            self.ema = np.full(len(EMA_DECAYS), loss)
            self.minimum = loss
        else:
            refs = np.append(self.ema, self.minimum)
            feats = np.clip((loss - refs) / (np.abs(refs) + _TINY), -1.0, 1.0)
            decays = np.asarray(EMA_DECAYS)
            self.ema = decays * self.ema + (1.0 - decays) * loss
            self.minimum = min(self.minimum, loss)
        self.count += 1
        return feats


def loss_features(loss_history) -> np.ndarray:
    """Loss-trend features of the last entry of ``loss_history``."""
    history = list(loss_history)
    if not history:
        raise DataError("loss history is empty", "loss_features", _MODULE)
    tracker = LossTracker()
    for loss in history:
        feats = tracker.observe(loss)
    return feats


def _rank_onehot(ndim: int) -> np.ndarray:
    out = np.zeros(RANK_SLOTS)
    out[min(ndim, RANK_SLOTS - 1)] = 1.0
    return out


def normalized_momenta(momenta, second_moment, t: int) -> list[np.ndarray]:
    """Bias-corrected momenta divided by the root of the second moment."""
    if t == 0:
        return [np.zeros_like(m) for m in momenta]
    vhat = second_moment / (1.0 - SECOND_MOMENT_DECAY**t)
    inv = 1.0 / (np.sqrt(vhat) + _TINY)
    return [m / (1.0 - b**t) * inv for m, b in zip(momenta, MOMENTUM_DECAYS)]


def tensor_features(param_tensor, grad, momenta, second_moment=None, t: int = 0, T: int = 1,
                    loss_feats=None, progress_t: int | None = None) -> np.ndarray:
    """Per-tensor controller input: progress, loss trend, momentum moments, rank, size.

    ``t`` counts accumulated moment updates (for bias correction);
    ``progress_t`` is the step index fed to the progress features and
    defaults to ``min(t, T)``. The vector length is the same for every tensor
    shape. ``grad`` is read only through the momenta.
    """
    if progress_t is None:
        progress_t = min(t, T)
    param_tensor = np.asarray(param_tensor)
    if second_moment is None:
        second_moment = np.zeros_like(param_tensor, dtype=np.float64)
    if loss_feats is None:
        loss_feats = np.zeros(len(EMA_DECAYS) + 1)
    mn = normalized_momenta(momenta, second_moment, t)
    moments = []
    for m in mn:
        moments.extend((float(np.mean(m)), float(np.mean(np.square(m)))))
    return np.concatenate(
        [
            progress_features(progress_t, T),
            np.asarray(loss_feats, dtype=np.float64),
            np.asarray(moments),
            _rank_onehot(param_tensor.ndim),
            [math.log(max(param_tensor.size, 1)) / 10.0],
        ]
    )


def per_parameter_features(grad, momenta, second_moment, t: int) -> np.ndarray:
    """(n, 5) inputs of the per-parameter MLP: normalized grad, momenta, second moment."""
    g = np.asarray(grad, dtype=np.float64).ravel()
    if t == 0:
        return np.zeros((g.size, N_PARAM_FEATURES))
    vhat = second_moment.ravel() / (1.0 - SECOND_MOMENT_DECAY**t)
    root = np.sqrt(vhat)
    inv = 1.0 / (root + _TINY)
    mn = normalized_momenta([m.ravel() for m in momenta], second_moment.ravel(), t)
    rms = math.sqrt(float(np.mean(vhat))) + _TINY
    cols = [g * inv] + mn + [root / rms]
    return np.stack(cols, axis=1)


# ---------------------------------------------------------------- weights

PREDICTOR_SHAPES = (
    ("w1", (PREDICTOR_HIDDEN[0], N_PARAM_FEATURES)),
    ("b1", (PREDICTOR_HIDDEN[0],)),
    ("w2", (PREDICTOR_HIDDEN[1], PREDICTOR_HIDDEN[0])),
    ("b2", (PREDICTOR_HIDDEN[1],)),
    ("w3", (PREDICTOR_HIDDEN[1],)),
    ("b3", ()),
)
PREDICTOR_SIZE = sum(int(np.prod(s)) for _, s in PREDICTOR_SHAPES)
HEAD_OUTPUTS = 2 + PREDICTOR_SIZE

BUNDLE_LAYOUT = (
    ("gru.wx", (3 * CONTROLLER_WIDTH, N_TENSOR_FEATURES)),
    ("gru.wh", (3 * CONTROLLER_WIDTH, CONTROLLER_WIDTH)),
    ("gru.b", (3 * CONTROLLER_WIDTH,)),
    ("head.wh", (HEAD_OUTPUTS, CONTROLLER_WIDTH)),
    ("head.wx", (HEAD_OUTPUTS, N_TENSOR_FEATURES)),
    ("head.b", (HEAD_OUTPUTS,)),
)
BUNDLE_MAGIC = b"VOPT"

FALLBACK_SEED = 1729
# hand-set head of the fallback controller
FALLBACK_BASE_STEP = 15.0  # step scale before size normalization
FALLBACK_DECAY = 8.0  # overall late-training shrink of the step


def _unflatten_predictor(vec: np.ndarray) -> dict[str, np.ndarray]:
    out, pos = {}, 0
    for name, shape in PREDICTOR_SHAPES:
        n = int(np.prod(shape))
        out[name] = vec[pos : pos + n].reshape(shape)
        pos += n
    return out


def _flatten_predictor(parts: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(parts[name], np.float64).ravel() for name, _ in PREDICTOR_SHAPES])


def identity_predictor(feature: int) -> np.ndarray:
    """Flat predictor weights computing ``relu(x) - relu(-x) = x`` of one feature."""
    w1 = np.zeros((PREDICTOR_HIDDEN[0], N_PARAM_FEATURES))
    w1[0, feature], w1[1, feature] = 1.0, -1.0
    w2 = np.zeros((PREDICTOR_HIDDEN[1], PREDICTOR_HIDDEN[0]))
    w2[0, 0] = w2[1, 1] = 1.0
    w3 = np.zeros(PREDICTOR_HIDDEN[1])
    w3[0], w3[1] = 1.0, -1.0
    return _flatten_predictor(
        {"w1": w1, "b1": np.zeros(4), "w2": w2, "b2": np.zeros(4), "w3": w3, "b3": np.zeros(())}
    )


def fallback_weights(seed: int = FALLBACK_SEED) -> dict[str, np.ndarray]:
    """Seeded hand-initialized controller weights (float32, bundle layout)."""
    rng = np.random.default_rng(seed)
    gx = 1.0 / math.sqrt(N_TENSOR_FEATURES)
    gh = 1.0 / math.sqrt(CONTROLLER_WIDTH)
    w = {
        "gru.wx": rng.uniform(-gx, gx, (3 * CONTROLLER_WIDTH, N_TENSOR_FEATURES)),
        "gru.wh": rng.uniform(-gh, gh, (3 * CONTROLLER_WIDTH, CONTROLLER_WIDTH)),
        "gru.b": np.zeros(3 * CONTROLLER_WIDTH),
        "head.wh": rng.uniform(-1e-5, 1e-5, (HEAD_OUTPUTS, CONTROLLER_WIDTH)),
        "head.wx": np.zeros((HEAD_OUTPUTS, N_TENSOR_FEATURES)),
        "head.b": np.zeros(HEAD_OUTPUTS),
    }
    s0 = PROGRESS_THRESHOLDS.index(0.0)
    s9 = PROGRESS_THRESHOLDS.index(0.9)
    # d ramps from 0 with the s=0 progress feature
    w["head.wx"][0, s0] = 1.0
    # c_lr: base step, 1/sqrt(numel) size normalization, decay after 90%
    swing = np.tanh(10 * 0.1) + 1.0
    w["head.wx"][1, _SIZE_FEATURE] = -500.0 * 10.0
    w["head.wx"][1, s9] = -1000.0 * math.log(FALLBACK_DECAY) / swing
    w["head.b"][1] = 1000.0 * math.log(FALLBACK_BASE_STEP) - 1000.0 * math.log(FALLBACK_DECAY) / swing
    w["head.b"][2:] = identity_predictor(2)
    return {k: v.astype(np.float32) for k, v in w.items()}


def save_learned_weights(weights: dict[str, np.ndarray], path) -> None:
    chunks = [BUNDLE_MAGIC, struct.pack("<I", len(BUNDLE_LAYOUT))]
    for name, shape in BUNDLE_LAYOUT:
        arr = np.asarray(weights[name], dtype="<f4")
        if arr.shape != shape:
            raise MalformedBundle(f"tensor {name} has shape {arr.shape}, expected {shape}",
                                  "save_learned_weights", _MODULE)
        raw = name.encode("utf-8")
        chunks += [struct.pack("<B", len(raw)), raw, struct.pack("<I", arr.size), arr.tobytes()]
    Path(path).write_bytes(b"".join(chunks))


def parse_learned_weights(buf: bytes) -> dict[str, np.ndarray]:
    def bad(msg):
        return MalformedBundle(f"malformed bundle: {msg}", "load_learned_weights", _MODULE)

    if buf[:4] != BUNDLE_MAGIC:
        raise bad("bad magic")
    if len(buf) < 8:
        raise bad("truncated header")
    (count,) = struct.unpack_from("<I", buf, 4)
    if count != len(BUNDLE_LAYOUT):
        raise bad(f"expected {len(BUNDLE_LAYOUT)} tensors, found {count}")
    pos, out = 8, {}
    for name, shape in BUNDLE_LAYOUT:
        if pos >= len(buf):
            raise bad("truncated")
        n = buf[pos]
        pos += 1
        got = buf[pos : pos + n].decode("utf-8", errors="replace")
        pos += n
        if got != name:
            raise bad(f"expected tensor {name!r}, found {got!r}")
        if pos + 4 > len(buf):
            raise bad("truncated")
        (size,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if size != int(np.prod(shape)):
            raise bad(f"tensor {name} has {size} values, expected {int(np.prod(shape))}")
        if pos + 4 * size > len(buf):
            raise bad("truncated")
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise bad("trailing bytes")
    return out


def load_learned_weights(path=None, allow_fallback: bool = True):
    """Return ``(weights, provenance)``; provenance is ``'bundle'`` or ``'fallback'``."""
    if path is not None and Path(path).exists():
        return parse_learned_weights(Path(path).read_bytes()), "bundle"
    if not allow_fallback:
        raise MalformedBundle(f"weight bundle {path} not found", "load_learned_weights", _MODULE)
    return fallback_weights(), "fallback"


# ---------------------------------------------------------------- learned step


@dataclass
class LearnedOptState:
    weights: dict[str, np.ndarray]
    T: int
    t: int
    hidden: np.ndarray
    momenta: list[list[np.ndarray]]
    second: list[np.ndarray]
    loss: LossTracker


def learned_init(tensors, T: int, weights=None) -> LearnedOptState:
    """Learned-optimizer state for ``tensors`` over ``T`` total steps.

    There is deliberately no step-size argument.
    """
    if T < 1:
        raise DataError("total iterations T must be >= 1", "learned_init", _MODULE)
    if weights is None:
        weights, _ = load_learned_weights()
    w64 = {k: np.asarray(v, dtype=np.float64) for k, v in weights.items()}
    return LearnedOptState(
        weights=w64,
        T=int(T),
        t=0,
        hidden=np.zeros((len(tensors), CONTROLLER_WIDTH)),
        momenta=[[np.zeros(np.shape(p)) for _ in MOMENTUM_DECAYS] for p in tensors],
        second=[np.zeros(np.shape(p)) for p in tensors],
        loss=LossTracker(),
    )


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def controller_step(weights, hidden, features):
    """Advance the gated recurrent controller; return ``(hidden, head outputs)``."""
    H = CONTROLLER_WIDTH
    gx = features @ weights["gru.wx"].T + weights["gru.b"]
    z = _sigmoid(gx[:, :H] + hidden @ weights["gru.wh"][:H].T)
    r = _sigmoid(gx[:, H : 2 * H] + hidden @ weights["gru.wh"][H : 2 * H].T)
    cand = np.tanh(gx[:, 2 * H :] + (r * hidden) @ weights["gru.wh"][2 * H :].T)
    hidden = (1.0 - z) * hidden + z * cand
    head = hidden @ weights["head.wh"].T + features @ weights["head.wx"].T + weights["head.b"]
    return hidden, head


def predictor_forward(flat_weights, features) -> np.ndarray:
    p = _unflatten_predictor(np.asarray(flat_weights, dtype=np.float64))
    h = np.maximum(features @ p["w1"].T + p["b1"], 0.0)
    h = np.maximum(h @ p["w2"].T + p["b2"], 0.0)
    return h @ p["w3"] + p["b3"]


def update_scale(d: float, c_lr: float, tensor) -> float:
    """Tensor-level scale ``0.001 * d * exp(0.001 * c_lr) * ||theta||_2``."""
    return 0.001 * d * math.exp(0.001 * c_lr) * float(np.linalg.norm(np.ravel(tensor)))


def learned_step(state: LearnedOptState, tensors, grads, loss: float):
    """One learned-optimizer update. Inputs are not modified."""
    if state is None or not isinstance(state, LearnedOptState):
        raise DataError("learned optimizer state is not initialized", "learned_step", _MODULE)
    if len(tensors) != len(state.second):
        raise DataError("state was initialized for different parameters", "learned_step", _MODULE)
    _check_grads(tensors, grads, "learned_step")
    loss_feats = state.loss.observe(loss)
    t = state.t + 1
    momenta, second = [], []
    for g, ms, v in zip(grads, state.momenta, state.second):
        momenta.append([b * m + (1.0 - b) * g for b, m in zip(MOMENTUM_DECAYS, ms)])
        second.append(SECOND_MOMENT_DECAY * v + (1.0 - SECOND_MOMENT_DECAY) * np.square(g))
    feats = np.stack(
        [
            tensor_features(p, g, ms, v, t, state.T, loss_feats, progress_t=min(state.t, state.T))
            for p, g, ms, v in zip(tensors, grads, momenta, second)
        ]
    )
    hidden, head = controller_step(state.weights, state.hidden, feats)
    out = []
    for k, (p, g, ms, v) in enumerate(zip(tensors, grads, momenta, second)):
        d, c_lr = head[k, 0], head[k, 1]
        raw = predictor_forward(head[k, 2:], per_parameter_features(g, ms, v, t))
        update = update_scale(d, c_lr, p) * raw.reshape(np.shape(p))
        if not np.all(np.isfinite(update)):
            raise DivergenceError("diverged: non-finite update", "learned_step", _MODULE, step=t)
        out.append(np.asarray(p) - update)
    new_state = LearnedOptState(state.weights, state.T, t, hidden, momenta, second, state.loss)
    return new_state, out
