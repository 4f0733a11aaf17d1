"""Minimal dense network engine: forward/backward, online Adam, freeze masks.

Parameters live in one contiguous float64 vector. Layer weights and biases are
views into it, so ``flatten`` is a copy and the flattening order is fixed:
layer 0 weights (row-major, shape ``[out, in]``), layer 0 bias, layer 1
weights, layer 1 bias, and so on.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from fedalign import _kernels

DEFAULT_HIDDEN = (256, 128, 64, 32, 16, 12, 8)
DEFAULT_INPUT_DIM = 9
EPS_CLIP = 1e-7

ACTIVATIONS = ("relu", "sigmoid")
_ACT_CODE = {"relu": 0, "sigmoid": 1}
_CODE_ACT = {v: k for k, v in _ACT_CODE.items()}
CHECKPOINT_MAGIC = b"FMA1"


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def _sigmoid(z):
    # Stable for large |z|.
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


@dataclass
class ModelParams:
    """Dense network parameters.

    ``dims`` holds the layer widths including the input, e.g. ``(9, 256, ..., 1)``.
    """

    flat: np.ndarray
    dims: tuple[int, ...]
    activations: tuple[str, ...]
    _offsets: list[tuple[int, int, int]] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        self.activations = tuple(self.activations)
        if len(self.dims) < 2:
            raise ShapeError("need at least one layer")
        if len(self.activations) != len(self.dims) - 1:
            raise ShapeError("one activation tag per layer required")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ShapeError(f"unknown activation {a!r}")
        offsets = []
        pos = 0
        for fan_in, fan_out in zip(self.dims[:-1], self.dims[1:]):
            w_end = pos + fan_in * fan_out
            offsets.append((pos, w_end, w_end + fan_out))
            pos = w_end + fan_out
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (pos,):
            raise ShapeError(f"flat vector has length {self.flat.size}, expected {pos}")
        self._offsets = offsets

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]], activations: Sequence[str]) -> ModelParams:
        dims = []
        chunks = []
        for k, (w, b) in enumerate(layers):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if dims and dims[-1] != w.shape[1]:
                raise ShapeError(f"layer {k} expects input {w.shape[1]}, previous layer outputs {dims[-1]}")
            if not dims:
                dims.append(w.shape[1])
            dims.append(w.shape[0])
            chunks += [w.ravel(), b]
        return cls(np.concatenate(chunks), tuple(dims), tuple(activations))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    @property
    def size(self) -> int:
        return self.flat.size

    def weight(self, k: int) -> np.ndarray:
        start, w_end, _ = self._offsets[k]
        return self.flat[start:w_end].reshape(self.dims[k + 1], self.dims[k])

    def bias(self, k: int) -> np.ndarray:
        _, w_end, b_end = self._offsets[k]
        return self.flat[w_end:b_end]

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.weight(k), self.bias(k)) for k in range(self.n_layers)]

    def layer_slice(self, k: int) -> slice:
        start, _, b_end = self._offsets[k]
        return slice(start, b_end)

    def copy(self) -> ModelParams:
        return ModelParams(self.flat.copy(), self.dims, self.activations)

    def with_flat(self, flat: np.ndarray) -> ModelParams:
        return ModelParams(np.array(flat, dtype=np.float64), self.dims, self.activations)


def flatten(params: ModelParams) -> np.ndarray:
    return params.flat.copy()


def unflatten(flat: np.ndarray, template: ModelParams) -> ModelParams:
    return template.with_flat(flat)


def default_dims(input_dim: int = DEFAULT_INPUT_DIM, hidden: Sequence[int] = DEFAULT_HIDDEN) -> tuple[int, ...]:
    return (input_dim, *hidden, 1)


def default_activations(n_layers: int) -> tuple[str, ...]:
    return ("relu",) * (n_layers - 1) + ("sigmoid",)


def parameter_count(dims: Sequence[int]) -> int:
    return sum(i * o + o for i, o in zip(dims[:-1], dims[1:]))


def init_params(dims: Sequence[int], seed: int, activations: Sequence[str] | None = None) -> ModelParams:
    """He-uniform weights, zero biases, from a seeded generator."""
    dims = tuple(dims)
    if activations is None:
        activations = default_activations(len(dims) - 1)
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / fan_in)
        layers.append((rng.uniform(-limit, limit, size=(fan_out, fan_in)), np.zeros(fan_out)))
    return ModelParams.from_layers(layers, activations)


@dataclass(frozen=True)
class FreezeMask:
    trainable: tuple[bool, ...]

    @classmethod
    def all_trainable(cls, n_layers: int) -> FreezeMask:
        return cls((True,) * n_layers)

    @classmethod
    def freeze_first_half(cls, n_layers: int) -> FreezeMask:
        n_frozen = n_layers // 2
        return cls((False,) * n_frozen + (True,) * (n_layers - n_frozen))

    @property
    def n_frozen_prefix(self) -> int:
        n = 0
        for t in self.trainable:
            if t:
                break
            n += 1
        return n

    @property
    def first_trainable(self) -> int:
        return self.n_frozen_prefix

    def segments(self, params: ModelParams) -> list[tuple[int, int]]:
        """Contiguous trainable coordinate ranges in the flat layout."""
        if len(self.trainable) != params.n_layers:
            raise ShapeError(f"mask has {len(self.trainable)} entries for {params.n_layers} layers")
        segs: list[tuple[int, int]] = []
        for k, t in enumerate(self.trainable):
            if not t:
                continue
            sl = params.layer_slice(k)
            if segs and segs[-1][1] == sl.start:
                segs[-1] = (segs[-1][0], sl.stop)
            else:
                segs.append((sl.start, sl.stop))
        return segs

    def coordinate_mask(self, params: ModelParams) -> np.ndarray:
        out = np.zeros(params.size, dtype=bool)
        for a, b in self.segments(params):
            out[a:b] = True
        return out


def _check_input(params: ModelParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim or x.ndim not in (1, 2):
        raise ShapeError(f"input has shape {x.shape}, model expects {params.input_dim} features")
    return x


def _activate(z, tag):
    if tag == "relu":
        return np.maximum(z, 0.0)
    return _sigmoid(z)


def forward(params: ModelParams, x) -> float:
    """Probability for a single feature vector."""
    x = _check_input(params, x)
    if x.ndim != 1:
        raise ShapeError("forward takes one feature vector; use predict_proba for batches")
    a = x
    for k in range(params.n_layers):
        a = _activate(params.weight(k) @ a + params.bias(k), params.activations[k])
    return float(a[0])


def predict_proba(params: ModelParams, X) -> np.ndarray:
    """Probabilities for a batch of rows."""
    X = _check_input(params, X)
    a = np.atleast_2d(X)
    for k in range(params.n_layers):
        a = _activate(a @ params.weight(k).T + params.bias(k), params.activations[k])
    return a[:, 0]


def bce_loss(p, y):
    p = np.clip(p, EPS_CLIP, 1.0 - EPS_CLIP)
    loss = -(y * np.log(p) + (1 - y) * np.log(1.0 - p))
    return float(loss) if np.ndim(loss) == 0 else loss


def mean_bce(params: ModelParams, X, y) -> float:
    return float(np.mean(bce_loss(predict_proba(params, X), np.asarray(y, dtype=np.float64))))


def backward(params: ModelParams, x, y, mask: FreezeMask | None = None) -> np.ndarray:
    """Gradient of bce(forward(x), y) in the flat layout; frozen layers get zeros."""
    x = _check_input(params, x)
    if x.ndim != 1:
        raise ShapeError("backward takes one feature vector")
    if params.activations[-1] != "sigmoid" or params.dims[-1] != 1:
        raise ShapeError("backward requires a single sigmoid output unit")
    grad = np.zeros(params.size)
    segs = mask.segments(params) if mask is not None else [(0, params.size)]
    if not segs:
        return grad
    first = mask.first_trainable if mask is not None else 0
    _kernels.backward_sample(params.flat, *_layout(params), x, float(y), grad, first, *_scratch(params))
    if mask is not None:
        grad[~mask.coordinate_mask(params)] = 0.0
    return grad


def _layout(params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dims = np.array(params.dims, dtype=np.int64)
    acts = np.array([_ACT_CODE[a] for a in params.activations], dtype=np.int64)
    offsets = np.array(params._offsets, dtype=np.int64)
    return dims, acts, offsets


def _scratch(params: ModelParams):
    width = max(params.dims)
    n = params.n_layers
    return np.zeros((n + 1, width)), np.zeros((n + 1, width)), np.zeros(width), np.zeros(width)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
        return cls(np.zeros(n), np.zeros(n), 0, lr, beta1, beta2, eps)

    def copy(self) -> AdamState:
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.lr, self.beta1, self.beta2, self.eps)


def _adam_inplace(flat: np.ndarray, state: AdamState, grad: np.ndarray, segs) -> None:
    state.t += 1
    _kernels.adam_update(flat, state.m, state.v, grad, np.array(segs, dtype=np.int64).reshape(-1, 2),
                         state.t, state.lr, state.beta1, state.beta2, state.eps)


def adam_step(params: ModelParams, state: AdamState, grad, mask: FreezeMask | None = None) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != (params.size,):
        raise ShapeError(f"gradient length {grad.size} != parameter count {params.size}")
    if state.m.shape != (params.size,):
        raise ShapeError("optimizer state does not match parameter count")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    segs = mask.segments(params) if mask is not None else [(0, params.size)]
    new_params = params.copy()
    new_state = state.copy()
    _adam_inplace(new_params.flat, new_state, grad, segs)
    return new_params, new_state


def train_online(
    params: ModelParams,
    state: AdamState,
    samples,
    mask: FreezeMask | None = None,
    epochs: int = 1,
    prox_anchor: ModelParams | None = None,
    mu: float = 0.0,
) -> tuple[ModelParams, AdamState]:
    """Sample-by-sample Adam training in the given order.

    ``samples`` is either an ``(X, y)`` pair of arrays or a sequence of
    ``(x, y)`` tuples. With ``prox_anchor`` and ``mu > 0`` every step adds the
    FedProx proximal gradient ``mu * (w - anchor)`` on trainable coordinates.
    Equivalent to calling ``backward`` then ``adam_step`` per sample.
    """
    X, y = _as_arrays(samples, params.input_dim)
    params = params.copy()
    state = state.copy()
    if len(y) == 0 or epochs <= 0:
        return params, state
    if params.activations[-1] != "sigmoid" or params.dims[-1] != 1:
        raise ShapeError("training requires a single sigmoid output unit")
    if mask is None:
        mask = FreezeMask.all_trainable(params.n_layers)
    segs = mask.segments(params)
    if not segs:
        return params, state
    use_prox = prox_anchor is not None and mu != 0.0
    if use_prox and prox_anchor.flat.shape != params.flat.shape:
        raise ShapeError("proximal anchor does not match model")
    anchor = prox_anchor.flat if use_prox else np.zeros(0)
    t = _kernels.train_pass(
        params.flat, state.m, state.v, state.t, np.ascontiguousarray(X), y, *_layout(params),
        mask.first_trainable, np.array(segs, dtype=np.int64), state.lr, state.beta1, state.beta2, state.eps,
        anchor, float(mu) if use_prox else 0.0, int(epochs),
    )
    if t < 0:
        raise TrainingError(f"non-finite gradient at sample {-t - 1}")
    state.t = int(t)
    return params, state


def _as_arrays(samples, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        X, y = samples
        X = np.asarray(X, dtype=np.float64).reshape(-1, input_dim) if len(X) else np.zeros((0, input_dim))
        return X, np.asarray(y, dtype=np.float64)
    samples = list(samples)
    if not samples:
        return np.zeros((0, input_dim)), np.zeros(0)
    X = np.array([np.asarray(s[0], dtype=np.float64) for s in samples])
    if X.shape[1] != input_dim:
        raise ShapeError(f"samples have {X.shape[1]} features, model expects {input_dim}")
    return X, np.array([float(s[1]) for s in samples])


def accuracy(params: ModelParams, X, y, threshold: float = 0.5) -> float:
    """Percentage of rows where (score > threshold) matches the label."""
    pred = predict_proba(params, X) > threshold
    return 100.0 * float(np.mean(pred == (np.asarray(y) == 1)))


# -- checkpoint ---------------------------------------------------------------

def checkpoint_bytes(params: ModelParams) -> bytes:
    """FMA1 layout: magic, u32 layer count, then per layer
    u32 in_dim, u32 out_dim, u8 activation, f32 weights row-major, f32 biases.
    All little-endian."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", params.n_layers))
    for k in range(params.n_layers):
        buf.write(struct.pack("<IIB", params.dims[k], params.dims[k + 1], _ACT_CODE[params.activations[k]]))
        buf.write(params.weight(k).astype("<f4").tobytes())
        buf.write(params.bias(k).astype("<f4").tobytes())
    return buf.getvalue()


def params_from_checkpoint(data: bytes) -> ModelParams:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}")
    pos = 4
    try:
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layers, acts = [], []
        for _ in range(n):
            fan_in, fan_out, code = struct.unpack_from("<IIB", data, pos)
            pos += 9
            nw = fan_in * fan_out
            if pos + 4 * (nw + fan_out) > len(data):
                raise CheckpointError("truncated checkpoint")
            w = np.frombuffer(data, "<f4", nw, pos).astype(np.float64).reshape(fan_out, fan_in)
            pos += 4 * nw
            b = np.frombuffer(data, "<f4", fan_out, pos).astype(np.float64)
            pos += 4 * fan_out
            layers.append((w, b))
            acts.append(_CODE_ACT[code])
    except (struct.error, KeyError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return ModelParams.from_layers(layers, acts)


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_checkpoint(fh.read())
