"""Post-training uint8 quantization, quantized inference, bundle format, footprint.

FMQ1 bundle layout (little-endian)::

    b"FMQ1"
    u32 n_layers
    n_layers x (u32 in_dim, u32 out_dim, u8 activation)
    f32 threshold
    per tensor, in flat order (W0, b0, W1, b1, ...):
        f64 scale, i32 zero_point, uint8[numel] values

Weights are stored row-major ``[out, in]``.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from fedalign.nn import _ACT_CODE, _CODE_ACT, ModelParams, ShapeError, checkpoint_bytes, predict_proba

BUNDLE_MAGIC = b"FMQ1"
SCALE_FLOOR = 1e-12


class BundleFormatError(ValueError):
    pass


@dataclass
class QuantTensor:
    values: np.ndarray  # uint8
    scale: float
    zero_point: int

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.values.astype(np.float64) - self.zero_point)


def quantize_tensor(v) -> QuantTensor:
    """Asymmetric affine uint8 with min/max calibration.

    The calibration range is widened to include 0 so the zero point always
    lands in [0, 255] and reconstruction stays within scale/2.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("cannot quantize non-finite values")
    lo = min(float(v.min()), 0.0) if v.size else 0.0
    hi = max(float(v.max()), 0.0) if v.size else 0.0
    scale = (hi - lo) / 255.0
    if scale < SCALE_FLOOR:
        scale = SCALE_FLOOR
    zero_point = int(np.clip(np.round(-lo / scale), 0, 255))
    q = np.clip(np.round(v / scale) + zero_point, 0, 255).astype(np.uint8)
    return QuantTensor(q, float(scale), zero_point)


@dataclass
class QuantizedBundle:
    dims: tuple[int, ...]
    activations: tuple[str, ...]
    tensors: list[QuantTensor]
    threshold: float = 0.5
    version: int = 1

    def __post_init__(self) -> None:
        self.threshold = float(np.float32(self.threshold))
        self._cache = None

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def dequantized(self) -> ModelParams:
        flat = np.concatenate([t.dequantize().ravel() for t in self.tensors])
        return ModelParams(flat, self.dims, self.activations)

    def _layers(self):
        if self._cache is None:
            layers = []
            for k in range(len(self.dims) - 1):
                w = self.tensors[2 * k].dequantize().reshape(self.dims[k + 1], self.dims[k]).astype(np.float32)
                b = self.tensors[2 * k + 1].dequantize().astype(np.float32)
                layers.append((np.ascontiguousarray(w.T), b))
            self._cache = layers
        return self._cache

    def score(self, X) -> np.ndarray:
        return quantized_forward(self, X)


def quantize(params: ModelParams, threshold: float = 0.5) -> QuantizedBundle:
    if not np.isfinite(params.flat).all():
        raise ValueError("cannot quantize non-finite parameters")
    tensors = []
    for w, b in params.layers:
        tensors.append(quantize_tensor(w))
        tensors.append(quantize_tensor(b))
    return QuantizedBundle(params.dims, params.activations, tensors, threshold)


def quantized_forward(bundle: QuantizedBundle, X) -> np.ndarray:
    """Probabilities from dequantized float32 weights; 1-D input gives a 1-element array."""
    if bundle.version != 1:
        raise BundleFormatError(f"unsupported bundle version {bundle.version}")
    X = np.asarray(X, dtype=np.float32)
    if X.shape[-1] != bundle.input_dim:
        raise ShapeError(f"input has shape {X.shape}, model expects {bundle.input_dim} features")
    a = np.atleast_2d(X)
    for (w_t, b), act in zip(bundle._layers(), bundle.activations):
        z = a @ w_t + b
        a = np.maximum(z, 0.0) if act == "relu" else 1.0 / (1.0 + np.exp(-z.astype(np.float64)))
    return np.asarray(a[:, 0], dtype=np.float64)


# -- serialization ---------------------------------------------------------------

def bundle_bytes(bundle: QuantizedBundle) -> bytes:
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    n = len(bundle.dims) - 1
    buf.write(struct.pack("<I", n))
    for k in range(n):
        buf.write(struct.pack("<IIB", bundle.dims[k], bundle.dims[k + 1], _ACT_CODE[bundle.activations[k]]))
    buf.write(struct.pack("<f", bundle.threshold))
    for t in bundle.tensors:
        buf.write(struct.pack("<di", t.scale, t.zero_point))
        buf.write(np.ascontiguousarray(t.values, dtype=np.uint8).tobytes())
    return buf.getvalue()


def expected_bundle_size(dims: Sequence[int]) -> int:
    n = len(dims) - 1
    header = 4 + 4 + 9 * n + 4
    return header + sum(i * o + o + 2 * (8 + 4) for i, o in zip(dims[:-1], dims[1:]))


def bundle_from_bytes(data: bytes) -> QuantizedBundle:
    if data[:3] == BUNDLE_MAGIC[:3] and data[3:4] != BUNDLE_MAGIC[3:4]:
        raise BundleFormatError(f"unsupported bundle version {data[3:4]!r}")
    if data[:4] != BUNDLE_MAGIC:
        raise BundleFormatError(f"bad magic {data[:4]!r}")
    try:
        pos = 4
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        dims, acts = [], []
        for _ in range(n):
            fan_in, fan_out, code = struct.unpack_from("<IIB", data, pos)
            pos += 9
            if dims and dims[-1] != fan_in:
                raise BundleFormatError("layer dimensions do not chain")
            if not dims:
                dims.append(fan_in)
            dims.append(fan_out)
            acts.append(_CODE_ACT[code])
        (tau,) = struct.unpack_from("<f", data, pos)
        pos += 4
        tensors = []
        for k in range(n):
            for shape in ((dims[k + 1], dims[k]), (dims[k + 1],)):
                scale, zp = struct.unpack_from("<di", data, pos)
                pos += 12
                numel = int(np.prod(shape))
                if pos + numel > len(data):
                    raise BundleFormatError("truncated bundle")
                vals = np.frombuffer(data, np.uint8, numel, pos).reshape(shape).copy()
                pos += numel
                tensors.append(QuantTensor(vals, scale, zp))
    except (struct.error, KeyError) as exc:
        raise BundleFormatError(f"truncated or malformed bundle: {exc}") from exc
    if pos != len(data):
        raise BundleFormatError("trailing bytes after bundle")
    return QuantizedBundle(tuple(dims), tuple(acts), tensors, tau)


def serialize_bundle(bundle: QuantizedBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(bundle_bytes(bundle))


def deserialize_bundle(path) -> QuantizedBundle:
    with open(path, "rb") as fh:
        return bundle_from_bytes(fh.read())


# -- footprint -------------------------------------------------------------------

def speedup_percent(t_float: float, t_quant: float) -> float:
    return (t_float - t_quant) / t_float * 100.0


@dataclass
class FootprintReport:
    float_size_bytes: int
    quant_size_bytes: int
    float_infer_time: float
    quant_infer_time: float
    speedup_percent: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _median_time(fn, probe: np.ndarray, repeats: int) -> float:
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for x in probe:
            fn(x[None, :])
        runs.append(time.perf_counter() - t0)
    return float(np.median(runs)) * 1e3 / len(probe)


def measure_footprint(float_model: ModelParams, bundle: QuantizedBundle, probe_set, repeats: int = 100,
                      ) -> FootprintReport:
    """Serialized sizes and median per-sample inference time (ms) for both formats."""
    probe = np.asarray(probe_set, dtype=np.float64)
    if probe.ndim != 2 or len(probe) == 0:
        raise ValueError("probe set must be a non-empty 2-D array")
    repeats = max(int(repeats), 100)
    t_float = _median_time(lambda x: predict_proba(float_model, x), probe, repeats)
    t_quant = _median_time(lambda x: quantized_forward(bundle, x), probe, repeats)
    return FootprintReport(
        len(checkpoint_bytes(float_model)), len(bundle_bytes(bundle)), t_float, t_quant,
        speedup_percent(t_float, t_quant),
    )
