"""Dense tensor primitives.

Tensors are plain :class:`numpy.ndarray` objects in row-major order with
float32 or float64 storage. Every reduction is carried out in float64 and
the result is cast back to the storage precision of the inputs.

Feature clips use a channels-last ``(T, H, W, C)`` layout so the flattened
``(T*H*W, C)`` view is a reshape, not a copy.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rnl.errors import ArgumentError, DimensionError, TensorFileError

FLOAT_DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_MAGIC = b"RNLT"
_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# Set RNL_DEBUG=1 to assert finite outputs from every primitive.
DEBUG = bool(os.environ.get("RNL_DEBUG"))


def storage_dtype(*arrays):
    dt = np.result_type(*[np.asarray(a).dtype for a in arrays])
    return np.dtype(np.float32) if dt == np.float32 else np.dtype(np.float64)


def asarray(a, dtype=None):
    arr = np.asarray(a)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


def _out(values, *inputs):
    out = np.ascontiguousarray(values, dtype=storage_dtype(*inputs))
    if DEBUG and not np.all(np.isfinite(out)):
        raise ArgumentError("non-finite value produced from finite input")
    return out


@dataclass(frozen=True)
class FeatureClip:
    """A ``(T, H, W, C)`` feature map."""

    tensor: np.ndarray

    def __post_init__(self):
        arr = asarray(self.tensor)
        if arr.ndim != 4:
            raise DimensionError(f"feature clip must be rank 4 (T,H,W,C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"feature clip extents must be >= 1, got {arr.shape}")
        object.__setattr__(self, "tensor", arr)

    t = property(lambda self: self.tensor.shape[0])
    h = property(lambda self: self.tensor.shape[1])
    w = property(lambda self: self.tensor.shape[2])
    c = property(lambda self: self.tensor.shape[3])

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def positions(self):
        return self.t * self.h * self.w

    def flatten(self):
        return flatten(self.tensor)

    @classmethod
    def unflatten(cls, flat, dims):
        return cls(unflatten(flat, dims))


def flatten(x):
    """``(T, H, W, C) -> (T*H*W, C)``."""
    x = np.asarray(x)
    return x.reshape(-1, x.shape[-1])


def unflatten(flat, dims):
    t, h, w = dims
    flat = np.asarray(flat)
    if flat.ndim != 2 or flat.shape[0] != t * h * w:
        raise DimensionError(f"cannot unflatten {flat.shape} to dims {tuple(dims)}")
    return flat.reshape(t, h, w, flat.shape[1])


def matmul(a, b):
    a, b = asarray(a), asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _out(a.astype(np.float64) @ b.astype(np.float64), a, b)


def transpose2d(a):
    a = asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose2d needs a rank-2 tensor, got {a.shape}")
    return np.ascontiguousarray(a.T)


def softmax_rows(a):
    a = asarray(a)
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows needs a rank-2 tensor, got {a.shape}")
    z = a.astype(np.float64)
    z = np.exp(z - z.max(axis=1, keepdims=True))
    return _out(z / z.sum(axis=1, keepdims=True), a)


def relu(a):
    a = asarray(a)
    return np.maximum(a, 0).astype(a.dtype, copy=False)


def broadcast_shape(sa, sb):
    """Equal-rank broadcasting where only size-1 axes are replicated."""
    if len(sa) != len(sb):
        raise DimensionError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)}: rank differs")
    out = []
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise DimensionError(f"cannot broadcast shapes {tuple(sa)} and {tuple(sb)}")
        out.append(max(x, y))
    return tuple(out)


def add(a, b):
    a, b = asarray(a), asarray(b)
    broadcast_shape(a.shape, b.shape)
    return _out(a.astype(np.float64) + b.astype(np.float64), a, b)


def hadamard(a, b):
    a, b = asarray(a), asarray(b)
    broadcast_shape(a.shape, b.shape)
    return _out(a.astype(np.float64) * b.astype(np.float64), a, b)


def scale(a, k):
    a = asarray(a)
    return _out(a.astype(np.float64) * float(k), a)


def divide(a, k):
    a = asarray(a)
    return _out(a.astype(np.float64) / float(k), a)


def conv1x1(x, w, bias=None):
    """Pointwise (1x1x1) convolution: per-position ``x_i @ w (+ bias)``."""
    x, w = asarray(x), asarray(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    out = flatten(x).astype(np.float64) @ w.astype(np.float64)
    if bias is not None:
        bias = asarray(bias)
        if bias.shape != (w.shape[1],):
            raise DimensionError(f"conv1x1 bias shape {bias.shape} != ({w.shape[1]},)")
        out = out + bias.astype(np.float64)
    return _out(out.reshape(x.shape[:-1] + (w.shape[1],)), x, w)


def batch_norm_inference(x, gamma, beta, mean, var, eps=1e-5):
    """Per-channel affine normalization using frozen running statistics."""
    x = asarray(x)
    c = x.shape[-1]
    params = [asarray(p) for p in (gamma, beta, mean, var)]
    for name, p in zip(("gamma", "beta", "mean", "var"), params):
        if p.shape != (c,):
            raise DimensionError(f"batch norm {name} shape {p.shape} != ({c},)")
    gamma, beta, mean, var = (p.astype(np.float64) for p in params)
    if np.any(var < 0):
        raise ArgumentError("batch norm variance must be non-negative")
    out = (x.astype(np.float64) - mean) / np.sqrt(var + eps) * gamma + beta
    return _out(out, x)


def save_tensor(path, a):
    """Write ``a`` in the RNLT binary format."""
    a = np.asarray(a)
    dt = storage_dtype(a)
    if a.ndim > 255:
        raise TensorFileError(f"rank {a.ndim} too large for RNLT")
    header = _MAGIC + struct.pack("<BBBx", _VERSION, _DTYPE_CODES[dt], a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(a, dtype=_CODE_DTYPES[_DTYPE_CODES[dt]]).tobytes())


def load_tensor(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise TensorFileError(f"cannot read tensor file {path}: {exc.strerror}") from exc
    return decode_tensor(raw, source=str(path))


def decode_tensor(raw, source="<bytes>"):
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise TensorFileError(f"{source}: bad magic, not an RNLT file")
    version, code, rank = struct.unpack_from("<BBBx", raw, 4)
    if version != _VERSION:
        raise TensorFileError(f"{source}: unsupported RNLT version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFileError(f"{source}: unknown dtype code {code}")
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise TensorFileError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    if any(n < 1 for n in shape):
        raise TensorFileError(f"{source}: zero extent in shape {shape}")
    dt = _CODE_DTYPES[code]
    expected = offset + int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(raw) != expected:
        raise TensorFileError(f"{source}: size {len(raw)} bytes, expected {expected} for shape {shape}")
    data = np.frombuffer(raw, dtype=dt, offset=offset).reshape(shape)
    return data.astype(dt.newbyteorder("="))
