"""Region aggregation: summarise the cuboid neighbourhood of every position.

Three modes share one geometry (odd ``kt x kh x kw`` window, stride 1,
half-kernel zero padding):

* ``conv`` -- channel-wise convolution, one kernel per channel, no
  cross-channel mixing.
* ``avg`` -- mean over the window; the divisor is always the full window
  volume, so padded cells count as zeros.
* ``max`` -- maximum over the in-bounds cells of the window.

Window offsets are scanned in ``(dt, dh, dw)`` lexicographic order; the max
mode breaks ties in favour of the first maximal offset in that order.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product
from typing import Any, Optional

import numpy as np

from rnl.errors import ArgumentError, DimensionError
from rnl.tensor import asarray, storage_dtype

MODES = ("conv", "avg", "max")
_MODE_ALIASES = {
    "conv": "conv",
    "channel-wise-conv": "conv",
    "channelwise": "conv",
    "avg": "avg",
    "avg-pool": "avg",
    "max": "max",
    "max-pool": "max",
}


@dataclass(frozen=True)
class RegionKernel:
    """Window geometry and mode, plus the conv weights when ``mode == 'conv'``.

    ``weights`` has shape ``(kt, kh, kw, c)`` and is shared by every
    position. ``has_bias`` switches on a per-channel bias (off by default).
    """

    kt: int = 3
    kh: int = 7
    kw: int = 7
    mode: str = "conv"
    has_bias: bool = False
    weights: Optional[Any] = None
    bias: Optional[Any] = None

    def __post_init__(self):
        mode = _MODE_ALIASES.get(self.mode)
        if mode is None:
            raise ArgumentError(f"unknown aggregation mode {self.mode!r}; expected one of {MODES}")
        object.__setattr__(self, "mode", mode)
        for name in ("kt", "kh", "kw"):
            k = getattr(self, name)
            if int(k) != k or k < 1 or k % 2 == 0:
                raise ArgumentError(f"kernel extent {name}={k} must be a positive odd integer")
            object.__setattr__(self, name, int(k))

    @property
    def size(self):
        return (self.kt, self.kh, self.kw)

    @property
    def volume(self):
        return self.kt * self.kh * self.kw

    def with_weights(self, weights, bias=None):
        return replace(self, weights=weights, bias=bias)

    def geometry(self):
        """Copy with weights stripped (what a config file stores)."""
        return replace(self, weights=None, bias=None)


def kernel_param_count(kernel, channels):
    if kernel.mode != "conv":
        return 0
    return channels * kernel.volume + (channels if kernel.has_bias else 0)


def _offsets(size):
    return list(product(*(range(k) for k in size)))


def _pad(x, size, fill):
    pads = [(k // 2, k // 2) for k in size] + [(0, 0)]
    return np.pad(x, pads, mode="constant", constant_values=fill)


def _window(xp, off, shape):
    dt, dh, dw = off
    t, h, w = shape[:3]
    return xp[dt:dt + t, dh:dh + h, dw:dw + w]


def _check_input(x):
    x = asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"aggregation needs a (T,H,W,C) tensor, got shape {x.shape}")
    return x


def channelwise_conv(x, weights, bias=None):
    x = _check_input(x)
    u = asarray(weights)
    if u.ndim != 4 or u.shape[3] != x.shape[3]:
        raise DimensionError(f"channel-wise kernel {u.shape} does not match input channels {x.shape}")
    for k in u.shape[:3]:
        if k % 2 == 0:
            raise ArgumentError(f"kernel extents must be odd, got {u.shape[:3]}")
    xp = _pad(x.astype(np.float64), u.shape[:3], 0.0)
    u64 = u.astype(np.float64)
    out = None
    for off in _offsets(u.shape[:3]):
        term = u64[off] * _window(xp, off, x.shape)
        out = term if out is None else out + term
    if bias is not None:
        b = asarray(bias)
        if b.shape != (x.shape[3],):
            raise DimensionError(f"channel-wise bias shape {b.shape} != ({x.shape[3]},)")
        out = out + b.astype(np.float64)
    return np.ascontiguousarray(out, dtype=storage_dtype(x, u))


def channelwise_conv_grads(grad, x, weights):
    """Return ``(d_x, d_weights, d_bias)`` for an upstream gradient."""
    g = np.asarray(grad, dtype=np.float64)
    u = np.asarray(weights, dtype=np.float64)
    size = u.shape[:3]
    xp = _pad(np.asarray(x, dtype=np.float64), size, 0.0)
    gxp = np.zeros_like(xp)
    gu = np.zeros_like(u)
    for off in _offsets(size):
        _window(gxp, off, g.shape)[...] += u[off] * g
        gu[off] = np.sum(g * _window(xp, off, g.shape), axis=(0, 1, 2))
    gx = _crop(gxp, size, g.shape)
    return gx, gu, g.sum(axis=(0, 1, 2))


def _crop(xp, size, shape):
    pt, ph, pw = (k // 2 for k in size)
    return xp[pt:pt + shape[0], ph:ph + shape[1], pw:pw + shape[2]]


def avg_pool(x, size):
    x = _check_input(x)
    xp = _pad(x.astype(np.float64), size, 0.0)
    out = None
    for off in _offsets(size):
        w = _window(xp, off, x.shape)
        out = w.copy() if out is None else out + w
    vol = size[0] * size[1] * size[2]
    return np.ascontiguousarray(out / vol, dtype=storage_dtype(x))


def avg_pool_grad(grad, size):
    g = np.asarray(grad, dtype=np.float64) / (size[0] * size[1] * size[2])
    gxp = np.zeros(tuple(n + k - 1 for n, k in zip(g.shape[:3], size)) + g.shape[3:])
    for off in _offsets(size):
        _window(gxp, off, g.shape)[...] += g
    return _crop(gxp, size, g.shape)


def max_pool(x, size):
    """Return ``(out, argmax)`` where ``argmax`` holds the winning offset index."""
    x = _check_input(x)
    xp = _pad(x.astype(np.float64), size, -np.inf)
    out = None
    arg = np.zeros(x.shape, dtype=np.int64)
    for k, off in enumerate(_offsets(size)):
        w = _window(xp, off, x.shape)
        if out is None:
            out = w.copy()
            continue
        better = w > out
        out = np.where(better, w, out)
        arg[better] = k
    return np.ascontiguousarray(out, dtype=storage_dtype(x)), arg


def max_pool_grad(grad, argmax, size):
    g = np.asarray(grad, dtype=np.float64)
    gxp = np.zeros(tuple(n + k - 1 for n, k in zip(g.shape[:3], size)) + g.shape[3:])
    for k, off in enumerate(_offsets(size)):
        _window(gxp, off, g.shape)[...] += np.where(argmax == k, g, 0.0)
    return _crop(gxp, size, g.shape)


def aggregate(x, kernel):
    """Apply ``kernel`` to a ``(T, H, W, C)`` array; output has the same shape."""
    x = _check_input(x)
    if kernel.mode == "conv":
        if kernel.weights is None:
            raise ArgumentError("conv-mode aggregation requires kernel weights")
        u = asarray(kernel.weights)
        if u.shape != kernel.size + (x.shape[3],):
            raise DimensionError(
                f"kernel weights {u.shape} do not match geometry {kernel.size} and channels {x.shape[3]}")
        return channelwise_conv(x, u, kernel.bias if kernel.has_bias else None)
    if kernel.mode == "avg":
        return avg_pool(x, kernel.size)
    return max_pool(x, kernel.size)[0]
