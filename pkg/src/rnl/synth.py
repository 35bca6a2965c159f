"""Synthetic feature clips for demos and qualitative checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from rnl.errors import ArgumentError

PATTERNS = ("random", "constant", "moving-dot")


@dataclass
class SyntheticClip:
    data: np.ndarray
    mask: Optional[np.ndarray] = None  # (T, H, W) bool, dot pattern only


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or min(shape) < 1:
        raise ArgumentError(f"clip shape must be four positive extents (T,H,W,C), got {shape}")
    return shape


def random_clip(shape, seed=0, dtype=np.float64):
    shape = _check_shape(shape)
    return SyntheticClip(np.random.default_rng(seed).standard_normal(shape).astype(dtype))


def constant_clip(shape, value=1.0, dtype=np.float64):
    shape = _check_shape(shape)
    return SyntheticClip(np.full(shape, value, dtype=dtype))


def dot_mask(shape, radius=2.0, velocity=(0, 1), start=None):
    """Disc of ``radius`` moving ``velocity = (dh, dw)`` cells per frame, wrapping at the edges."""
    t, h, w = shape[:3]
    h0, w0 = start if start is not None else (h // 2, w // 4)
    hh, ww = np.mgrid[0:h, 0:w]
    mask = np.zeros((t, h, w), dtype=bool)
    for f in range(t):
        ch = (h0 + velocity[0] * f) % h
        cw = (w0 + velocity[1] * f) % w
        # distance on the torus so the dot stays round while wrapping
        dh = np.minimum(np.abs(hh - ch), h - np.abs(hh - ch))
        dw = np.minimum(np.abs(ww - cw), w - np.abs(ww - cw))
        mask[f] = dh ** 2 + dw ** 2 <= radius ** 2
    return mask


def moving_dot_clip(shape, radius=2.0, velocity=(0, 1), amplitude=5.0, noise=0.1, seed=0,
                    dtype=np.float64, start=None):
    """Bright dot on a weak noise background.

    Dot cells hold ``amplitude`` in every channel; background cells hold
    ``noise``-scaled standard normal values drawn from ``seed``.
    """
    shape = _check_shape(shape)
    if radius < 0:
        raise ArgumentError(f"dot radius must be non-negative, got {radius}")
    mask = dot_mask(shape, radius, velocity, start)
    data = noise * np.random.default_rng(seed).standard_normal(shape)
    data[mask] = amplitude
    return SyntheticClip(data.astype(dtype), mask)


def make_clip(pattern, shape, seed=0, dtype=np.float64, **kw):
    if pattern == "random":
        return random_clip(shape, seed, dtype)
    if pattern == "constant":
        return constant_clip(shape, kw.get("value", 1.0), dtype)
    if pattern == "moving-dot":
        return moving_dot_clip(shape, seed=seed, dtype=dtype, **kw)
    raise ArgumentError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
