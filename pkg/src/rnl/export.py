"""Attention-map export: 8-bit grayscale PGM frames and raw-value CSV."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from rnl.errors import DimensionError

MID_GRAY = 128


def to_uint8(a):
    """Min-max normalise one map to ``[0, 255]``; a constant map becomes mid-gray."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.full(a.shape, MID_GRAY, dtype=np.uint8)
    return np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(frame):
    frame = np.asarray(frame, dtype=np.uint8)
    if frame.ndim != 2:
        raise DimensionError(f"a PGM frame must be 2-D, got shape {frame.shape}")
    h, w = frame.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + frame.tobytes()


def read_pgm(path):
    """Parse a binary PGM written by :func:`write_pgm` (no comment support)."""
    raw = Path(path).read_bytes()
    magic, w, h, maxval, pixels = raw.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255 or len(pixels) != int(w) * int(h):
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(int(h), int(w))


def write_pgm(path, frame):
    Path(path).write_bytes(pgm_bytes(frame))


def map_csv(amap):
    """CSV text with one ``t,h,w,value`` row per position (CRLF line endings)."""
    a = np.asarray(amap, dtype=np.float64)
    a = a.reshape(a.shape[:3])
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\r\n")
    out.writerow(["t", "h", "w", "value"])
    for (t, h, w), v in np.ndenumerate(a):
        out.writerow([t, h, w, repr(float(v))])
    return buf.getvalue()


def export_map(amap, out_dir, stem):
    """Write ``stem_t{k}.pgm`` for every frame and ``stem.csv``; return the paths.

    The whole ``(T, H, W)`` map is normalised once, so frames share a scale.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    a = np.asarray(amap, dtype=np.float64)
    a = a.reshape(a.shape[:3])
    img = to_uint8(a)
    paths = []
    for t in range(a.shape[0]):
        p = out_dir / f"{stem}_t{t}.pgm"
        write_pgm(p, img[t])
        paths.append(p)
    p = out_dir / f"{stem}.csv"
    with open(p, "w", newline="") as fh:
        fh.write(map_csv(a))
    paths.append(p)
    return paths
