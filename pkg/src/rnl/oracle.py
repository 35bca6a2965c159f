"""Literal position-pair loops for the NL and RNL operations.

These are written with plain Python scalars and nested loops and share no
code with the matrix path in :mod:`rnl.blocks`. They are O(P^2 C) and only
meant for small clips.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from rnl.errors import ArgumentError

MAX_POSITIONS = 4096


def _vecmat(v, m):
    """Row vector times matrix, both nested lists."""
    return [sum(v[k] * m[k][j] for k in range(len(v))) for j in range(len(m[0]))]


def _dot(a, b):
    return sum(p * q for p, q in zip(a, b))


def naive_aggregate(x, mode, size, weights=None, bias=None):
    """Six-deep loop over (t, h, w, c) and the window offsets."""
    x = np.asarray(x, dtype=np.float64)
    T, H, W, C = x.shape
    kt, kh, kw = size
    vol = kt * kh * kw
    xs = x.tolist()
    u = None if weights is None else np.asarray(weights, dtype=np.float64).tolist()
    out = np.zeros((T, H, W, C))
    for t in range(T):
        for h in range(H):
            for w in range(W):
                for c in range(C):
                    acc = 0.0
                    best = -math.inf
                    for dt in range(kt):
                        for dh in range(kh):
                            for dw in range(kw):
                                tt, hh, ww = t + dt - kt // 2, h + dh - kh // 2, w + dw - kw // 2
                                if not (0 <= tt < T and 0 <= hh < H and 0 <= ww < W):
                                    continue
                                v = xs[tt][hh][ww][c]
                                if mode == "conv":
                                    acc += u[dt][dh][dw][c] * v
                                elif mode == "avg":
                                    acc += v
                                else:
                                    best = max(best, v)
                    if mode == "conv":
                        out[t, h, w, c] = acc + (0.0 if bias is None else float(bias[c]))
                    elif mode == "avg":
                        out[t, h, w, c] = acc / vol
                    else:
                        out[t, h, w, c] = best
    return out


def _pair_weights(emb, form):
    """Normalised weights w[i][j] from per-position embeddings."""
    n = len(emb)
    if form == "gaussian":
        rows = []
        for i in range(n):
            logits = [_dot(emb[i], emb[j]) for j in range(n)]
            m = max(logits)
            ex = [math.exp(s - m) for s in logits]
            total = sum(ex)
            rows.append([v / total for v in ex])
        return rows
    if form == "dot":
        return [[_dot(emb[i], emb[j]) / n for j in range(n)] for i in range(n)]
    if form == "cosine":
        norms = [math.sqrt(_dot(v, v)) for v in emb]
        rows = []
        for i in range(n):
            row = []
            for j in range(n):
                if norms[i] < 1e-12 or norms[j] < 1e-12:
                    row.append(0.0)
                else:
                    row.append(max(0.0, _dot(emb[i], emb[j]) / (norms[i] * norms[j])) / n)
            rows.append(row)
        return rows
    raise ArgumentError(f"unknown similarity form {form!r}")


def _finish(x, y, p, residual_bn, eps):
    """``z_i = BN(y_i W_z) + x_i`` per position."""
    wz = np.asarray(p["w_z"], dtype=np.float64).tolist()
    xs = np.asarray(x, dtype=np.float64).reshape(len(y), -1).tolist()
    out = []
    for yi, xi in zip(y, xs):
        zi = _vecmat(yi, wz)
        if residual_bn:
            zi = [(v - float(p["bn_mean"][c])) / math.sqrt(float(p["bn_var"][c]) + eps)
                  * float(p["bn_gamma"][c]) + float(p["bn_beta"][c]) for c, v in enumerate(zi)]
        out.append([a + b for a, b in zip(zi, xi)])
    return np.array(out).reshape(np.shape(x))


def _check_size(x):
    pos = int(np.prod(np.shape(x)[:3]))
    if pos > MAX_POSITIONS:
        raise ArgumentError(f"naive oracle refuses P={pos} positions (limit {MAX_POSITIONS})")
    return pos


def naive_rnl(x, cfg, params=None):
    """``y_i = 1/C(x) sum_j f(theta(N_i), theta(N_j)) g_j`` by explicit loops.

    Returns ``(z, weights)`` where ``weights[i][j]`` are the normalised pair
    weights used for position ``i``.
    """
    _check_size(x)
    p = dict(cfg.params, **(params or {}))
    x = np.asarray(x, dtype=np.float64)
    T, H, W, C = x.shape
    wg = np.asarray(p["w_g"], dtype=np.float64).tolist()
    g = [_vecmat(v, wg) for v in x.reshape(-1, C).tolist()]
    g4 = np.array(g).reshape(T, H, W, -1)
    k = cfg.kernel
    emb = naive_aggregate(g4, k.mode, k.size, p.get("u"), p.get("u_bias") if k.has_bias else None)
    weights = _pair_weights(emb.reshape(T * H * W, -1).tolist(), cfg.form)
    y = [[sum(weights[i][j] * g[j][c] for j in range(len(g))) for c in range(len(g[0]))]
         for i in range(len(g))]
    z = _finish(x, y, p, cfg.residual_bn, cfg.bn_eps)
    return z, np.array(weights)


def naive_nl(x, cfg, params=None):
    """Embedded-gaussian NL by explicit loops. Returns ``(z, weights)``."""
    _check_size(x)
    p = dict(cfg.params, **(params or {}))
    x = np.asarray(x, dtype=np.float64)
    C = x.shape[3]
    rows = x.reshape(-1, C).tolist()
    proj = {k: np.asarray(p[k], dtype=np.float64).tolist() for k in ("w_theta", "w_phi", "w_g")}
    theta = [_vecmat(v, proj["w_theta"]) for v in rows]
    phi = [_vecmat(v, proj["w_phi"]) for v in rows]
    g = [_vecmat(v, proj["w_g"]) for v in rows]
    n = len(rows)
    weights = []
    y = []
    for i in range(n):
        logits = [_dot(theta[i], phi[j]) for j in range(n)]
        m = max(logits)
        ex = [math.exp(s - m) for s in logits]
        total = sum(ex)
        w = [v / total for v in ex]
        weights.append(w)
        y.append([sum(w[j] * g[j][c] for j in range(n)) for c in range(len(g[0]))])
    z = _finish(x, y, p, cfg.residual_bn, cfg.bn_eps)
    return z, np.array(weights)


@dataclass
class OracleComparison:
    max_abs_err: float
    max_rel_err: float
    tolerance: float
    positions: int

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def compare(result, reference, tol=1e-5):
    """Normwise relative error ``max|a - b| / max|b|``."""
    a = np.asarray(result, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    abs_err = float(np.max(np.abs(a - b))) if a.size else 0.0
    scale = float(np.max(np.abs(b))) if b.size else 0.0
    rel = abs_err / scale if scale > 0 else abs_err
    return OracleComparison(abs_err, rel, tol, int(np.prod(a.shape[:3])))
