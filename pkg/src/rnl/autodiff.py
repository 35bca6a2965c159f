"""Tape-based reverse-mode differentiation and a central-difference checker.

Every op in this module accepts plain arrays or :class:`Var` handles. With
plain arrays it simply computes the forward value; if any operand is a
``Var`` the op is recorded on that operand's :class:`Tape` so that
:func:`backward` can replay it in reverse.

Ops whose derivative is discontinuous (ReLU, max pooling, zero-norm rows
under cosine normalisation) record a *kink signature* on the tape: the
branch pattern taken on this evaluation. :func:`finite_diff_check` compares
signatures between the base point and the perturbed points and skips a
coordinate when a perturbation flips a branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from rnl import aggregation as agg
from rnl import tensor as tc
from rnl.errors import ArgumentError, ContractError, DimensionError, UnsupportedOpError

NORM_EPS = 1e-12


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Optional[int], ...]
    saved: Dict[str, Any]
    shape: Tuple[int, ...]
    name: Optional[str] = None


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape, index):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def id(self):
        return self.index

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __array__(self, *args, **kwargs):
        raise UnsupportedOpError(
            "Var cannot be converted to an array implicitly; use rnl.autodiff ops or .value")

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        raise UnsupportedOpError(f"numpy ufunc {ufunc.__name__!r} has no registered backward rule")

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return hadamard(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(id={self.index}, shape={self.shape}, op={self.tape.nodes[self.index].op!r})"


class Tape:
    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.kinks: List[np.ndarray] = []

    def leaf(self, value, name=None):
        value = tc.asarray(value)
        self.nodes.append(TapeNode("leaf", (), {}, value.shape, name))
        return Var(value, self, len(self.nodes) - 1)

    def record(self, op, value, args, saved):
        inputs = tuple(a.index if isinstance(a, Var) else None for a in args)
        self.nodes.append(TapeNode(op, inputs, saved, np.shape(value)))
        return Var(value, self, len(self.nodes) - 1)

    def note_kink(self, signature):
        self.kinks.append(np.ascontiguousarray(signature))

    def leaves(self):
        return {i: n for i, n in enumerate(self.nodes) if n.op == "leaf"}


_RULES: Dict[str, Callable] = {}


def register(op):
    """Register ``fn(grad, saved) -> tuple of input grads`` as the backward rule for ``op``."""

    def deco(fn):
        _RULES[op] = fn
        return fn

    return deco


def registered_ops():
    return sorted(_RULES)


def value(a):
    return a.value if isinstance(a, Var) else a


def _tape_of(args):
    tapes = {id(a.tape): a.tape for a in args if isinstance(a, Var)}
    if len(tapes) > 1:
        raise ContractError("operands are recorded on different tapes")
    return next(iter(tapes.values()), None)


def _record(op, result, args, **saved):
    tape = _tape_of(args)
    if tape is None:
        return result
    return tape.record(op, result, args, saved)


def _kink(args, signature):
    tape = _tape_of(args)
    if tape is not None:
        tape.note_kink(signature)


def _unbroadcast(grad, shape):
    if grad.shape == tuple(shape):
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _f64(a):
    return np.asarray(a, dtype=np.float64)


# -- ops ---------------------------------------------------------------------

def matmul(a, b):
    va, vb = value(a), value(b)
    return _record("matmul", tc.matmul(va, vb), (a, b), a=va, b=vb)


@register("matmul")
def _matmul_vjp(g, s):
    return g @ _f64(s["b"]).T, _f64(s["a"]).T @ g


def transpose2d(a):
    return _record("transpose2d", tc.transpose2d(value(a)), (a,))


@register("transpose2d")
def _transpose_vjp(g, s):
    return (g.T,)


def reshape(a, shape):
    va = value(a)
    out = np.reshape(va, shape)
    if out.size != va.size:
        raise DimensionError(f"cannot reshape {va.shape} to {shape}")
    return _record("reshape", out, (a,), shape=va.shape)


@register("reshape")
def _reshape_vjp(g, s):
    return (g.reshape(s["shape"]),)


def softmax_rows(a):
    out = tc.softmax_rows(value(a))
    return _record("softmax_rows", out, (a,), out=out)


@register("softmax_rows")
def _softmax_vjp(g, s):
    p = _f64(s["out"])
    return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)


def relu(a):
    va = value(a)
    _kink((a,), va > 0)
    return _record("relu", tc.relu(va), (a,), a=va)


@register("relu")
def _relu_vjp(g, s):
    return (g * (s["a"] > 0),)


def clamp(a, lo, hi):
    """Clip into ``[lo, hi]``; only the lower bound is tracked as a kink."""
    va = value(a)
    _kink((a,), va > lo)
    out = np.clip(va, lo, hi).astype(va.dtype, copy=False)
    return _record("clamp", out, (a,), a=va, lo=lo, hi=hi)


@register("clamp")
def _clamp_vjp(g, s):
    a = s["a"]
    return (g * ((a > s["lo"]) & (a < s["hi"])),)


def add(a, b):
    va, vb = value(a), value(b)
    return _record("add", tc.add(va, vb), (a, b), sa=np.shape(va), sb=np.shape(vb))


@register("add")
def _add_vjp(g, s):
    return _unbroadcast(g, s["sa"]), _unbroadcast(g, s["sb"])


def hadamard(a, b):
    va, vb = value(a), value(b)
    return _record("hadamard", tc.hadamard(va, vb), (a, b), a=va, b=vb)


@register("hadamard")
def _hadamard_vjp(g, s):
    a, b = _f64(s["a"]), _f64(s["b"])
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def scale(a, k):
    return _record("scale", tc.scale(value(a), k), (a,), k=float(k))


@register("scale")
def _scale_vjp(g, s):
    return (g * s["k"],)


def divide(a, k):
    return _record("divide", tc.divide(value(a), k), (a,), k=float(k))


@register("divide")
def _divide_vjp(g, s):
    return (g / s["k"],)


def sum_all(a):
    """Sum of every element, returned with shape ``(1,)``."""
    va = value(a)
    out = np.array([np.sum(_f64(va))], dtype=tc.storage_dtype(va))
    return _record("sum_all", out, (a,), shape=np.shape(va))


@register("sum_all")
def _sum_vjp(g, s):
    return (np.full(s["shape"], g.reshape(-1)[0]),)


def mean_rows(a):
    """Column means of a ``(P, C)`` tensor, shape ``(1, C)``."""
    va = value(a)
    if np.ndim(va) != 2:
        raise DimensionError(f"mean_rows needs a rank-2 tensor, got {np.shape(va)}")
    out = (_f64(va).sum(axis=0, keepdims=True) / va.shape[0]).astype(tc.storage_dtype(va))
    return _record("mean_rows", out, (a,), shape=va.shape)


@register("mean_rows")
def _mean_rows_vjp(g, s):
    p = s["shape"][0]
    return (np.broadcast_to(g / p, s["shape"]).copy(),)


def conv1x1(x, w, bias=None):
    vx, vw = value(x), value(w)
    vb = None if bias is None else value(bias)
    out = tc.conv1x1(vx, vw, vb)
    return _record("conv1x1", out, (x, w, bias), x=vx, w=vw)


@register("conv1x1")
def _conv1x1_vjp(g, s):
    x, w = _f64(s["x"]), _f64(s["w"])
    g2 = g.reshape(-1, w.shape[1])
    gx = (g2 @ w.T).reshape(x.shape)
    gw = x.reshape(-1, w.shape[0]).T @ g2
    return gx, gw, g2.sum(axis=0)


def batch_norm(x, gamma, beta, mean, var, eps=1e-5):
    vals = [value(a) for a in (x, gamma, beta, mean, var)]
    out = tc.batch_norm_inference(*vals, eps=eps)
    return _record("batch_norm", out, (x, gamma, beta, mean, var),
                   x=vals[0], gamma=vals[1], mean=vals[3], var=vals[4], eps=eps)


@register("batch_norm")
def _batch_norm_vjp(g, s):
    x, gamma, mean, var = (_f64(s[k]) for k in ("x", "gamma", "mean", "var"))
    inv = 1.0 / np.sqrt(var + s["eps"])
    axes = tuple(range(g.ndim - 1))
    xhat = (x - mean) * inv
    gx = g * gamma * inv
    ggamma = np.sum(g * xhat, axis=axes)
    gbeta = np.sum(g, axis=axes)
    gmean = -np.sum(g, axis=axes) * gamma * inv
    gvar = np.sum(g * (x - mean), axis=axes) * gamma * -0.5 * inv ** 3
    return gx, ggamma, gbeta, gmean, gvar


def aggregate(x, kernel):
    """Differentiable :func:`rnl.aggregation.aggregate`."""
    vx = value(x)
    if kernel.mode == "conv":
        u = kernel.weights
        b = kernel.bias if kernel.has_bias else None
        if u is None:
            raise ArgumentError("conv-mode aggregation requires kernel weights")
        out = agg.aggregate(vx, kernel.with_weights(value(u), None if b is None else value(b)))
        return _record("channelwise_conv", out, (x, u, b), x=vx, u=value(u))
    if kernel.mode == "avg":
        return _record("avg_pool", agg.avg_pool(vx, kernel.size), (x,), size=kernel.size)
    out, arg = agg.max_pool(vx, kernel.size)
    _kink((x,), arg)
    return _record("max_pool", out, (x,), size=kernel.size, argmax=arg)


@register("channelwise_conv")
def _cwconv_vjp(g, s):
    return agg.channelwise_conv_grads(g, s["x"], s["u"])


@register("avg_pool")
def _avg_pool_vjp(g, s):
    return (agg.avg_pool_grad(g, s["size"]),)


@register("max_pool")
def _max_pool_vjp(g, s):
    return (agg.max_pool_grad(g, s["argmax"], s["size"]),)


def l2_normalize_rows(a, eps=NORM_EPS):
    """Scale each row to unit norm; rows with norm below ``eps`` become zero."""
    va = value(a)
    if np.ndim(va) != 2:
        raise DimensionError(f"l2_normalize_rows needs a rank-2 tensor, got {np.shape(va)}")
    v = _f64(va)
    norm = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    live = norm >= eps
    _kink((a,), live)
    out = np.where(live, v / np.where(live, norm, 1.0), 0.0)
    out = out.astype(tc.storage_dtype(va))
    return _record("l2_normalize_rows", out, (a,), out=out, norm=norm, live=live)


@register("l2_normalize_rows")
def _l2n_vjp(g, s):
    n, norm, live = _f64(s["out"]), s["norm"], s["live"]
    proj = g - n * np.sum(n * g, axis=1, keepdims=True)
    return (np.where(live, proj / np.where(live, norm, 1.0), 0.0),)


def gram(e):
    """``e @ e.T`` made exactly symmetric."""
    ve = _f64(value(e))
    m = ve @ ve.T
    out = ((m + m.T) * 0.5).astype(tc.storage_dtype(value(e)))
    return _record("gram", out, (e,), e=value(e))


@register("gram")
def _gram_vjp(g, s):
    return ((g + g.T) @ _f64(s["e"]),)


def _shift_channels(x, fold, direction):
    """Move the first ``fold`` channels ``direction`` frames and the next fold the other way."""
    out = np.zeros_like(x)
    a, b = fold, 2 * fold
    later, earlier = slice(1, None), slice(None, -1)
    if direction < 0:
        later, earlier = earlier, later
    out[later, ..., :a] = x[earlier, ..., :a]
    out[earlier, ..., a:b] = x[later, ..., a:b]
    out[..., b:] = x[..., b:]
    return out


def shift_fold(channels, fraction):
    """Channels shifted in each direction for a temporal-shift ``fraction``."""
    fraction = Fraction(fraction).limit_denominator(1 << 16)
    if not (0 < fraction <= Fraction(1, 2)):
        raise ArgumentError(f"temporal shift fraction {fraction} must lie in (0, 1/2]")
    moved = channels * fraction
    if moved.denominator != 1 or moved.numerator % 2:
        raise ArgumentError(
            f"channels*fraction = {moved} must be an even integer (channels={channels}, fraction={fraction})")
    return moved.numerator // 2


def temporal_shift(x, fraction=Fraction(1, 4)):
    """Shift ``c*fraction/2`` channels forward one frame and as many backward.

    The first fold moves to frame ``t+1``, the second to ``t-1``; vacated
    frames are zero-filled and the remaining channels pass through.
    """
    vx = value(x)
    if np.ndim(vx) != 4:
        raise DimensionError(f"temporal_shift needs a (T,H,W,C) tensor, got {np.shape(vx)}")
    fold = shift_fold(vx.shape[3], fraction)
    return _record("temporal_shift", _shift_channels(vx, fold, +1), (x,), fold=fold)


@register("temporal_shift")
def _tshift_vjp(g, s):
    return (_shift_channels(g, s["fold"], -1),)


# -- reverse pass --------------------------------------------------------------

def backward(root):
    """Gradients of a scalar ``root`` with respect to every leaf on its tape.

    Returns a dict mapping leaf id (``Var.id``) to a float64 array shaped
    like the leaf. Leaves the root does not depend on get zeros.
    """
    if not isinstance(root, Var):
        raise ContractError("backward() needs a Var recorded on a tape")
    if np.size(root.value) != 1:
        raise ContractError(f"backward() root must be scalar-valued, got shape {root.shape}")
    tape = root.tape
    grads = {root.index: np.ones(root.shape)}
    for idx in range(root.index, -1, -1):
        node = tape.nodes[idx]
        g = grads.get(idx)
        if g is None or node.op == "leaf":
            continue
        rule = _RULES.get(node.op)
        if rule is None:
            raise UnsupportedOpError(f"no backward rule registered for op {node.op!r}")
        for src, gi in zip(node.inputs, rule(g, node.saved)):
            if src is None or gi is None:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(tape.nodes[src].shape)
            grads[src] = grads[src] + gi if src in grads else gi
    return {i: grads.get(i, np.zeros(n.shape)) for i, n in tape.leaves().items()}


# -- finite differences -------------------------------------------------------

@dataclass
class GradientReport:
    analytic: Dict[str, np.ndarray]
    numeric: Dict[str, np.ndarray]
    skipped: Dict[str, List[Tuple[int, ...]]]
    max_rel_err: float
    max_abs_err: float
    checked: int
    worst: Optional[Tuple[str, Tuple[int, ...]]] = None
    tolerance: float = 1e-5
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance

    @property
    def n_skipped(self):
        return sum(len(v) for v in self.skipped.values())

    def summary(self):
        out = {
            "status": "PASS" if self.passed else "FAIL",
            "max_rel_err": float(self.max_rel_err),
            "max_abs_err": float(self.max_abs_err),
            "tolerance": float(self.tolerance),
            "checked": int(self.checked),
            "skipped": int(self.n_skipped),
        }
        if self.worst is not None:
            out["worst"] = f"{self.worst[0]}{list(self.worst[1])}"
        out.update(self.extra)
        return out


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _evaluate(f, point):
    tape = Tape()
    leaves = {k: tape.leaf(v, k) for k, v in point.items()}
    out = f(leaves)
    if not isinstance(out, Var) or np.size(out.value) != 1:
        raise ContractError("tensor program must return a scalar Var")
    return out, leaves, tape


def _same_kinks(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f, point, h=1e-5, tol=1e-5):
    """Compare :func:`backward` against central differences.

    ``f`` maps a dict of leaf ``Var``s (same keys as ``point``) to a scalar
    ``Var``. A bare array ``point`` is treated as ``{"x": point}``. Every
    coordinate is perturbed by ``+-h`` in float64; a coordinate is skipped
    when either perturbation changes the tape's kink signature.
    """
    if h <= 0:
        raise ArgumentError("finite difference step must be positive")
    if not isinstance(point, dict):
        point = {"x": point}
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    out, leaves, tape = _evaluate(f, point)
    grads = backward(out)
    base_kinks = tape.kinks

    analytic, numeric, skipped = {}, {}, {}
    max_rel = max_abs = 0.0
    worst = None
    checked = 0
    for name, arr in point.items():
        ga = grads[leaves[name].id]
        gn = np.full(arr.shape, np.nan)
        skipped[name] = []
        for idx in np.ndindex(arr.shape):
            vals = []
            flipped = False
            for step in (h, -h):
                p = dict(point)
                p[name] = arr.copy()
                p[name][idx] += step
                o, _, t = _evaluate(f, p)
                flipped |= not _same_kinks(t.kinks, base_kinks)
                vals.append(float(o.value.reshape(-1)[0]))
            if flipped:
                skipped[name].append(idx)
                continue
            gn[idx] = (vals[0] - vals[1]) / (2 * h)
            checked += 1
            abs_err = abs(ga[idx] - gn[idx])
            rel_err = float(relative_error(ga[idx], gn[idx]))
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel, worst = rel_err, (name, idx)
        analytic[name], numeric[name] = ga, gn
    return GradientReport(analytic, numeric, skipped, max_rel, max_abs, checked, worst, tol)
