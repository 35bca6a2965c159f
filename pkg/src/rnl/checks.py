"""Random gradient-check instances for every registered op and every block.

Each case draws its inputs from ``numpy.random.default_rng(seed)`` and
reduces the op output to a scalar with a random projection
``L = sum(r * out)`` so no coordinate has a structurally zero gradient.
Block weights are drawn uniformly from [-1, 1]; with fan-in-scaled weights
many true gradients fall near 1e-5, where the rounding noise of a
``h = 1e-5`` central difference is of the same order as the tolerance.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from rnl import autodiff as ad
from rnl import blocks as B
from rnl.aggregation import RegionKernel

GRAD_SHAPE = (2, 4, 4, 4)


def _project(out, r):
    return ad.sum_all(ad.hadamard(out, r))


def _unary(op, shape):
    def build(rng):
        a = rng.standard_normal(shape)
        r = rng.standard_normal(np.shape(op(a)))
        return (lambda v: _project(op(v["a"]), r)), {"a": a}

    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = rng.standard_normal(sa), rng.standard_normal(sb)
        r = rng.standard_normal(np.shape(op(a, b)))
        return (lambda v: _project(op(v["a"], v["b"]), r)), {"a": a, "b": b}

    return build


def _conv1x1(rng):
    point = {"x": rng.standard_normal((2, 3, 3, 4)), "w": rng.standard_normal((4, 3)),
             "b": rng.standard_normal(3)}
    r = rng.standard_normal((2, 3, 3, 3))
    return (lambda v: _project(ad.conv1x1(v["x"], v["w"], v["b"]), r)), point


def _batch_norm(rng):
    c = 3
    point = {"x": rng.standard_normal((2, 3, 3, c)), "gamma": rng.uniform(0.5, 1.5, c),
             "beta": rng.standard_normal(c), "mean": rng.standard_normal(c) * 0.5,
             "var": rng.uniform(0.5, 1.5, c)}
    r = rng.standard_normal((2, 3, 3, c))
    f = lambda v: _project(ad.batch_norm(v["x"], v["gamma"], v["beta"], v["mean"], v["var"]), r)
    return f, point


def _aggregate(mode, size=(3, 3, 3)):
    def build(rng):
        point = {"x": rng.standard_normal((2, 4, 4, 3))}
        if mode == "conv":
            point["u"] = rng.standard_normal(size + (3,))
            point["b"] = rng.standard_normal(3)
        r = rng.standard_normal((2, 4, 4, 3))

        def f(v):
            k = RegionKernel(*size, mode=mode, has_bias=mode == "conv")
            if mode == "conv":
                k = k.with_weights(v["u"], v["b"])
            return _project(ad.aggregate(v["x"], k), r)

        return f, point

    return build


OP_CASES = {
    "matmul": _binary(ad.matmul, (3, 4), (4, 2)),
    "transpose2d": _unary(ad.transpose2d, (3, 5)),
    "reshape": _unary(lambda a: ad.reshape(a, (6, 2)), (2, 3, 2)),
    "softmax_rows": _unary(ad.softmax_rows, (4, 6)),
    "relu": _unary(ad.relu, (5, 4)),
    "clamp": _unary(lambda a: ad.clamp(a, 0.0, 1.0), (5, 4)),
    "add": _binary(ad.add, (5, 3), (1, 3)),
    "hadamard": _binary(ad.hadamard, (4, 3), (4, 1)),
    "scale": _unary(lambda a: ad.scale(a, -1.7), (3, 3)),
    "divide": _unary(lambda a: ad.divide(a, 3.0), (3, 3)),
    "sum_all": _unary(ad.sum_all, (3, 4)),
    "mean_rows": _unary(ad.mean_rows, (6, 3)),
    "conv1x1": _conv1x1,
    "batch_norm": _batch_norm,
    "channelwise_conv": _aggregate("conv"),
    "avg_pool": _aggregate("avg"),
    "max_pool": _aggregate("max"),
    "l2_normalize_rows": _unary(ad.l2_normalize_rows, (5, 3)),
    "gram": _unary(ad.gram, (5, 3)),
    "temporal_shift": _unary(lambda a: ad.temporal_shift(a, Fraction(1, 2)), (3, 2, 2, 4)),
}


def op_gradcheck(op, seed, h=1e-5, tol=1e-5):
    f, point = OP_CASES[op](np.random.default_rng(seed))
    return ad.finite_diff_check(f, point, h=h, tol=tol)


def random_block(kind, channels, seed, form="gaussian", kernel=None, residual_bn=True, reduction=2):
    """Block with unit-scale random weights and random BN statistics."""
    kernel = kernel or RegionKernel(3, 3, 3)
    cfg = B.BlockConfig(kind, channels, reduction=reduction, form=form, kernel=kernel,
                        residual_bn=residual_bn)
    rng = np.random.default_rng([seed, 1])
    params = {n: rng.uniform(-1.0, 1.0, s) for n, s in cfg.param_shapes().items()
              if n not in B.BN_NAMES}
    cfg = B.BlockConfig.with_params(B.init_params(cfg, seed, zero_gamma=False), **params)
    return B.randomize_bn(cfg, seed)


def block_gradcheck(kind, seed, shape=GRAD_SHAPE, form="gaussian", kernel=None, h=1e-5, tol=1e-5):
    """Check d(sum(r * z))/d(input, params) for one block kind.

    ``kind`` is one of ``nl``, ``rnl``, ``se``, ``chain`` or ``tsm``.
    """
    if kind == "tsm":
        shape = tuple(shape[:3]) + (8,)  # 1/4 of the channels must be even
    rng = np.random.default_rng([seed, 0])
    x = rng.standard_normal(shape)
    r = rng.standard_normal(shape)
    c = shape[3]
    if kind == "tsm":
        return ad.finite_diff_check(lambda v: _project(B.temporal_shift(v["x"]), r), {"x": x}, h, tol)
    if kind == "chain":
        se_cfg = random_block("se", c, seed)
        rnl_cfg = random_block("rnl", c, seed + 1000, form=form, kernel=kernel)
        point = {"x": x}
        point.update({f"se.{k}": v for k, v in se_cfg.params.items()})
        point.update({f"rnl.{k}": v for k, v in rnl_cfg.params.items()})

        def f(v):
            sp = {k[3:]: a for k, a in v.items() if k.startswith("se.")}
            rp = {k[4:]: a for k, a in v.items() if k.startswith("rnl.")}
            return _project(B.chain_forward(v["x"], se_cfg, rnl_cfg, sp, rp).z, r)

        return ad.finite_diff_check(f, point, h, tol)
    cfg = random_block(kind, c, seed, form=form, kernel=kernel)
    point = {"x": x, **cfg.params}

    def f(v):
        params = {k: a for k, a in v.items() if k != "x"}
        return _project(B.forward(v["x"], cfg, params).z, r)

    return ad.finite_diff_check(f, point, h, tol)
