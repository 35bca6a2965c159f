"""Attention blocks over ``(T, H, W, C)`` feature clips.

All blocks are residual recalibrations and preserve the input shape. They
are written against :mod:`rnl.autodiff` ops, so the same forward code runs
on plain arrays or on tape-recorded ``Var`` handles.

Parameter names
---------------
``nl``   ``w_theta, w_phi, w_g`` (C x C/r), ``w_z`` (C/r x C)
``rnl``  ``w_g`` (C x C/r), ``w_z`` (C/r x C), ``u`` (kt x kh x kw x C/r) in
         conv mode, ``u_bias`` (C/r) when the kernel has a bias
``se``   ``w1`` (C/r x C), ``w2`` (C x C/r), ``bn_*`` over C/r

``nl`` and ``rnl`` carry ``bn_gamma, bn_beta, bn_mean, bn_var`` (C) after
``w_z`` when ``residual_bn`` is set. The residual gamma starts at zero so
a freshly initialised block is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Mapping, Optional

import numpy as np

from rnl import autodiff as ad
from rnl import similarity as sim
from rnl.aggregation import RegionKernel
from rnl.errors import ArgumentError, DimensionError
from rnl.tensor import FeatureClip

KINDS = ("nl", "rnl", "se")
BN_NAMES = ("bn_gamma", "bn_beta", "bn_mean", "bn_var")


@dataclass(frozen=True)
class BlockConfig:
    kind: str
    channels: int
    reduction: int = 2
    form: str = "gaussian"
    kernel: RegionKernel = field(default_factory=RegionKernel)
    residual_bn: bool = True
    bn_eps: float = 1e-5
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"unknown block kind {self.kind!r}; expected one of {KINDS}")
        if self.channels < 1 or self.reduction < 1 or self.channels % self.reduction:
            raise ArgumentError(
                f"channels={self.channels} must be a positive multiple of reduction={self.reduction}")
        sim.check_form(self.form)
        object.__setattr__(self, "kernel", self.kernel.geometry())

    @property
    def reduced(self):
        return self.channels // self.reduction

    def param_shapes(self):
        c, cr = self.channels, self.reduced
        if self.kind == "se":
            shapes = {"w1": (cr, c), "w2": (c, cr)}
            shapes.update({n: (cr,) for n in BN_NAMES})
            return shapes
        if self.kind == "nl":
            shapes = {"w_theta": (c, cr), "w_phi": (c, cr), "w_g": (c, cr), "w_z": (cr, c)}
        else:
            shapes = {"w_g": (c, cr), "w_z": (cr, c)}
            if self.kernel.mode == "conv":
                shapes["u"] = self.kernel.size + (cr,)
                if self.kernel.has_bias:
                    shapes["u_bias"] = (cr,)
        if self.residual_bn:
            shapes.update({n: (c,) for n in BN_NAMES})
        return shapes

    def with_params(self, **updates):
        return replace(self, params={**self.params, **updates})

    def validate_params(self, params=None):
        params = self.params if params is None else params
        for name, shape in self.param_shapes().items():
            if name not in params:
                raise ArgumentError(f"{self.kind} block is missing parameter {name!r}")
            got = tuple(np.shape(ad.value(params[name])))
            if got != tuple(shape):
                raise DimensionError(f"parameter {name!r} has shape {got}, expected {tuple(shape)}")


@dataclass
class BlockOutput:
    z: Any
    affinity: Optional[sim.AffinityMatrix] = None
    se_vector: Optional[Any] = None


def _fan_in(name, shapes):
    if name in ("u", "u_bias"):
        return int(np.prod(shapes["u"][:3]))
    # w1/w2 are stored (out, in); the 1x1x1 convolutions are stored (in, out)
    return shapes[name][1] if name in ("w1", "w2") else shapes[name][0]


def init_params(cfg, seed=0, dtype=np.float64, zero_gamma=True):
    """Return ``cfg`` with freshly drawn parameters.

    Weights are uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` from a
    generator seeded by ``seed``. BN starts at gamma=1, beta=0, mean=0,
    var=1, except that the residual gamma of ``nl``/``rnl`` is zero when
    ``zero_gamma`` is set.
    """
    rng = np.random.default_rng(seed)
    params = {}
    shapes = cfg.param_shapes()
    for name, shape in shapes.items():
        if name in BN_NAMES:
            continue
        bound = 1.0 / np.sqrt(_fan_in(name, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    if "bn_gamma" in shapes:
        n = shapes["bn_gamma"][0]
        gamma = 0.0 if (zero_gamma and cfg.kind != "se") else 1.0
        params["bn_gamma"] = np.full(n, gamma, dtype=dtype)
        params["bn_beta"] = np.zeros(n, dtype=dtype)
        params["bn_mean"] = np.zeros(n, dtype=dtype)
        params["bn_var"] = np.ones(n, dtype=dtype)
    return replace(cfg, params=params)


def randomize_bn(cfg, seed=0):
    """Replace BN statistics with random non-degenerate values (for testing)."""
    if "bn_gamma" not in cfg.param_shapes():
        return cfg
    rng = np.random.default_rng(seed)
    n = cfg.param_shapes()["bn_gamma"][0]
    dtype = np.asarray(cfg.params["bn_gamma"]).dtype
    draw = lambda lo, hi: rng.uniform(lo, hi, n).astype(dtype)
    return cfg.with_params(bn_gamma=draw(0.5, 1.5), bn_beta=draw(-0.5, 0.5),
                           bn_mean=draw(-0.5, 0.5), bn_var=draw(0.5, 1.5))


def make_block(kind, channels, seed=0, dtype=np.float64, zero_gamma=True, **kwargs):
    return init_params(BlockConfig(kind, channels, **kwargs), seed, dtype, zero_gamma)


def _unwrap(x):
    if isinstance(x, FeatureClip):
        return x.tensor, True
    shape = np.shape(ad.value(x))
    if len(shape) != 4:
        raise DimensionError(f"block input must be (T,H,W,C), got shape {shape}")
    return x, False


def _wrap(z, was_clip):
    return FeatureClip(z) if was_clip else z


def _params(cfg, params, kind, channels):
    if cfg.kind != kind:
        raise ArgumentError(f"expected a {kind} block config, got {cfg.kind}")
    if channels != cfg.channels:
        raise DimensionError(f"input has {channels} channels, block expects {cfg.channels}")
    p = dict(cfg.params)
    if params:
        p.update(params)
    cfg.validate_params(p)
    return p


def _residual(y, x, cfg, p):
    out = ad.conv1x1(y, p["w_z"])
    if cfg.residual_bn:
        out = ad.batch_norm(out, p["bn_gamma"], p["bn_beta"], p["bn_mean"], p["bn_var"], cfg.bn_eps)
    return ad.add(out, x)


def region_embedding(g, cfg, params=None):
    """Aggregated embedding ``F_theta(g)`` of a ``(T, H, W, C/r)`` tensor."""
    p = cfg.params if params is None else params
    kernel = cfg.kernel
    if kernel.mode == "conv":
        kernel = kernel.with_weights(p["u"], p.get("u_bias"))
    return ad.aggregate(g, kernel)


def rnl_forward(x, cfg, params=None):
    """Region-based non-local block.

    ``g = x W_g``; ``e = F_theta(g)``; ``y = normalize(f(e, e)) g``;
    ``z = BN(y W_z) + x``.
    """
    x, was_clip = _unwrap(x)
    t, h, w, c = np.shape(ad.value(x))
    p = _params(cfg, params, "rnl", c)
    pos, cr = t * h * w, cfg.reduced

    g = ad.conv1x1(x, p["w_g"])
    e = ad.reshape(region_embedding(g, cfg, p), (pos, cr))
    a = sim.normalize(sim.affinity(e, cfg.form))
    y = ad.matmul(a.w, ad.reshape(g, (pos, cr)))
    z = _residual(ad.reshape(y, (t, h, w, cr)), x, cfg, p)
    return BlockOutput(_wrap(z, was_clip), affinity=a)


def nl_forward(x, cfg, params=None):
    """Embedded-gaussian non-local block."""
    x, was_clip = _unwrap(x)
    t, h, w, c = np.shape(ad.value(x))
    p = _params(cfg, params, "nl", c)
    pos, cr = t * h * w, cfg.reduced

    theta = ad.reshape(ad.conv1x1(x, p["w_theta"]), (pos, cr))
    phi = ad.reshape(ad.conv1x1(x, p["w_phi"]), (pos, cr))
    g = ad.reshape(ad.conv1x1(x, p["w_g"]), (pos, cr))
    attn = ad.softmax_rows(ad.matmul(theta, ad.transpose2d(phi)))
    y = ad.matmul(attn, g)
    z = _residual(ad.reshape(y, (t, h, w, cr)), x, cfg, p)
    return BlockOutput(_wrap(z, was_clip), affinity=sim.AffinityMatrix(attn, "gaussian", True))


def se_forward(x, cfg, params=None):
    """Squeeze-excitation with additive recalibration ``v = x + s``."""
    x, was_clip = _unwrap(x)
    t, h, w, c = np.shape(ad.value(x))
    p = _params(cfg, params, "se", c)

    squeezed = ad.mean_rows(ad.reshape(x, (t * h * w, c)))
    hidden = ad.matmul(squeezed, ad.transpose2d(p["w1"]))
    hidden = ad.batch_norm(hidden, p["bn_gamma"], p["bn_beta"], p["bn_mean"], p["bn_var"], cfg.bn_eps)
    s = ad.matmul(ad.relu(hidden), ad.transpose2d(p["w2"]))
    v = ad.add(x, ad.reshape(s, (1, 1, 1, c)))
    return BlockOutput(_wrap(v, was_clip), se_vector=ad.reshape(s, (c,)))


def chain_forward(x, se_cfg, rnl_cfg, se_params=None, rnl_params=None):
    """SE block followed by an RNL block."""
    se = se_forward(x, se_cfg, se_params)
    out = rnl_forward(se.z, rnl_cfg, rnl_params)
    return BlockOutput(out.z, affinity=out.affinity, se_vector=se.se_vector)


def temporal_shift(x, fraction=Fraction(1, 4)):
    x, was_clip = _unwrap(x)
    return _wrap(ad.temporal_shift(x, fraction), was_clip)


FORWARDS = {"nl": nl_forward, "rnl": rnl_forward, "se": se_forward}


def forward(x, cfg, params=None):
    return FORWARDS[cfg.kind](x, cfg, params)


def attention_map(out, ref, dims):
    """Attention map of a block output at reference position ``ref = (t, h, w)``."""
    if out.affinity is None:
        raise ArgumentError("this block has no spatio-temporal attention to export")
    return sim.attention_row(out.affinity, sim.position_index(ref, dims), dims)
