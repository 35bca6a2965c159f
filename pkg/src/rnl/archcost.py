"""Declarative backbone description, shape propagation and cost accounting.

Counting conventions:

* one multiply-accumulate is one FLOP;
* a convolution costs ``kt*kh*kw*cin*cout`` FLOPs per output position and
  has that many weights, plus ``cout`` if it carries a bias;
* batch norm adds two parameters per channel (scale and shift) and no FLOPs;
* pooling adds neither parameters nor FLOPs to the backbone;
* the classifier is a global average pool and a ``c_last x classes`` FC
  layer with bias.

Attention blocks inserted into a stage are costed at that stage's output
shape; see :func:`block_cost` for their breakdown.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

from rnl.aggregation import RegionKernel, kernel_param_count
from rnl.errors import ArgumentError, ParseError, ShapeError

Triple = Tuple[int, int, int]
Shape = Tuple[int, int, int, int]


@dataclass(frozen=True)
class Conv:
    kernel: Triple
    out_channels: int
    stride: Triple = (1, 1, 1)
    bias: bool = False
    bn: bool = True


@dataclass(frozen=True)
class Pool:
    kernel: Triple
    stride: Triple = (1, 1, 1)
    kind: str = "max"


@dataclass(frozen=True)
class Bottleneck:
    """Residual bottleneck ``(kernel, channels)`` triple repeated ``repeat`` times.

    ``stride`` applies to the middle convolution and the projection shortcut
    of the first repetition only.
    """

    layers: Tuple[Tuple[Triple, int], ...]
    repeat: int = 1
    stride: Triple = (1, 1, 1)


@dataclass(frozen=True)
class Insertion:
    kind: str
    count: int
    positions: Tuple[int, ...] = ()
    kernel: RegionKernel = field(default_factory=RegionKernel)
    reduction: int = 2


Op = Union[Conv, Pool, Bottleneck]


@dataclass
class Stage:
    name: str
    ops: List[Op] = field(default_factory=list)
    insertions: List[Insertion] = field(default_factory=list)


@dataclass
class ArchSpec:
    stages: List[Stage] = field(default_factory=list)
    classes: int = 0


@dataclass
class StageCost:
    name: str
    shape: Shape
    params: int
    flops: int
    attention_params: int = 0
    attention_flops: int = 0


@dataclass
class CostReport:
    input_shape: Shape
    stages: List[StageCost]

    @property
    def params(self):
        return sum(s.params for s in self.stages)

    @property
    def flops(self):
        return sum(s.flops for s in self.stages)

    def stage(self, name):
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


BLOCK_KINDS = ("nl", "rnl", "se", "chain")


def evenly_spaced(count, repeats):
    """Insertion indices after residual blocks, e.g. 2 of 4 -> (1, 3)."""
    if count > repeats:
        raise ArgumentError(f"cannot insert {count} blocks after {repeats} residual blocks")
    return tuple(round((i + 1) * repeats / count) - 1 for i in range(count))


_RESNET50 = [("res2", 64, 256, 3, (1, 1, 1)), ("res3", 128, 512, 4, (1, 2, 2)),
             ("res4", 256, 1024, 6, (1, 2, 2)), ("res5", 512, 2048, 3, (1, 2, 2))]


def resnet50_spec(block=None, counts=None, kernel=None, classes=400):
    """The TSM ResNet-50 backbone.

    With ``block`` set, ``counts`` blocks of that kind (default two in res3
    and three in res4) are inserted at evenly spaced residual positions.
    """
    counts = counts or {"res3": 2, "res4": 3}
    kernel = (kernel or RegionKernel()).geometry()
    stages = [Stage("conv1", [Conv((1, 7, 7), 64, (1, 2, 2))]),
              Stage("pool1", [Pool((1, 3, 3), (1, 2, 2))])]
    for name, mid, out, n, stride in _RESNET50:
        st = Stage(name, [Bottleneck((((1, 1, 1), mid), ((1, 3, 3), mid), ((1, 1, 1), out)), n, stride)])
        if block and counts.get(name):
            st.insertions.append(Insertion(block, counts[name], evenly_spaced(counts[name], n), kernel))
        stages.append(st)
    return ArchSpec(stages, classes)


# -- shapes ------------------------------------------------------------------

def _strided(shape, stride, where):
    t, h, w, c = shape
    out = []
    for n, s, axis in zip((t, h, w), stride, "THW"):
        if s < 1 or n % s:
            raise ShapeError(f"stage {where}: extent {axis}={n} not divisible by stride {s}")
        out.append(n // s)
    return (out[0], out[1], out[2], c)


def _op_steps(op, shape, where):
    """Yield ``(kernel, cin, cout, out_shape, bias, bn)`` for every convolution in ``op``."""
    if isinstance(op, Conv):
        out = _strided(shape, op.stride, where)[:3] + (op.out_channels,)
        yield op.kernel, shape[3], op.out_channels, out, op.bias, op.bn
        return
    if isinstance(op, Pool):
        return
    cin = shape[3]
    for r in range(op.repeat):
        stride = op.stride if r == 0 else (1, 1, 1)
        cur = shape if r == 0 else out
        block_in = cur[3]
        for i, (k, c) in enumerate(op.layers):
            s = stride if i == 1 else (1, 1, 1)
            nxt = _strided(cur, s, where)[:3] + (c,)
            yield k, cur[3], c, nxt, False, True
            cur = nxt
        out = cur
        if r == 0 and (stride != (1, 1, 1) or block_in != out[3]):
            yield (1, 1, 1), cin, out[3], out, False, True


def _op_output(op, shape, where):
    if isinstance(op, Pool):
        return _strided(shape, op.stride, where)
    out = shape
    for *_, o, _b, _bn in _op_steps(op, shape, where):
        out = o
    return out


def propagate_shapes(spec, input_shape):
    """Output shape ``(T, H, W, C)`` after each stage."""
    shape = tuple(input_shape)
    out = []
    for st in spec.stages:
        for op in st.ops:
            shape = _op_output(op, shape, st.name)
        out.append((st.name, shape))
    return out


# -- costs -------------------------------------------------------------------

def block_cost(kind, shape, kernel=None, reduction=2):
    """``(params, flops, breakdown)`` of one attention block at ``shape``.

    ``breakdown`` separates FLOPs of the 1x1x1 projections, the region
    aggregation and the two ``P x P x C/r`` affinity products.
    """
    t, h, w, c = shape
    p = t * h * w
    cr = c // reduction
    kernel = kernel or RegionKernel()
    if kind == "nl":
        params = 4 * c * cr + 2 * c
        parts = {"pointwise": 4 * c * cr * p, "aggregation": 0, "affinity": 2 * p * p * cr}
    elif kind == "rnl":
        params = 2 * c * cr + kernel_param_count(kernel, cr) + 2 * c
        parts = {"pointwise": 2 * c * cr * p, "aggregation": kernel.volume * cr * p,
                 "affinity": 2 * p * p * cr}
    elif kind == "se":
        params = 2 * c * cr + 2 * cr
        parts = {"pointwise": 2 * c * cr, "aggregation": 0, "affinity": 0}
    elif kind == "chain":
        sp, _, sb = block_cost("se", shape, kernel, reduction)
        rp, _, rb = block_cost("rnl", shape, kernel, reduction)
        params = sp + rp
        parts = {k: sb[k] + rb[k] for k in sb}
    else:
        raise ArgumentError(f"unknown attention block kind {kind!r}")
    return params, sum(parts.values()), parts


def count_cost(spec, input_shape, pointwise_only=False):
    """Per-stage and total parameter/FLOP ledger.

    ``pointwise_only`` drops the aggregation and affinity FLOPs of attention
    blocks, which is how profilers that only hook convolution layers count.
    """
    shape = tuple(input_shape)
    rows = []
    for st in spec.stages:
        params = flops = 0
        for op in st.ops:
            for k, cin, cout, out, bias, bn in _op_steps(op, shape, st.name):
                weights = k[0] * k[1] * k[2] * cin * cout
                params += weights + (cout if bias else 0) + (2 * cout if bn else 0)
                flops += weights * out[0] * out[1] * out[2]
            shape = _op_output(op, shape, st.name)
        ap = af = 0
        for ins in st.insertions:
            bp, bf, parts = block_cost(ins.kind, shape, ins.kernel, ins.reduction)
            if pointwise_only:
                bf = parts["pointwise"]
            ap += ins.count * bp
            af += ins.count * bf
        rows.append(StageCost(st.name, shape, params + ap, flops + af, ap, af))
    if spec.classes:
        c = shape[3]
        rows.append(StageCost("fc", (1, 1, 1, spec.classes), c * spec.classes + spec.classes,
                              c * spec.classes))
    return CostReport(tuple(input_shape), rows)


# Reported model sizes (params in M, FLOPs in G) for an 8x224x224 clip.
PUBLISHED_FIGURES = {
    "baseline": (24.33, 32.89),
    "+5 SE": (24.79, 32.89),
    "+5 NL": (31.69, 49.38),
    "+5 RNL": (35.48, 41.15),
    "+5 SE+RNL": (35.95, 41.16),
}
PUBLISHED_SINGLE_RES3 = {"conv": (2.67, 1.65), "avg": (0.26, 1.65), "max": (0.26, 1.65)}


@dataclass
class Comparison:
    label: str
    params: int
    flops: int
    pointwise_flops: int
    published_params_m: float
    published_flops_g: float

    @property
    def params_dev(self):
        return self.params / 1e6 / self.published_params_m - 1.0

    @property
    def flops_dev(self):
        return self.flops / 1e9 / self.published_flops_g - 1.0


def published_comparison(input_shape=(8, 224, 224, 3)):
    """Definitional counts next to the published figures.

    The whole-model rows compare full networks. The single-block rows compare
    one RNL block inserted in res3 (block cost only).
    """
    rows = []
    variants = {"baseline": None, "+5 SE": "se", "+5 NL": "nl", "+5 RNL": "rnl", "+5 SE+RNL": "chain"}
    for label, kind in variants.items():
        spec = resnet50_spec(kind)
        full = count_cost(spec, input_shape)
        pw = count_cost(spec, input_shape, pointwise_only=True)
        rows.append(Comparison(label, full.params, full.flops, pw.flops, *PUBLISHED_FIGURES[label]))
    res3 = dict(propagate_shapes(resnet50_spec(), input_shape))["res3"]
    for mode, (pm, fg) in PUBLISHED_SINGLE_RES3.items():
        params, flops, parts = block_cost("rnl", res3, RegionKernel(3, 7, 7, mode))
        rows.append(Comparison(f"1 RNL@res3 ({mode})", params, flops, parts["pointwise"], pm, fg))
    return rows


# -- text format -------------------------------------------------------------

def _triple(t):
    return "x".join(str(v) for v in t)


def _csv(t):
    return ",".join(str(v) for v in t)


def emit_arch(spec):
    lines = ["# rnl architecture", f"classes {spec.classes}"]
    for st in spec.stages:
        lines.append(f"stage {st.name}")
        for op in st.ops:
            if isinstance(op, Conv):
                lines.append(f"  conv {_triple(op.kernel)} {op.out_channels} stride={_csv(op.stride)}"
                             f" bias={int(op.bias)} bn={int(op.bn)}")
            elif isinstance(op, Pool):
                lines.append(f"  {op.kind}pool {_triple(op.kernel)} stride={_csv(op.stride)}")
            else:
                layers = " ".join(f"{_triple(k)}:{c}" for k, c in op.layers)
                lines.append(f"  bottleneck {layers} repeat={op.repeat} stride={_csv(op.stride)}")
        for ins in st.insertions:
            k = ins.kernel
            lines.append(f"  insert {ins.kind} count={ins.count} at={_csv(ins.positions)}"
                         f" ftheta={k.mode}:{_triple(k.size)} bias={int(k.has_bias)}"
                         f" reduction={ins.reduction}")
    return "\n".join(lines) + "\n"


_INT = re.compile(r"^[0-9]+$")


def _parse_int(tok, what, lineno):
    if not _INT.match(tok):
        raise ParseError(f"bad {what} {tok!r}", lineno)
    return int(tok)


def _parse_ints(tok, sep, n, what, lineno):
    parts = tok.split(sep)
    if len(parts) != n:
        raise ParseError(f"bad {what} {tok!r}: expected {n} values separated by {sep!r}", lineno)
    return tuple(_parse_int(p, what, lineno) for p in parts)


def _options(tokens, allowed, lineno):
    opts = {}
    for tok in tokens:
        key, eq, val = tok.partition("=")
        if not eq or key not in allowed:
            raise ParseError(f"unexpected token {tok!r}", lineno)
        opts[key] = val
    return opts


def _flag(val, what, lineno):
    if val not in ("0", "1"):
        raise ParseError(f"bad {what} flag {val!r}", lineno)
    return val == "1"


def parse_arch(text):
    spec = ArchSpec()
    stage: Optional[Stage] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, *rest = line.split()
        if head == "classes":
            if len(rest) != 1:
                raise ParseError("classes takes one integer", lineno)
            spec.classes = _parse_int(rest[0], "class count", lineno)
            continue
        if head == "stage":
            if len(rest) != 1:
                raise ParseError("stage takes one name", lineno)
            stage = Stage(rest[0])
            spec.stages.append(stage)
            continue
        if stage is None:
            raise ParseError(f"{head!r} outside a stage", lineno)
        if head == "conv":
            if len(rest) < 2:
                raise ParseError("conv needs a kernel and a channel count", lineno)
            o = _options(rest[2:], {"stride", "bias", "bn"}, lineno)
            stage.ops.append(Conv(_parse_ints(rest[0], "x", 3, "kernel", lineno),
                                  _parse_int(rest[1], "channel count", lineno),
                                  _parse_ints(o.get("stride", "1,1,1"), ",", 3, "stride", lineno),
                                  _flag(o.get("bias", "0"), "bias", lineno),
                                  _flag(o.get("bn", "1"), "bn", lineno)))
        elif head in ("maxpool", "avgpool"):
            if not rest:
                raise ParseError(f"{head} needs a kernel", lineno)
            o = _options(rest[1:], {"stride"}, lineno)
            stage.ops.append(Pool(_parse_ints(rest[0], "x", 3, "kernel", lineno),
                                  _parse_ints(o.get("stride", "1,1,1"), ",", 3, "stride", lineno),
                                  head[:3]))
        elif head == "bottleneck":
            layer_toks = [t for t in rest if "=" not in t]
            if len(layer_toks) != 3:
                raise ParseError("bottleneck needs exactly three kernel:channels layers", lineno)
            layers = []
            for tok in layer_toks:
                k, colon, c = tok.partition(":")
                if not colon:
                    raise ParseError(f"bad layer {tok!r}, expected KTxKHxKW:CHANNELS", lineno)
                layers.append((_parse_ints(k, "x", 3, "kernel", lineno), _parse_int(c, "channel count", lineno)))
            o = _options([t for t in rest if "=" in t], {"repeat", "stride"}, lineno)
            stage.ops.append(Bottleneck(tuple(layers), _parse_int(o.get("repeat", "1"), "repeat", lineno),
                                        _parse_ints(o.get("stride", "1,1,1"), ",", 3, "stride", lineno)))
        elif head == "insert":
            if not rest or rest[0] not in BLOCK_KINDS:
                raise ParseError(f"insert needs a block kind from {BLOCK_KINDS}", lineno)
            o = _options(rest[1:], {"count", "at", "ftheta", "bias", "reduction"}, lineno)
            count = _parse_int(o.get("count", "1"), "count", lineno)
            at = o.get("at", "")
            positions = tuple(_parse_int(p, "position", lineno) for p in at.split(",")) if at else ()
            mode, colon, size = o.get("ftheta", "conv:3x7x7").partition(":")
            if not colon:
                raise ParseError(f"bad ftheta {o['ftheta']!r}, expected MODE:KTxKHxKW", lineno)
            try:
                kernel = RegionKernel(*_parse_ints(size, "x", 3, "kernel", lineno), mode=mode,
                                      has_bias=_flag(o.get("bias", "0"), "bias", lineno))
            except ArgumentError as exc:
                raise ParseError(str(exc), lineno) from exc
            stage.insertions.append(Insertion(rest[0], count, positions, kernel,
                                              _parse_int(o.get("reduction", "2"), "reduction", lineno)))
        else:
            raise ParseError(f"unknown op {head!r}", lineno)
    return spec
