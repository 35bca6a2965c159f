"""``rnl`` command-line front end.

Subcommands: ``gen``, ``run``, ``oracle``, ``gradcheck``, ``cost``.

Every failure prints one line ``rnl-error: <kind>: <message>`` on stderr
and exits 2; a completed check whose result exceeds its tolerance exits 1.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import tomli_w

from rnl import archcost, checks, oracle, synth
from rnl import blocks as B
from rnl.aggregation import RegionKernel
from rnl.config import load_config, parse_value
from rnl.errors import ArgumentError, RNLError
from rnl.export import export_map
from rnl.tensor import FLOAT_DTYPES, load_tensor, save_tensor


class CLIError(RNLError):
    kind = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _ref(text):
    try:
        t, h, w = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"reference position must be t,h,w, got {text!r}")
    return [t, h, w]


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        dims = ()
    if len(dims) != 4 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"input shape must be TxHxWxC, got {text!r}")
    return dims


def build_parser():
    p = _Parser(prog="rnl", description="Region-based non-local attention toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="seed for synthetic inputs and weights")
        sp.add_argument("--precision", choices=sorted(FLOAT_DTYPES))
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("gen", help="write a synthetic clip as an RNLT tensor"))
    g.add_argument("--output", help="tensor path (default OUT/clip.rnlt)")
    r = common(sub.add_parser("run", help="run one block and export attention maps"))
    r.add_argument("--ref", type=_ref, action="append", help="reference position t,h,w (repeatable)")
    o = common(sub.add_parser("oracle", help="compare the matrix path with the loop oracle"))
    o.add_argument("--corrupt", action="store_true", help="perturb weights of the matrix path")
    common(sub.add_parser("gradcheck", help="finite-difference check of one block"))
    c = sub.add_parser("cost", help="parameter and FLOP ledger of an architecture")
    c.add_argument("--arch", help="architecture file (default: built-in TSM ResNet-50)")
    c.add_argument("--input", type=_shape, default=(8, 224, 224, 3), help="TxHxWxC")
    c.add_argument("--format", choices=("table", "toml"), default="table")
    c.add_argument("--published", action="store_true", help="also print published figures")
    return p


def _split_overrides(argv):
    """Pull ``--dotted.key VALUE`` pairs out of ``argv``."""
    rest, overrides = [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and "." in tok.split("=", 1)[0]:
            key, eq, val = tok[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise CLIError(f"override {tok} needs a value")
                val = argv[i + 1]
                i += 1
            overrides.append((key, parse_value(val)))
        else:
            rest.append(tok)
        i += 1
    return rest, overrides


def _resolve(args, overrides):
    for flag in ("seed", "precision", "out"):
        if getattr(args, flag, None) is not None:
            overrides.append((flag, getattr(args, flag)))
    if getattr(args, "ref", None):
        overrides.append(("refs", args.ref))
    if getattr(args, "corrupt", False):
        overrides.append(("oracle.corrupt", True))
    return load_config(getattr(args, "config", None), overrides)


def _dtype(cfg):
    return FLOAT_DTYPES[cfg["precision"]]


def _kernel(cfg):
    f = cfg["block"]["ftheta"]
    return RegionKernel(f["kt"], f["kh"], f["kw"], mode=f["mode"], has_bias=f["bias"])


def _input(cfg):
    """``(data, mask)`` from ``input.path`` or the synthetic generator."""
    inp = cfg["input"]
    if inp["path"]:
        return load_tensor(inp["path"]).astype(_dtype(cfg)), None
    clip = synth.make_clip(inp["pattern"], inp["shape"], seed=cfg["seed"], dtype=_dtype(cfg),
                           **_pattern_args(inp))
    return clip.data, clip.mask


def _pattern_args(inp):
    if inp["pattern"] == "constant":
        return {"value": inp["value"]}
    if inp["pattern"] == "moving-dot":
        return {k: inp[k] for k in ("radius", "amplitude", "noise")} | {"velocity": tuple(inp["velocity"])}
    return {}


def _block_cfg(cfg, kind, channels):
    b = cfg["block"]
    kw = dict(reduction=b["reduction"], form=b["form"], kernel=_kernel(cfg), residual_bn=b["residual_bn"])
    if kind == "se":
        kw = {"reduction": b["reduction"]}
    return B.make_block(kind, channels, seed=cfg["seed"], dtype=_dtype(cfg), zero_gamma=b["zero_gamma"], **kw)


def _forward(cfg, x):
    kind = cfg["block"]["kind"]
    c = x.shape[3]
    if kind == "chain":
        return B.chain_forward(x, _block_cfg(cfg, "se", c), _block_cfg(cfg, "rnl", c))
    if kind not in B.KINDS:
        raise ArgumentError(f"block.kind must be one of {B.KINDS + ('chain',)}, got {kind!r}")
    return B.forward(x, _block_cfg(cfg, kind, c))


def _write_report(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(tomli_w.dumps(data))


def cmd_gen(args, cfg):
    out = Path(args.output) if args.output else Path(cfg["out"]) / "clip.rnlt"
    out.parent.mkdir(parents=True, exist_ok=True)
    data, mask = _input(cfg)
    save_tensor(out, data)
    print(f"wrote {out} shape={list(data.shape)} dtype={data.dtype}")
    if mask is not None:
        mpath = out.with_name(out.stem + "_mask.rnlt")
        save_tensor(mpath, mask.astype(data.dtype))
        print(f"wrote {mpath}")
    return 0


def cmd_run(args, cfg):
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    x, _ = _input(cfg)
    res = _forward(cfg, x)
    z = np.asarray(res.z)
    save_tensor(out_dir / "z.rnlt", z)
    summary = {"z": {"min": float(z.min()), "max": float(z.max()), "mean": float(z.mean())}}
    if res.affinity is not None:
        sums = res.affinity.values.sum(axis=1)
        summary["rows"] = {"sum_min": float(sums.min()), "sum_max": float(sums.max()),
                           "max_abs_dev_from_1": float(np.max(np.abs(sums - 1.0)))}
    dims = x.shape[:3]
    for ref in cfg["refs"]:
        amap = B.attention_map(res, tuple(ref), dims)
        stem = "map_" + "_".join(str(v) for v in ref)
        export_map(amap, out_dir / "maps", stem)
        summary.setdefault("maps", []).append(
            {"ref": list(ref), "min": float(amap.min()), "max": float(amap.max()), "files": stem + "_t*.pgm"})
    _write_report(out_dir / "summary.toml", summary)
    print(f"z: shape={list(z.shape)} min={summary['z']['min']:.6g} max={summary['z']['max']:.6g} "
          f"mean={summary['z']['mean']:.6g}")
    if "rows" in summary:
        print(f"affinity row sums: [{summary['rows']['sum_min']:.6g}, {summary['rows']['sum_max']:.6g}]")
    for m in summary.get("maps", []):
        print(f"map ref={tuple(m['ref'])}: min={m['min']:.6g} max={m['max']:.6g}")
    print(f"wrote {out_dir}")
    return 0


def cmd_oracle(args, cfg):
    kind = cfg["block"]["kind"]
    if kind not in ("rnl", "nl"):
        raise ArgumentError(f"oracle supports block.kind rnl or nl, got {kind!r}")
    x, _ = _input(cfg)
    x = x.astype(np.float64)
    if int(np.prod(x.shape[:3])) > oracle.MAX_POSITIONS:
        raise ArgumentError(f"naive oracle refuses P={int(np.prod(x.shape[:3]))} positions "
                            f"(limit {oracle.MAX_POSITIONS})")
    cfg64 = dict(cfg, precision="f64")
    # random BN statistics so the residual branch is not switched off by a zero gamma
    block = B.randomize_bn(_block_cfg(cfg64, kind, x.shape[3]), cfg["seed"])
    params = dict(block.params)
    if cfg["oracle"]["corrupt"]:
        params["w_g"] = params["w_g"] + 0.5
        params["w_z"] = params["w_z"] + 0.5
        if block.residual_bn:
            params["bn_gamma"] = params["bn_gamma"] + 1.0
    fast = B.forward(x, block, params).z
    ref, _ = (oracle.naive_rnl if kind == "rnl" else oracle.naive_nl)(x, block)
    cmp = oracle.compare(fast, ref, cfg["oracle"]["tolerance"])
    report = {"kind": kind, "positions": cmp.positions, "max_abs_err": cmp.max_abs_err,
              "max_rel_err": cmp.max_rel_err, "tolerance": cmp.tolerance,
              "status": "PASS" if cmp.passed else "FAIL"}
    print(tomli_w.dumps(report), end="")
    _write_report(Path(cfg["out"]) / "oracle.toml", report)
    return 0 if cmp.passed else 1


def cmd_gradcheck(args, cfg):
    kind = cfg["block"]["kind"]
    g = cfg["gradcheck"]
    rep = checks.block_gradcheck(kind, cfg["seed"], shape=tuple(g["shape"]), form=cfg["block"]["form"],
                                 kernel=_kernel(cfg), h=g["h"], tol=g["tol"])
    report = dict(rep.summary(), kind=kind, shape=list(g["shape"]))
    print(tomli_w.dumps(report), end="")
    _write_report(Path(cfg["out"]) / "gradcheck.toml", report)
    return 0 if rep.passed else 1


def _cost_rows(report):
    rows = [(s.name, "x".join(map(str, s.shape)), s.params, s.flops) for s in report.stages]
    rows.append(("total", "", report.params, report.flops))
    return rows


def cmd_cost(args):
    if args.arch:
        spec = archcost.parse_arch(Path(args.arch).read_text())
    else:
        spec = archcost.resnet50_spec()
    report = archcost.count_cost(spec, args.input)
    if args.format == "toml":
        doc = {"input": list(args.input), "params": report.params, "flops": report.flops,
               "stages": [{"name": s.name, "shape": list(s.shape), "params": s.params, "flops": s.flops,
                           "attention_params": s.attention_params, "attention_flops": s.attention_flops}
                          for s in report.stages]}
        if args.published:
            doc["comparison"] = [_comparison_dict(c) for c in archcost.published_comparison(args.input)]
        print(tomli_w.dumps(doc), end="")
        return 0
    print(f"{'stage':<8} {'output':>16} {'params':>12} {'FLOPs':>16}")
    for name, shape, params, flops in _cost_rows(report):
        print(f"{name:<8} {shape:>16} {params:>12,d} {flops:>16,d}")
    print(f"params {report.params / 1e6:.2f}M  FLOPs {report.flops / 1e9:.2f}G")
    if args.published:
        print()
        print(f"{'model':<20} {'params(M)':>10} {'published':>10} {'FLOPs(G)':>10} "
              f"{'1x1x1 only':>10} {'published':>10}")
        for c in archcost.published_comparison(args.input):
            print(f"{c.label:<20} {c.params / 1e6:>10.2f} {c.published_params_m:>10.2f} {c.flops / 1e9:>10.2f} "
                  f"{c.pointwise_flops / 1e9:>10.2f} {c.published_flops_g:>10.2f}")
    return 0


def _comparison_dict(c):
    return {"label": c.label, "params": c.params, "published_params_m": c.published_params_m,
            "flops": c.flops, "pointwise_flops": c.pointwise_flops, "published_flops_g": c.published_flops_g}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        rest, overrides = _split_overrides(argv)
        args = build_parser().parse_args(rest)
        if args.command == "cost":
            if overrides:
                raise CLIError("cost takes no configuration overrides")
            return cmd_cost(args)
        cfg = _resolve(args, overrides)
        return {"gen": cmd_gen, "run": cmd_run, "oracle": cmd_oracle, "gradcheck": cmd_gradcheck}[
            args.command](args, cfg)
    except RNLError as exc:
        msg = " ".join(str(exc).split())
        print(f"rnl-error: {exc.kind}: {msg}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"rnl-error: io: {' '.join(str(exc).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
