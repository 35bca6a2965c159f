"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N <name>: PASS|FAIL (<detail>)`` line
straight to the terminal, then asserts. Run with

    pytest tests/test_acceptance.py -v

or ``python tests/test_acceptance.py`` for just the summary lines.
"""

import contextlib
import io
import sys
import time

import numpy as np
import pytest

from rnl import archcost as A
from rnl import blocks as B
from rnl import oracle, synth
from rnl import similarity as S
from rnl.aggregation import RegionKernel, aggregate
from rnl.checks import OP_CASES, block_gradcheck, op_gradcheck, random_block
from rnl.cli import main as cli_main

FORMS = ("gaussian", "dot", "cosine")
MODES = ("conv", "avg", "max")
CLIP = (8, 224, 224, 3)


@pytest.fixture
def report(request):
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(n, name, ok, detail):
        line = f"criterion {n:>2} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
        with capman.global_and_fixture_disabled() if capman else contextlib.nullcontext():
            print("\n" + line, flush=True)
        return ok

    return emit


def _block(kind, c, seed, **kw):
    """Freshly initialised block with non-trivial BN so the residual branch is live."""
    return B.randomize_bn(B.make_block(kind, c, seed=seed, zero_gamma=False, **kw), seed)


def test_criterion_01_rnl_oracle(report):
    start = time.perf_counter()
    worst = 0.0
    for form in FORMS:
        for mode in MODES:
            for seed in range(5):
                x = np.random.default_rng(seed).standard_normal((2, 4, 4, 8))
                cfg = _block("rnl", 8, seed, form=form, kernel=RegionKernel(mode=mode))
                ref, _ = oracle.naive_rnl(x, cfg)
                worst = max(worst, oracle.compare(B.forward(x, cfg).z, ref).max_rel_err)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and elapsed < 10.0
    report(1, "RNL oracle equivalence", ok, f"45 cases, max rel err {worst:.2e} <= 1e-5, {elapsed:.2f}s < 10s")
    assert ok


def test_criterion_02_nl_oracle(report):
    worst = 0.0
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal((2, 4, 4, 8))
        cfg = _block("nl", 8, seed)
        ref, _ = oracle.naive_nl(x, cfg)
        worst = max(worst, oracle.compare(B.forward(x, cfg).z, ref).max_rel_err)
    ok = worst <= 1e-5
    report(2, "NL oracle equivalence", ok, f"max rel err {worst:.2e} <= 1e-5")
    assert ok


def test_criterion_03_gradient_suite(report):
    start = time.perf_counter()
    results = {}
    for op in sorted(OP_CASES):
        results[f"op:{op}"] = max(op_gradcheck(op, s).max_rel_err for s in range(10))
    for kind in ("nl", "se", "chain", "tsm"):
        results[f"block:{kind}"] = max(block_gradcheck(kind, s).max_rel_err for s in range(10))
    for form in FORMS:
        for mode in MODES:
            k = RegionKernel(3, 3, 3, mode=mode)
            results[f"block:rnl/{form}/{mode}"] = max(
                block_gradcheck("rnl", s, form=form, kernel=k).max_rel_err for s in range(10))
    elapsed = time.perf_counter() - start
    name, worst = max(results.items(), key=lambda kv: kv[1])
    failing = [k for k, v in results.items() if v > 1e-5]
    ok = not failing and elapsed < 60.0
    report(3, "gradient suite", ok,
           f"{len(results)} checks x 10 seeds, worst {worst:.2e} ({name}) <= 1e-5, {elapsed:.1f}s < 60s"
           + (f", failing {failing}" if failing else ""))
    assert ok


def test_criterion_04_normalization(report):
    rng = np.random.default_rng(4)
    worst, biggest = 0.0, 0.0
    for case in range(100):
        p, cr = rng.integers(2, 40), rng.integers(1, 8)
        e = rng.standard_normal((p, cr))
        # scale so the largest logit magnitude sweeps 1 .. 1e3
        target = 10 ** (3 * case / 99)
        e *= np.sqrt(target / np.abs(e @ e.T).max())
        if case % 2:
            e = e.astype(np.float32)
        biggest = max(biggest, float(np.abs(S.affinity(e, "gaussian").values).max()))
        w = S.normalize(S.affinity(e, "gaussian")).values
        worst = max(worst, float(np.abs(w.astype(np.float64).sum(axis=1) - 1.0).max()))
    ok = worst <= 1e-6 and biggest >= 0.99e3
    report(4, "gaussian rows sum to 1", ok, f"100 cases (f32/f64), logits up to {biggest:.0f}, "
                                            f"max |rowsum-1| {worst:.1e} <= 1e-6")
    assert ok


def test_criterion_05_cosine_range(report):
    rng = np.random.default_rng(5)
    lo, hi, drift = np.inf, -np.inf, 0.0
    for _ in range(100):
        e = rng.standard_normal((rng.integers(2, 30), rng.integers(1, 6))) * rng.uniform(0.01, 100)
        v = S.affinity(e, "cosine").values
        lo, hi = min(lo, v.min()), max(hi, v.max())
        k = rng.uniform(1e-3, 1e3, (len(e), 1))
        drift = max(drift, float(np.abs(S.affinity(e * k, "cosine").values - v).max()))
    ok = lo >= 0.0 and hi <= 1.0 and drift <= 1e-6
    report(5, "cosine range and scale invariance", ok,
           f"values in [{lo:.3g}, {hi:.17g}] within [0,1]; rescaling drift {drift:.1e} <= 1e-6")
    assert ok


def test_criterion_06_channel_isolation(report):
    rng = np.random.default_rng(6)
    ok = True
    for mode in MODES:
        for trial in range(10):
            x = rng.standard_normal((3, 5, 5, 6))
            k = RegionKernel(mode=mode).with_weights(rng.standard_normal((3, 7, 7, 6)))
            c = trial % 6
            x2 = x.copy()
            x2[rng.integers(3), rng.integers(5), rng.integers(5), c] += rng.standard_normal() + 2.0
            y, y2 = aggregate(x, k), aggregate(x2, k)
            rest = [i for i in range(6) if i != c]
            ok &= np.array_equal(y[..., rest], y2[..., rest])
    report(6, "channel isolation", ok, "3 modes x 10 perturbations, untouched channels bit-identical")
    assert ok


def test_criterion_07_identity_insertion(report):
    x = np.random.default_rng(7).standard_normal((2, 4, 4, 8))
    cases = {}
    wz0 = {"w_z": np.zeros((4, 8))}
    # W_z = 0 zeroes the branch before BN; BN(0) is 0 without residual BN or at its
    # initial statistics (beta = mean = 0), while shifted running stats add a constant.
    for mode in MODES:
        k = RegionKernel(mode=mode)
        cases[f"rnl/{mode} gamma=0"] = B.make_block("rnl", 8, seed=1, kernel=k)
        cases[f"rnl/{mode} W_z=0"] = B.make_block("rnl", 8, seed=1, kernel=k, zero_gamma=False).with_params(**wz0)
        cases[f"rnl/{mode} W_z=0 no BN"] = B.make_block("rnl", 8, seed=1, kernel=k, residual_bn=False).with_params(**wz0)
    cases["nl gamma=0"] = B.make_block("nl", 8, seed=1)
    cases["nl W_z=0"] = B.make_block("nl", 8, seed=1, zero_gamma=False).with_params(**wz0)
    cases["nl W_z=0 no BN"] = B.make_block("nl", 8, seed=1, residual_bn=False).with_params(**wz0)
    cases["se W_2=0"] = _block("se", 8, 1).with_params(w2=np.zeros((8, 4)))
    bad = [name for name, cfg in cases.items() if not np.array_equal(B.forward(x, cfg).z, x)]
    ok = not bad
    report(7, "identity insertions", ok, f"{len(cases)} configurations exact" + (f", not exact: {bad}" if bad else ""))
    assert ok


def test_criterion_08_degeneracy(report):
    rng = np.random.default_rng(8)
    nl_err, perm_err = 0.0, 0.0
    for seed in range(5):
        x = rng.standard_normal((2, 3, 4, 8))
        rnl = _block("rnl", 8, seed, kernel=RegionKernel(1, 1, 1)).with_params(u=np.ones((1, 1, 1, 4)))
        p = rnl.params
        nl = B.BlockConfig("nl", 8, params=dict(p, w_theta=p["w_g"], w_phi=p["w_g"]))
        nl_err = max(nl_err, float(np.abs(B.forward(x, rnl).z - B.forward(x, nl).z).max()))
        for form in FORMS:
            cfg = random_block("rnl", 8, seed, form=form, kernel=RegionKernel(1, 1, 1))
            perm = rng.permutation(24)
            z = B.forward(x, cfg).z.reshape(24, 8)
            zp = B.forward(x.reshape(24, 8)[perm].reshape(x.shape), cfg).z.reshape(24, 8)
            perm_err = max(perm_err, float(np.abs(zp - z[perm]).max()))
    ok = nl_err <= 1e-6 and perm_err <= 1e-6
    report(8, "kernel-1 degeneracy", ok,
           f"RNL vs shared-embedding NL {nl_err:.1e}, permutation equivariance {perm_err:.1e} (<= 1e-6)")
    assert ok


def test_criterion_09_shape_ledger(report):
    expected = [("conv1", (8, 112, 112, 64)), ("pool1", (8, 56, 56, 64)), ("res2", (8, 56, 56, 256)),
                ("res3", (8, 28, 28, 512)), ("res4", (8, 14, 14, 1024)), ("res5", (8, 7, 7, 2048))]
    got = A.propagate_shapes(A.resnet50_spec(), CLIP)
    ok = got == expected
    report(9, "backbone output sizes", ok, "6/6 stages match" if ok else f"got {got}")
    assert ok


def test_criterion_10_cost_model(report):
    base = A.count_cost(A.resnet50_spec(), CLIP)
    nl = A.count_cost(A.resnet50_spec("nl"), CLIP)
    checks = {
        "baseline params": (base.params / 1e6, 24.33, 0.01),
        "baseline FLOPs": (base.flops / 1e9, 32.89, 0.02),
        "+5 NL params": (nl.params / 1e6, 31.69, 0.02),
    }
    within = {k: abs(v / ref - 1) <= tol for k, (v, ref, tol) in checks.items()}
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        code = cli_main(["cost", "--published"])
    rows = {line.split("  ")[0].strip(): line for line in out.getvalue().splitlines()}
    printed = (code == 0
               and "28.31" in rows.get("+5 RNL", "") and "35.48" in rows.get("+5 RNL", "")
               and "0.30" in rows.get("1 RNL@res3 (conv)", "") and "2.67" in rows.get("1 RNL@res3 (conv)", ""))
    ok = all(within.values()) and printed
    detail = ", ".join(f"{k} {v:.2f} vs {ref} ({'ok' if within[k] else 'out of band'})"
                       for k, (v, ref, _) in checks.items())
    report(10, "cost model", ok, detail + f"; definitional+published rows printed: {printed}")
    assert ok


def _dot_ratio(seed, shape=(4, 16, 16, 16)):
    clip = synth.moving_dot_clip(shape, seed=seed)
    cfg = B.make_block("rnl", shape[3], seed=seed)  # default gaussian, conv 3x7x7
    amap = B.attention_map(B.forward(clip.data, cfg), (1, 8, 5), shape[:3])[..., 0]
    assert clip.mask[1, 8, 5]
    return float(amap[clip.mask].max() / amap[~clip.mask].mean())


def test_criterion_11_qualitative_maps(report):
    ratios = [_dot_ratio(seed) for seed in range(10)]
    dot_ok = min(ratios) >= 2.0
    x = synth.constant_clip((4, 16, 16, 16), 1.0).data
    amap = B.attention_map(B.forward(x, B.make_block("rnl", 16, seed=0)), (1, 8, 8), (4, 16, 16))
    spread = float(np.ptp(amap) / amap.mean())
    uniform_ok = spread <= 1e-6
    ok = dot_ok and uniform_ok
    report(11, "moving-dot / constant-clip maps", ok,
           f"dot: min in-mask-max/out-mean over 10 seeds {min(ratios):.2f} >= 2 ({'ok' if dot_ok else 'fails'}); "
           f"constant clip (value 1): relative spread {spread:.3g} <= 1e-6 ({'ok' if uniform_ok else 'fails'})")
    assert dot_ok, "attention does not concentrate on the dot"
    assert uniform_ok, ("constant clip map is not uniform: zero padding makes border region "
                        "embeddings differ from interior ones")


def test_criterion_12_determinism(report, tmp_path):
    files = {}
    for run in ("a", "b"):
        out = tmp_path / run
        with contextlib.redirect_stdout(io.StringIO()):
            assert cli_main(["run", "--precision", "f64", "--seed", "7", "--ref", "1,8,5", "--out", str(out)]) == 0
            assert cli_main(["gen", "--precision", "f64", "--seed", "7", "--out", str(out / "gen")]) == 0
        files[run] = {p.relative_to(out): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
    ok = files["a"] == files["b"] and len(files["a"]) >= 5
    report(12, "byte-identical seeded runs", ok, f"{len(files['a'])} files compared")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "--no-header", "-p", "no:cacheprovider"]))
