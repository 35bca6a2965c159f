from pathlib import Path

import numpy as np
import pytest

from rnl import archcost, config
from rnl.cli import main
from rnl.errors import ArgumentError
from rnl.export import read_pgm
from rnl.tensor import load_tensor

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMALL = ["--input.shape", "[2,6,6,8]"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _files(d):
    return {p.relative_to(d): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = config.load_config(overrides=[("block.ftheta.kt", 1), ("oracle.tolerance", 1)])
        assert cfg["block"]["ftheta"]["kt"] == 1
        assert cfg["oracle"]["tolerance"] == 1.0
        assert config.DEFAULTS["block"]["ftheta"]["kt"] == 3

    def test_file_then_flag(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('seed = 3\n[block]\nform = "dot"\n')
        cfg = config.load_config(p, [("seed", 9)])
        assert (cfg["seed"], cfg["block"]["form"]) == (9, "dot")

    @pytest.mark.parametrize("key,val", [("block.bogus", 1), ("seed", "x"), ("block", 3), ("block.residual_bn", 1)])
    def test_validation_names_field(self, key, val):
        with pytest.raises(ArgumentError, match=key.split(".")[-1]):
            config.load_config(overrides=[(key, val)])

    def test_parse_value(self):
        assert config.parse_value("3") == 3
        assert config.parse_value("true") is True
        assert config.parse_value("[1, 2]") == [1, 2]
        assert config.parse_value("f32") == "f32"

    def test_shipped_config_loads(self):
        cfg = config.load_config(CONFIGS / "moving_dot.toml")
        assert cfg["refs"] == [[0, 8, 4], [2, 8, 6]]


class TestRun:
    def test_outputs(self, tmp_path, capsys):
        code, out, _ = run(capsys, "run", "--seed", 7, "--ref", "0,3,1", "--ref", "1,2,2", "--out", tmp_path, *SMALL)
        assert code == 0
        z = load_tensor(tmp_path / "z.rnlt")
        assert z.shape == (2, 6, 6, 8) and z.dtype == np.float64
        frames = sorted((tmp_path / "maps").glob("map_0_3_1_t*.pgm"))
        assert len(frames) == 2 and read_pgm(frames[0]).shape == (6, 6)
        csv = (tmp_path / "maps" / "map_1_2_2.csv").read_bytes()
        assert csv.count(b"\r\n") == 1 + 72
        assert "min=" in out and "row sums" in out

    def test_deterministic(self, tmp_path, capsys):
        for d in ("a", "b"):
            assert run(capsys, "run", "--precision", "f64", "--seed", 7, "--ref", "0,0,0",
                       "--out", tmp_path / d, *SMALL)[0] == 0
        assert _files(tmp_path / "a") == _files(tmp_path / "b")

    def test_f32(self, tmp_path, capsys):
        assert run(capsys, "run", "--precision", "f32", "--out", tmp_path, *SMALL)[0] == 0
        assert load_tensor(tmp_path / "z.rnlt").dtype == np.float32

    def test_constant_unit_kernel_map_is_mid_gray(self, tmp_path, capsys):
        code, _, _ = run(capsys, "run", "--input.pattern", "constant", "--ref", "1,1,1", "--out", tmp_path,
                         "--block.ftheta.kt", 1, "--block.ftheta.kh", 1, "--block.ftheta.kw", 1, *SMALL)
        assert code == 0
        for p in (tmp_path / "maps").glob("*.pgm"):
            assert np.all(read_pgm(p) == 128)

    def test_input_file(self, tmp_path, capsys):
        assert run(capsys, "gen", "--input.pattern", "random", "--out", tmp_path, *SMALL)[0] == 0
        code, _, _ = run(capsys, "run", "--input.path", tmp_path / "clip.rnlt", "--block.kind", "chain",
                         "--out", tmp_path / "r")
        assert code == 0

    def test_config_file(self, tmp_path, capsys):
        code, _, _ = run(capsys, "run", "--config", CONFIGS / "moving_dot.toml", "--out", tmp_path)
        assert code == 0
        assert len(list((tmp_path / "maps").glob("*.pgm"))) == 8


class TestGen:
    def test_moving_dot_with_mask(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gen", "--seed", 1, "--output", tmp_path / "c.rnlt")
        assert code == 0
        mask = load_tensor(tmp_path / "c_mask.rnlt")
        clip = load_tensor(tmp_path / "c.rnlt")
        np.testing.assert_array_equal(clip[mask.astype(bool)], 5.0)


class TestOracleAndGradcheck:
    def test_oracle_pass(self, tmp_path, capsys):
        code, out, _ = run(capsys, "oracle", "--seed", 3, "--out", tmp_path, *SMALL)
        assert code == 0 and 'status = "PASS"' in out
        assert (tmp_path / "oracle.toml").exists()

    def test_oracle_nl(self, tmp_path, capsys):
        assert run(capsys, "oracle", "--block.kind", "nl", "--out", tmp_path, *SMALL)[0] == 0

    def test_oracle_corrupt(self, tmp_path, capsys):
        code, out, _ = run(capsys, "oracle", "--corrupt", "--out", tmp_path, *SMALL)
        assert code == 1 and 'status = "FAIL"' in out

    def test_oracle_single_position(self, tmp_path, capsys):
        assert run(capsys, "oracle", "--input.shape", "[1,1,1,4]", "--out", tmp_path)[0] == 0

    def test_oracle_guard(self, tmp_path, capsys):
        code, _, err = run(capsys, "oracle", "--input.shape", "[2,64,64,2]", "--out", tmp_path)
        assert code == 2 and err.startswith("rnl-error: argument:") and "4096" in err

    def test_gradcheck_default(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gradcheck", "--out", tmp_path)
        assert code == 0 and 'status = "PASS"' in out

    def test_gradcheck_tolerance_failure(self, tmp_path, capsys):
        code, out, _ = run(capsys, "gradcheck", "--gradcheck.tol", "1e-30", "--out", tmp_path)
        assert code == 1 and 'status = "FAIL"' in out


class TestCost:
    def test_table(self, capsys):
        code, out, _ = run(capsys, "cost", "--arch", CONFIGS / "resnet50.arch", "--input", "8x224x224x3")
        assert code == 0
        assert "params 24.33M" in out
        assert "res5" in out and "8x7x7x2048" in out

    def test_published_columns(self, capsys):
        code, out, _ = run(capsys, "cost", "--published")
        line = next(l for l in out.splitlines() if l.startswith("+5 RNL"))
        assert "35.48" in line and "28.31" in line
        assert any(l.startswith("1 RNL@res3 (conv)") and "2.67" in l for l in out.splitlines())

    def test_toml(self, capsys):
        code, out, _ = run(capsys, "cost", "--format", "toml", "--published")
        doc = config.tomllib.loads(out)
        assert doc["params"] == archcost.count_cost(archcost.resnet50_spec(), (8, 224, 224, 3)).params
        assert len(doc["stages"]) == 7 and len(doc["comparison"]) == 8

    def test_empty_arch(self, tmp_path, capsys):
        (tmp_path / "e.arch").write_text("")
        code, out, _ = run(capsys, "cost", "--arch", tmp_path / "e.arch")
        assert code == 0
        assert out.splitlines()[-1] == "params 0.00M  FLOPs 0.00G"


class TestErrors:
    @pytest.mark.parametrize("argv,kind", [
        (["frobnicate"], "usage"),
        (["run", "--precision", "f16"], "usage"),
        (["run", "--ref", "1,2"], "usage"),
        (["run", "--block.kind", "gcn"], "argument"),
        (["run", "--block.ftheta.kt", "4"], "argument"),
        (["run", "--block.unknown", "1"], "argument"),
        (["run", "--ref", "9,9,9", "--input.shape", "[1,2,2,4]"], "argument"),
        (["run", "--input.path", "/nonexistent/x.rnlt"], "io"),
        (["cost", "--arch", "/nonexistent.arch"], "io"),
        (["cost", "--input", "8x224x3"], "usage"),
    ])
    def test_single_line_prefix(self, tmp_path, capsys, argv, kind):
        code, _, err = run(capsys, *argv, *([] if argv[0] in ("cost", "frobnicate") else ["--out", tmp_path]))
        assert code == 2
        assert err.startswith(f"rnl-error: {kind}: ")
        assert err.count("\n") == 1

    def test_parse_error_line(self, tmp_path, capsys):
        (tmp_path / "bad.arch").write_text("stage a\n  conv 1x1x1 8 stride=1,x,1\n")
        code, _, err = run(capsys, "cost", "--arch", tmp_path / "bad.arch")
        assert code == 2 and err.startswith("rnl-error: parse: line 2:")

    def test_bad_tensor_file(self, tmp_path, capsys):
        (tmp_path / "x.rnlt").write_bytes(b"garbage")
        code, _, err = run(capsys, "run", "--input.path", tmp_path / "x.rnlt", "--out", tmp_path)
        assert code == 2 and err.startswith("rnl-error: io:")
