import csv
import io
import math

import numpy as np
import pytest

from afa_ssr.cli import config_to_ini, main, parse_config_text, read_pgm, to_pgm
from afa_ssr.ssr import ScanRow
from afa_ssr.toy.config import ToyConfig

TINY = """
# small and fast
[data]
image_size = 32
train_size = 32
val_size = 8
[train]
epochs = 1
batch_size = 8
"""


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    out = root / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def scan_rows(text):
    return [
        ScanRow(r["phi"], float(r["y1"]), float(r["y2"]), float(r["a1"]), float(r["alpha1"]), float(r["alpha2"]), float(r["j_fro"]))
        for r in csv.DictReader(io.StringIO(text))
    ]


class TestGradcheckCommand:
    def test_passes(self, capsys):
        assert main(["gradcheck", "--module", "ssr", "--seed", "7"]) == 0
        assert "all passed" in capsys.readouterr().out

    def test_unknown_module_is_usage_error(self):
        assert main(["gradcheck", "--module", "bogus"]) == 2

    def test_impossible_tolerance_reports_failure(self, capsys):
        assert main(["gradcheck", "--module", "loss", "--tol", "1e-12"]) == 1
        assert "FAIL" in capsys.readouterr().out


class TestSsrScanCommand:
    def test_abs_row_near_full_transmittance(self, capsys):
        assert main(["ssr-scan", "--phi", "abs", "--y1-range", "-0.02:0.02:5", "--y2-range", "0:0:1"]) == 0
        rows = scan_rows(capsys.readouterr().out)
        assert len(rows) == 5
        y1 = -math.log(0.99)
        assert main(["ssr-scan", "--phi", "abs", "--y1-range", f"{y1}:{y1}:1"]) == 0
        (row,) = scan_rows(capsys.readouterr().out)
        assert row.j11() == pytest.approx(0.99, abs=1e-9)

    def test_hma_row(self, capsys):
        assert main(["ssr-scan", "--phi", "hma", "--y1-range", "-4.595:-4.595:1"]) == 0
        (row,) = scan_rows(capsys.readouterr().out)
        assert row.a1 == pytest.approx(0.99, abs=1e-5)
        assert row.j11() == pytest.approx(0.0099, abs=1e-5)

    def test_single_point_grid(self, capsys):
        assert main(["ssr-scan", "--phi", "softplus", "--y1-range", "1:1:1", "--y2-range", "2:2:1"]) == 0
        assert len(capsys.readouterr().out.strip().split("\n")) == 2

    def test_writes_file(self, tmp_path):
        path = tmp_path / "scan.csv"
        assert main(["ssr-scan", "--out", str(path), "--y1-range", "-1:1:3"]) == 0
        assert path.read_text().startswith("phi,y1,y2,a1,alpha1,alpha2,j_fro\n")

    def test_errors(self, tmp_path):
        assert main(["ssr-scan", "--out", str(tmp_path / "missing" / "x.csv")]) == 1
        assert main(["ssr-scan", "--y1-range", "1:2"]) == 2
        assert main(["ssr-scan", "--y1-range", "1:2:0"]) == 2
        assert main(["ssr-scan", "--phi", "relu"]) == 2


class TestConfig:
    def test_unknown_key_lists_valid_keys(self, tmp_path, capsys):
        bad = tmp_path / "bad.ini"
        bad.write_text("[train]\nepochz = 3\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "epochz" in err and "epochs" in err and "batch_size" in err

    def test_unknown_section(self):
        with pytest.raises(Exception, match="valid keys"):
            parse_config_text("[optim]\nlr = 1\n")

    def test_missing_config_is_usage_error(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path / "o")]) == 2

    def test_invalid_value_is_usage_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[model]\nfusion = product\n")
        assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2

    def test_ini_round_trip(self):
        cfg = ToyConfig(fusion="sum", scales=(0.25, 0.5, 1.0), lr=0.0125, seed=2**63)
        assert ToyConfig(**parse_config_text(config_to_ini(cfg))) == cfg

    def test_flags_override_file_and_are_recorded(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text(TINY.replace("train_size = 32", "train_size = 8"))
        out = tmp_path / "o"
        assert main(["train", "--config", str(cfg), "--out", str(out), "--seed", "4", "--fusion", "sum", "--set", "val_size=4"]) == 0
        resolved = ToyConfig(**parse_config_text((out / "config.ini").read_text()))
        assert (resolved.seed, resolved.fusion, resolved.val_size, resolved.train_size) == (4, "sum", 4, 8)

    def test_bad_override(self, tmp_path):
        assert main(["train", "--out", str(tmp_path), "--set", "nonsense=1"]) == 2


class TestTrainAndEval:
    def test_artifacts(self, trained):
        _, out = trained
        assert {p.name for p in out.iterdir()} >= {"model.ckpt", "metrics.csv", "config.ini"}
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,split,loss,miou,f1"
        assert [l.split(",")[:2] for l in lines[1:]] == [["0", "train"], ["0", "val"], ["1", "train"], ["1", "val"]]
        assert all(math.isfinite(float(l.split(",")[2])) for l in lines[1:])

    def test_eval_reproduces_final_row(self, trained, capsys, tmp_path):
        _, out = trained
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--out", str(tmp_path / "ev")]) == 0
        printed = capsys.readouterr().out.strip().split("\n")[-1]
        final = (out / "metrics.csv").read_text().strip().split("\n")[-1]
        assert printed == final
        assert (tmp_path / "ev" / "eval.csv").read_text().strip().split("\n")[-1] == final

    def test_training_is_deterministic(self, trained, tmp_path):
        cfg, out = trained
        again = tmp_path / "again"
        assert main(["train", "--config", str(cfg), "--out", str(again)]) == 0
        assert (again / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()
        assert (again / "model.ckpt").read_bytes() == (out / "model.ckpt").read_bytes()

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        _, out = trained
        bad = tmp_path / "model.ckpt"
        bad.write_bytes((out / "model.ckpt").read_bytes()[:100])
        (tmp_path / "config.ini").write_text((out / "config.ini").read_text())
        assert main(["eval", "--checkpoint", str(bad)]) == 1
        assert "truncated" in capsys.readouterr().err

    def test_config_digest_mismatch(self, trained, tmp_path):
        _, out = trained
        other = tmp_path / "other.ini"
        other.write_text((out / "config.ini").read_text().replace("seed = 0", "seed = 1"))
        assert main(["eval", "--checkpoint", str(out / "model.ckpt"), "--config", str(other)]) == 1


class TestRenderAttention:
    def test_pgm_law(self):
        blob = to_pgm(np.full((3, 5), 0.5))
        assert blob[:11] == b"P5\n5 3\n255\n"
        assert blob[11:] == bytes([128]) * 15
        np.testing.assert_array_equal(read_pgm(to_pgm(np.array([[0.0, 1.0, 2.0, -1.0]]))), [[0, 255, 255, 0]])

    def test_maps(self, trained, tmp_path):
        _, out = trained
        dest = tmp_path / "maps"
        assert main(["render-attention", "--checkpoint", str(out / "model.ckpt"), "--index", "3", "--out", str(dest)]) == 0
        files = sorted(p.name for p in dest.iterdir())
        assert "scale0_x0.5_ssr-alpha.pgm" in files and "scale1_x1_ssr-alpha.pgm" in files
        assert "scale1_x1_node1-merge-a_s.pgm" in files
        assert sum("final-merge-in" in f for f in files) == 6
        for f in files:
            blob = (dest / f).read_bytes()
            header, _, _ = blob.partition(b"\n255\n")
            w, h = (int(v) for v in header.split(b"\n")[1].split())
            assert len(blob) == len(header) + 5 + w * h
        a0 = read_pgm((dest / "scale0_x0.5_ssr-alpha.pgm").read_bytes()).astype(int)
        a1 = read_pgm((dest / "scale1_x1_ssr-alpha.pgm").read_bytes()).astype(int)
        assert np.all(a0 + a1 <= 256)

    def test_index_out_of_range(self, trained, tmp_path):
        _, out = trained
        assert main(["render-attention", "--checkpoint", str(out / "model.ckpt"), "--index", "8", "--out", str(tmp_path)]) == 1
