import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from hifinet import archive
from hifinet.cli import main
from hifinet.data import read_image, write_image
from hifinet.network import init_params

SUBCOMMANDS = ["enhance", "train", "eval", "wavelet", "metrics", "inspect-weights"]


@pytest.fixture
def weights(tmp_path):
    path = tmp_path / "w.hifiw"
    archive.save_weights(path, init_params(0, dtype=np.float32))
    return path


def _images(d, names, rng, size=16):
    d.mkdir(exist_ok=True)
    for n in names:
        write_image(d / n, rng.random((1, 3, size, size)))
    return d


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hifinet", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "enhance" in proc.stdout


class TestEnhance:
    def test_single_file(self, tmp_path, weights, rng, capsys):
        src = tmp_path / "in.png"
        write_image(src, rng.random((1, 3, 64, 64)))
        assert main(["enhance", "--weights", str(weights), "--input", str(src), "--output", str(tmp_path / "out")]) == 0
        out = read_image(tmp_path / "out" / "in.png")
        assert out.shape == (1, 3, 64, 64)
        assert "resolved config" in capsys.readouterr().out

    def test_directory_with_corrupt_file(self, tmp_path, weights, rng, capsys):
        src = _images(tmp_path / "in", ["a.png", "b.ppm"], rng)
        (src / "c.png").write_bytes(b"garbage")
        code = main(["enhance", "--weights", str(weights), "--input", str(src), "--output", str(tmp_path / "out")])
        assert code == 1
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["a.png", "b.ppm"]
        assert "c.png" in capsys.readouterr().err

    def test_deterministic(self, tmp_path, weights, rng):
        src = _images(tmp_path / "in", ["a.png"], rng)
        for out in ("o1", "o2"):
            main(["enhance", "--weights", str(weights), "--input", str(src), "--output", str(tmp_path / out)])
        assert (tmp_path / "o1" / "a.png").read_bytes() == (tmp_path / "o2" / "a.png").read_bytes()

    def test_missing_weights(self, tmp_path, rng, capsys):
        src = _images(tmp_path / "in", ["a.png"], rng)
        code = main(["enhance", "--weights", str(tmp_path / "none.hifiw"), "--input", str(src),
                     "--output", str(tmp_path / "out")])
        assert code == 2 and "weights" in capsys.readouterr().err


class TestTrain:
    def _config(self, tmp_path, extra=""):
        path = tmp_path / "run.cfg"
        path.write_text("learning_rate = 1e-3\nmax_steps = 3\nbatch_size = 2\ncrop_size = 16\n"
                        "synthetic_count = 4\nsynthetic_size = 16\n" + extra)
        return path

    def test_synthetic_run(self, tmp_path, capsys):
        cfg = self._config(tmp_path)
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--synthetic", "--output", str(out)]) == 0
        assert "learning_rate = 0.001" in capsys.readouterr().out
        rows = list(csv.reader(open(out / "loss.csv")))
        assert rows[0] == ["step", "loss"] and len(rows) == 4
        assert (out / "checkpoints" / "step_000003" / "weights.hifiw").is_file()
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["steps"] == 3 and manifest["train"]["max_steps"] == 3
        archive.load_weights(out / "weights.hifiw")

        assert main(["train", "--config", str(cfg), "--synthetic", "--output", str(tmp_path / "again")]) == 0
        assert (out / "loss.csv").read_bytes() == (tmp_path / "again" / "loss.csv").read_bytes()

    def test_missing_learning_rate(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("batch_size = 2\n")
        assert main(["train", "--config", str(path)]) == 2
        assert "learning_rate" in capsys.readouterr().err

    def test_invalid_field(self, tmp_path, capsys):
        assert main(["train", "--config", str(self._config(tmp_path, "batch_size_typo = 3\n"))]) == 2
        assert "batch_size_typo" in capsys.readouterr().err

    def test_needs_data_source(self, tmp_path, capsys):
        assert main(["train", "--config", str(self._config(tmp_path)), "--output", str(tmp_path / "o")]) == 2
        assert "synthetic" in capsys.readouterr().err

    def test_directory_dataset(self, tmp_path, rng):
        _images(tmp_path / "deg", ["a.png", "b.png"], rng)
        _images(tmp_path / "gt", ["a.png", "b.png"], rng)
        cfg = self._config(tmp_path, f"degraded_dir = {tmp_path / 'deg'}\ngt_dir = {tmp_path / 'gt'}\n")
        assert main(["train", "--config", str(cfg), "--output", str(tmp_path / "o")]) == 0


class TestEval:
    def test_identity_on_equal_pairs(self, tmp_path, rng, capsys):
        d = _images(tmp_path / "x", ["a.png", "b.png", "c.png"], rng)
        report = tmp_path / "rep.csv"
        assert main(["eval", "--identity", "--degraded", str(d), "--gt", str(d), "--report", str(report)]) == 0
        text = report.read_text().splitlines()
        assert text[0] == "id,mse,psnr,ssim,er3c" and len(text) == 4
        doc = json.loads((tmp_path / "rep.json").read_text())
        assert doc["aggregate"]["ssim"]["mean"] == 1.0 and doc["aggregate"]["er3c"]["mean"] == 0.0

    def test_with_weights(self, tmp_path, weights, rng):
        deg = _images(tmp_path / "deg", ["a.png", "b.png"], rng)
        gt = _images(tmp_path / "gt", ["a.png", "b.png"], rng)
        assert main(["eval", "--weights", str(weights), "--degraded", str(deg), "--gt", str(gt),
                     "--report", str(tmp_path / "r.csv")]) == 0
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 3

    def test_zero_pairs(self, tmp_path, rng):
        deg = _images(tmp_path / "deg", ["a.png"], rng)
        gt = _images(tmp_path / "gt", ["b.png"], rng)
        assert main(["eval", "--identity", "--degraded", str(deg), "--gt", str(gt),
                     "--report", str(tmp_path / "r.csv")]) == 2

    def test_corrupt_pair_is_partial(self, tmp_path, rng):
        deg = _images(tmp_path / "deg", ["a.png", "b.png"], rng)
        gt = _images(tmp_path / "gt", ["a.png"], rng)
        (gt / "b.png").write_bytes(b"bad")
        assert main(["eval", "--identity", "--degraded", str(deg), "--gt", str(gt),
                     "--report", str(tmp_path / "r.csv")]) == 1
        assert len((tmp_path / "r.csv").read_text().splitlines()) == 2


class TestWavelet:
    def test_constant_gray(self, tmp_path, capsys):
        src = tmp_path / "g.png"
        write_image(src, np.full((1, 3, 64, 64), 0.5))
        assert main(["wavelet", "--input", str(src), "--output", str(tmp_path / "w"), "--verify"]) == 0
        for band in ("lh", "hl", "hh"):
            img = read_image(tmp_path / "w" / f"{band}.png")
            assert img.shape == (1, 3, 32, 32)
            assert np.all(np.round(img.data * 255) == 128)
        for label in "bcde":
            assert read_image(tmp_path / "w" / f"input_{label}.png").shape == (1, 3, 64, 64)
        line = [ln for ln in capsys.readouterr().out.splitlines() if "reconstruction error" in ln][0]
        assert float(line.split(":")[1].split()[0]) < 1e-4

    def test_undecodable(self, tmp_path):
        (tmp_path / "x.png").write_bytes(b"nope")
        assert main(["wavelet", "--input", str(tmp_path / "x.png"), "--output", str(tmp_path / "w")]) == 2


class TestMetricsCommand:
    def test_files(self, tmp_path, rng, capsys):
        write_image(tmp_path / "a.png", rng.random((1, 3, 16, 16)))
        assert main(["metrics", "--pred", str(tmp_path / "a.png"), "--gt", str(tmp_path / "a.png")]) == 0
        assert "psnr=inf" in capsys.readouterr().out

    def test_dirs_with_report(self, tmp_path, rng):
        d = _images(tmp_path / "x", ["a.png", "b.png"], rng)
        assert main(["metrics", "--pred", str(d), "--gt", str(d), "--report", str(tmp_path / "m")]) == 0
        assert (tmp_path / "m.csv").read_text().startswith("id,mse,psnr,ssim,er3c\n")


def test_inspect_weights(weights, capsys):
    assert main(["inspect-weights", "--weights", str(weights)]) == 0
    out = capsys.readouterr().out
    assert "format_version: 1" in out and "rfm.rfu1.base_path.conv5.weight" in out
    assert f"{init_params(0).count()} scalars" in out


def test_inspect_bad_file(tmp_path):
    (tmp_path / "x").write_bytes(b"zzz")
    assert main(["inspect-weights", "--weights", str(tmp_path / "x")]) == 2
