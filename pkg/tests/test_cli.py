import csv
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from sdnet.checkpoint import save_checkpoint
from sdnet.cli import build_parser, main
from sdnet.config import RunConfig
from sdnet.data import ManifestRecord, load_image, read_manifest, save_image, write_manifest
from sdnet.model import ModelConfig, init_params, param_count
from sdnet.swin import BlockConfig

SMALL_CFG = "window_size = 3\nembed_dim = 18\ntotal_iters = 2\nbatch = 2\ncrop = 18\n"


@pytest.fixture
def workspace(tmp_path):
    bg = tmp_path / "bg"
    bg.mkdir()
    rng = np.random.default_rng(0)
    for i in range(6):
        Image.fromarray((rng.random((20, 22, 3)) * 255).astype(np.uint8)).save(bg / f"{i}.png")
    (tmp_path / "small.cfg").write_text(SMALL_CFG)
    return tmp_path


def small_checkpoint(path, seed=0):
    cfg = ModelConfig(block=BlockConfig(window_size=3, embed_dim=18))
    save_checkpoint(init_params(cfg, seed), path)
    return path


class TestSynth:
    def test_smoke_set(self, workspace):
        out = workspace / "set"
        assert main(["synth", "--backgrounds", str(workspace / "bg"), "--out", str(out),
                     "--n-train", "4", "--n-test", "2", "--seed", "1"]) == 0
        assert [r.split for r in read_manifest(out / "manifest.tsv")].count("test") == 2

    def test_idempotent(self, workspace):
        for name in ("a", "b"):
            main(["synth", "--backgrounds", str(workspace / "bg"), "--out", str(workspace / name),
                  "--n-train", "2", "--n-test", "1"])
        for rel in ("manifest.tsv", "train/rainy/00000.png", "test/rainy/00002.png"):
            assert (workspace / "a" / rel).read_bytes() == (workspace / "b" / rel).read_bytes()

    def test_missing_directory(self, workspace, capsys):
        code = main(["synth", "--backgrounds", str(workspace / "nope"), "--out", str(workspace / "o"),
                     "--n-train", "1", "--n-test", "0"])
        assert code != 0
        assert "not found" in capsys.readouterr().err
        assert not (workspace / "o" / "manifest.tsv").exists()


class TestTrainFlags:
    def parse(self, *extra):
        from sdnet.cli import _run_config
        args = build_parser().parse_args(["train", "--data", "m", "--out", "o", *extra])
        return _run_config(args)

    def test_default_is_full_model(self):
        assert self.parse() == self.parse("--variant", "sdnet", "--branches", "3")

    def test_variant_r2(self):
        cfg = self.parse("--variant", "r2")
        assert (cfg.skip_small, cfg.skip_large) == (True, False)

    def test_branches(self):
        assert self.parse("--branches", "4").model_config().num_branches == 4

    def test_set_override(self):
        assert self.parse("--set", "lr0=0.001").lr0 == 0.001

    def test_help_lists_every_key(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--help"])
        text = capsys.readouterr().out
        assert all(k in text for k in RunConfig.keys())

    def test_unknown_key_fails(self, workspace, capsys):
        code = main(["train", "--data", "m", "--out", str(workspace / "o"), "--set", "nonsense=1"])
        assert code != 0 and "nonsense" in capsys.readouterr().err

    def test_train_echoes_config(self, workspace, caplog):
        main(["synth", "--backgrounds", str(workspace / "bg"), "--out", str(workspace / "set"),
              "--n-train", "2", "--n-test", "1"])
        with caplog.at_level("INFO"):
            code = main(["train", "--config", str(workspace / "small.cfg"),
                         "--data", str(workspace / "set" / "manifest.tsv"), "--out", str(workspace / "run")])
        assert code == 0
        assert "config: embed_dim = 18" in caplog.text
        assert (workspace / "run" / "last.sdn").exists()


class TestDerain:
    def test_sizes_preserved_and_clamped(self, workspace):
        ckpt = small_checkpoint(workspace / "m.sdn")
        inp = workspace / "in"
        rng = np.random.default_rng(3)
        save_image(rng.random((18, 18, 3)), inp / "a.png")
        save_image(rng.random((20, 13, 3)), inp / "b.png")
        code = main(["derain", "--config", str(workspace / "small.cfg"), "--checkpoint", str(ckpt),
                     "--in", str(inp), "--out", str(workspace / "out")])
        assert code == 0
        assert load_image(workspace / "out" / "a.png").shape == (18, 18, 3)
        assert load_image(workspace / "out" / "b.png").shape == (20, 13, 3)

    def test_config_mismatch(self, workspace, capsys):
        ckpt = small_checkpoint(workspace / "m.sdn")
        save_image(np.zeros((9, 9, 3)), workspace / "x.png")
        code = main(["derain", "--checkpoint", str(ckpt), "--in", str(workspace / "x.png"),
                     "--out", str(workspace / "out")])
        assert code != 0 and "does not match" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, workspace, capsys):
        (workspace / "bad.sdn").write_bytes(b"XXXX\x00\x00\x00\x00")
        code = main(["derain", "--checkpoint", str(workspace / "bad.sdn"), "--in", str(workspace),
                     "--out", str(workspace / "out")])
        assert code != 0 and "magic" in capsys.readouterr().err


class TestEval:
    def test_rows_mean_and_baseline(self, workspace):
        main(["synth", "--backgrounds", str(workspace / "bg"), "--out", str(workspace / "set"),
              "--n-train", "2", "--n-test", "3"])
        ckpt = small_checkpoint(workspace / "m.sdn")
        out = workspace / "eval.csv"
        code = main(["eval", "--config", str(workspace / "small.cfg"), "--checkpoint", str(ckpt),
                     "--data", str(workspace / "set" / "manifest.tsv"), "--out", str(out)])
        assert code == 0
        rows = list(csv.DictReader(out.open()))
        assert [r["id"] for r in rows] == ["00002", "00003", "00004", "mean"]
        for col in ("psnr", "ssim", "rainy_psnr"):
            vals = [float(r[col]) for r in rows[:-1]]
            assert float(rows[-1][col]) == pytest.approx(np.mean(vals), abs=2e-6)

    def test_ground_truth_sentinel(self, workspace, monkeypatch):
        import sdnet.cli as cli
        save_image(np.random.default_rng(1).random((18, 18, 3)), workspace / "gt" / "a.png")
        write_manifest([ManifestRecord("a", "a.png", "a.png", "test", 0)], workspace / "gt" / "m.tsv")
        monkeypatch.setattr(cli, "predict", lambda params, cfg, img: img)
        out = workspace / "gt.csv"
        main(["eval", "--config", str(workspace / "small.cfg"), "--checkpoint",
              str(small_checkpoint(workspace / "m.sdn")), "--data", str(workspace / "gt" / "m.tsv"),
              "--out", str(out)])
        row = list(csv.DictReader(out.open()))[0]
        assert row["psnr"] == "inf" and float(row["ssim"]) == pytest.approx(1.0, abs=1e-6)


def test_params_command(capsys):
    assert main(["params"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1] == f"total\t{param_count(ModelConfig())}"
    assert len(lines) == 7


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "sdnet", "params", "--branches", "4"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().endswith(str(param_count(ModelConfig(num_branches=4))))
