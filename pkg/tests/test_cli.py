import csv
import subprocess
import sys
from pathlib import Path

import pytest
import torch

from rgvsr import cli, trainer
from rgvsr.dataseq import load_sequence, write_sequence

TINY_CFG = """\
# tiny smoke-test configuration
dataset = toy/manifest.txt
T = 3
batch = 2
crop_hr = 32
n = 2
filters = 8
res_blocks = 1
align_filters = 4
align_res_blocks = 1
disc_blocks = 3
disc_filters = 4
disc_dense = 8
fe_widths = 4,4
pretrain_iters = 2
main_iters = 1
checkpoint_interval = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["make-toy", "--out", str(root / "toy"), "--sequences", "2", "--length", "4",
                     "--size", "32", "--seed", "3"]) == 0
    (root / "toy.cfg").write_text(TINY_CFG)
    assert cli.main(["train", "--config", str(root / "toy.cfg"), "--out", str(root / "run")]) == 0
    return root


def test_make_toy_layout(workspace):
    toy = workspace / "toy"
    lines = (toy / "manifest.txt").read_text().splitlines()
    assert len(lines) == 2 and "\t" in lines[0]
    assert len(list((toy / "hr" / "toy000").glob("*.png"))) == 4
    assert len(list((toy / "flows" / "toy000").glob("*.flo"))) == 3


def test_train_produces_checkpoint_and_loss_log(workspace):
    run = workspace / "run"
    assert (run / "last.rgv").exists()
    rows = list(csv.DictReader(open(run / "losses.csv")))
    assert len(rows) == 3


def test_train_same_seed_twice_gives_identical_checkpoints(workspace):
    for name in ("s1", "s2"):
        assert cli.main(["train", "--config", str(workspace / "toy.cfg"), "--seed", "1",
                         "--set", "main_iters=0", "--out", str(workspace / name)]) == 0
    assert (workspace / "s1" / "last.rgv").read_bytes() == (workspace / "s2" / "last.rgv").read_bytes()


def test_unknown_override_key_exits_2_and_writes_nothing(workspace, capsys):
    out = workspace / "never"
    code = cli.main(["train", "--config", str(workspace / "toy.cfg"), "--set", "warp_factor=9",
                     "--out", str(out)])
    assert code == 2
    assert "warp_factor" in capsys.readouterr().err
    assert not out.exists()


def test_train_missing_dataset_exits_2(workspace, tmp_path):
    assert cli.main(["train", "--config", str(workspace / "toy.cfg"), "--set",
                     f"dataset={tmp_path / 'none.txt'}", "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_runtime_failure_exits_3(workspace, monkeypatch, tmp_path):
    def explode(*a, **k):
        raise FloatingPointError("non-finite loss")

    monkeypatch.setattr(trainer, "train", explode)
    assert cli.main(["train", "--config", str(workspace / "toy.cfg"), "--out", str(tmp_path / "x")]) == 3


def test_infer_shapes_names_and_determinism(workspace, tmp_path):
    lr_dir = tmp_path / "lr"
    write_sequence(torch.rand(10, 3, 16, 16), lr_dir, [f"frame_{i:03d}.png" for i in range(10)])
    ckpt = str(workspace / "run" / "last.rgv")
    assert cli.main(["infer", "--checkpoint", ckpt, "--in", str(lr_dir), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["infer", "--checkpoint", ckpt, "--in", str(lr_dir), "--out", str(tmp_path / "b")]) == 0
    out = load_sequence(tmp_path / "a")
    assert out.frames.shape == (10, 3, 64, 64)
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == [f"frame_{i:03d}.png" for i in range(10)]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_infer_errors(workspace, tmp_path):
    (tmp_path / "empty").mkdir()
    ckpt = str(workspace / "run" / "last.rgv")
    assert cli.main(["infer", "--checkpoint", str(tmp_path / "no.rgv"), "--in", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["infer", "--checkpoint", ckpt, "--in", str(tmp_path / "empty"),
                     "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_eval_writes_report_and_flags_missing_plugins(workspace, tmp_path, capsys):
    code = cli.main(["eval", "--checkpoint", str(workspace / "run" / "last.rgv"),
                     "--in", str(workspace / "toy" / "manifest.txt"), "--flows", str(workspace / "toy" / "flows"),
                     "--metrics", str(tmp_path / "rep")])
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "rep" / "metrics.csv")))
    assert [r["sequence"] for r in rows] == ["toy000", "toy001", "MEAN"]
    assert rows[-1]["t_perceptual"] == "NA"
    assert rows[-1]["warp_err_db"] != "NA"
    assert "unavailable" in (tmp_path / "rep" / "metrics.txt").read_text()


def test_eval_bicubic_baseline_without_checkpoint(workspace, tmp_path):
    assert cli.main(["eval", "--in", str(workspace / "toy" / "manifest.txt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").exists()


def test_eval_empty_dataset_exits_2(tmp_path):
    (tmp_path / "m.txt").write_text("# nothing\n")
    assert cli.main(["eval", "--in", str(tmp_path / "m.txt"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_ablate_n_identical_frames_are_capped(tmp_path):
    frame = torch.rand(1, 3, 16, 16)
    write_sequence(torch.cat([frame, frame]), tmp_path / "pair")
    assert cli.main(["ablate-n", "--in", str(tmp_path / "pair"), "--n", "1,2", "--steps", "20",
                     "--out", str(tmp_path / "abl.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "abl.csv")))
    assert [r["n"] for r in rows] == ["1", "2"]
    assert all(float(r["psnr_db"]) == 99.0 for r in rows)


def test_ablate_n_single_frame_exits_2(tmp_path):
    write_sequence(torch.rand(1, 3, 16, 16), tmp_path / "one")
    assert cli.main(["ablate-n", "--in", str(tmp_path / "one"), "--out", str(tmp_path / "a.csv")]) == 2
    assert not (tmp_path / "a.csv").exists()


@pytest.mark.parametrize("argv", [[], ["fly"], ["train", "--bogus"], ["ablate-n", "--n", "x,y", "--in", "."]])
def test_usage_errors_exit_2(argv):
    assert cli.main(argv) == 2


def test_module_entry_point_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rgvsr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "ablate-n" in proc.stdout


def test_bundled_toy_config_parses():
    cfg_path = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"
    cfg = trainer.load_config(cfg_path)
    assert (cfg.T, cfg.batch, cfg.crop_hr // cfg.scale) == (5, 2, 32)
    assert Path(cfg.dataset) == cfg_path.parent.parent / "runs" / "toy" / "manifest.txt"
