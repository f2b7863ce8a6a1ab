import csv
import shutil
import subprocess
import sys

import numpy as np
import pytest

from moctefuse import checkpoint, config
from moctefuse.cli import main
from moctefuse.data import luma, read_image
from moctefuse.metrics import entropy, read_report
from oracles import mi_loop

TINY_INI = """\
[gate]
widths = 4,8,8,16
blocks = 1,1,1,1
[fusion]
channels = 4
depth = 1
window = 4
[train]
crop = 16
batch_size = 4
lr = 2e-3
[train-gate]
epochs = 2
warmup_epochs = 0.5
[train-fuse]
epochs = 2
warmup_epochs = 0.5
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY_INI, encoding="utf-8")
    assert main(["make-synthetic", "--out", str(root / "data"), "--pairs", "4", "--size", "40"]) == 0
    assert main(["train-gate", "--data", str(root / "data"), "--config", str(root / "tiny.ini"),
                 "--out", str(root / "gate.ckpt")]) == 0
    assert main(["train-fuse", "--data", str(root / "data"), "--config", str(root / "tiny.ini"),
                 "--gate", str(root / "gate.ckpt"), "--out", str(root / "fuse.ckpt")]) == 0
    return root


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nlr = 0.5\nepochs = 7\n[train-fuse]\nepochs = 9\n", encoding="utf-8")
    conf = config.load(ini, {"train-fuse": {"lr": 0.25, "epochs": None}})
    t = config.train_config(conf, "train-fuse")
    assert (t.lr, t.epochs, t.batch_size) == (0.25, 9, 8)
    assert config.train_config(config.load(ini), "train-gate").epochs == 7
    assert config.train_config(config.load(), "train-gate").epochs == 60
    (tmp_path / "bad.ini").write_text("[nope]\nx = 1\n", encoding="utf-8")
    with pytest.raises(ValueError):
        config.load(tmp_path / "bad.ini")


def test_config_builders_defaults():
    conf = config.load()
    assert config.gate_config(conf).widths == (64, 128, 256, 512)
    assert config.fusion_config(conf).channels == 16
    assert config.loss_weights(conf).gamma == 10.0


def test_training_writes_checkpoints_and_logs(workspace):
    for name in ("gate.ckpt", "gate.ckpt.adam", "gate.ckpt.log.csv", "fuse.ckpt", "fuse.ckpt.adam",
                 "fuse.ckpt.log.csv"):
        assert (workspace / name).exists(), name
    rows = list(csv.DictReader(open(workspace / "fuse.ckpt.log.csv", encoding="utf-8")))
    assert len(rows) == 2


def test_fuse_directory_and_single(workspace, capsys):
    out = workspace / "fused"
    rc = main(["fuse", "--ir", str(workspace / "data/ir"), "--vi", str(workspace / "data/vi"),
               "--gate", str(workspace / "gate.ckpt"), "--model", str(workspace / "fuse.ckpt"),
               "--out", str(out)])
    assert rc == 0
    assert sorted(p.name for p in out.iterdir()) == [
        "00000D_fused.png", "00001D_fused.png", "00002N_fused.png", "00003N_fused.png"]
    assert capsys.readouterr().out.count("P_H=") == 4
    single = workspace / "single"
    rc = main(["fuse", "--ir", str(workspace / "data/ir/00000D.png"), "--vi",
               str(workspace / "data/vi/00000D.png"), "--gate", str(workspace / "gate.ckpt"),
               "--model", str(workspace / "fuse.ckpt"), "--out", str(single)])
    assert rc == 0
    assert [p.name for p in single.iterdir()] == ["00000D_fused.png"]
    assert (single / "00000D_fused.png").read_bytes() == (out / "00000D_fused.png").read_bytes()


def test_force_gate_routes_to_one_expert(workspace, capsys):
    from moctefuse import tensor as T
    from moctefuse.cli import load_fusion
    from moctefuse.data import load_pair
    out = workspace / "forced"
    rc = main(["fuse", "--ir", str(workspace / "data/ir/00002N.png"), "--vi",
               str(workspace / "data/vi/00002N.png"), "--model", str(workspace / "fuse.ckpt"),
               "--out", str(out), "--force-gate", "hi"])
    assert rc == 0
    assert "P_H=1.000000" in capsys.readouterr().out
    model, _ = load_fusion(workspace / "fuse.ckpt")
    pair = load_pair(workspace / "data/ir/00002N.png", workspace / "data/vi/00002N.png")
    with T.no_grad():
        hi = model(T.Tensor(pair.ir), T.Tensor(pair.vi_luma), 1.0).i_f_hi.data[0]
    got_luma = luma(read_image(out / "00002N_fused.png"))
    assert np.max(np.abs(got_luma - hi)) <= 2 / 255


def test_fuse_errors(workspace):
    assert main(["fuse", "--ir", "nope", "--vi", "nope", "--model", str(workspace / "fuse.ckpt"),
                 "--gate", str(workspace / "gate.ckpt"), "--out", str(workspace / "x")]) == 2
    assert main(["fuse", "--ir", str(workspace / "data/ir"), "--vi", str(workspace / "data/vi"),
                 "--model", str(workspace / "gate.ckpt"), "--gate", str(workspace / "gate.ckpt"),
                 "--out", str(workspace / "x")]) == 3


def test_evaluate_identity_mi(workspace):
    fused = workspace / "copy"
    shutil.copytree(workspace / "data/vi", fused)
    rc = main(["evaluate", "--ir", str(workspace / "data/ir"), "--vi", str(workspace / "data/vi"),
               "--fused", str(fused), "--out", str(workspace / "rep")])
    assert rc == 0
    rep = read_report(workspace / "rep.csv")
    for rid, vals in rep.rows:
        vi = luma(read_image(workspace / "data/vi" / f"{rid}.png"))
        ir = luma(read_image(workspace / "data/ir" / f"{rid}.png"))
        expected = entropy(vi) + mi_loop(vi, ir)
        assert vals["mi"] == pytest.approx(expected, abs=1e-12)
    assert (workspace / "rep.json").exists()


def test_evaluate_unmatched(workspace, tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["evaluate", "--ir", str(workspace / "data/ir"), "--vi", str(workspace / "data/vi"),
                 "--fused", str(empty), "--out", str(tmp_path / "r")]) == 2
    partial = tmp_path / "partial"
    shutil.copytree(workspace / "data/vi", partial)
    (partial / "00001D.png").unlink()
    assert main(["evaluate", "--ir", str(workspace / "data/ir"), "--vi", str(workspace / "data/vi"),
                 "--fused", str(partial), "--out", str(tmp_path / "r")]) == 2
    assert "00001D" in capsys.readouterr().err


def test_train_gate_missing_labels(tmp_path, capsys):
    main(["make-synthetic", "--out", str(tmp_path / "d"), "--pairs", "2", "--size", "32"])
    for sub in ("ir", "vi"):
        (tmp_path / "d" / sub / "00000D.png").rename(tmp_path / "d" / sub / "frame.png")
    assert main(["train-gate", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "g.ckpt")]) == 2
    assert "labels.csv" in capsys.readouterr().err


def test_train_bad_data_dir(tmp_path):
    assert main(["train-gate", "--data", str(tmp_path), "--out", str(tmp_path / "g.ckpt")]) == 2


def test_resume_advances_step(workspace, tmp_path):
    out = tmp_path / "resumed.ckpt"
    rc = main(["train-fuse", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.ini"),
               "--gate", str(workspace / "gate.ckpt"), "--resume", str(workspace / "fuse.ckpt"),
               "--epochs", "4", "--out", str(out)])
    assert rc == 0
    before = checkpoint.load(workspace / "fuse.ckpt")[0]["meta"]["step"]
    after = checkpoint.load(out)[0]["meta"]["step"]
    assert after > before
    rows = list(csv.DictReader(open(str(out) + ".log.csv", encoding="utf-8")))
    assert int(rows[0]["step"]) == before + 1


def test_nan_abort_saves_last_good(workspace, tmp_path, monkeypatch, capsys):
    from moctefuse.errors import TrainingError

    def boom(*a, **k):
        raise TrainingError("non-finite gradient in hi.merge.weight", param="hi.merge.weight")

    monkeypatch.setattr("moctefuse.cli.train_fuse", boom)
    out = tmp_path / "f.ckpt"
    rc = main(["train-fuse", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.ini"),
               "--gate", str(workspace / "gate.ckpt"), "--out", str(out)])
    assert rc == 4
    assert (tmp_path / "f.ckpt.lastgood").exists()
    assert "hi.merge.weight" in capsys.readouterr().err


def test_training_byte_identical(workspace, tmp_path):
    out = tmp_path / "again.ckpt"
    main(["train-fuse", "--data", str(workspace / "data"), "--config", str(workspace / "tiny.ini"),
          "--gate", str(workspace / "gate.ckpt"), "--out", str(out)])
    assert out.read_bytes() == (workspace / "fuse.ckpt").read_bytes()


def test_seed_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("MOCTEFUSE_SEED", "5")
    from moctefuse.cli import build_parser
    args = build_parser().parse_args(["train-gate", "--data", "x", "--out", "y"])
    assert args.seed == 5


def test_inspect_checkpoint(workspace, capsys):
    assert main(["inspect-checkpoint", str(workspace / "fuse.ckpt")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("kind=fusion")
    assert "enc_ir.conv_in.weight\t4x1x3x3\t" in out
    assert main(["inspect-checkpoint", str(workspace / "tiny.ini")]) == 3


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--scope", "competitive", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    main(["gradcheck", "--scope", "competitive", "--seed", "3"])
    assert capsys.readouterr().out == first
    assert "PASS competitive" in first


def test_gradcheck_failure_exit(monkeypatch, capsys):
    monkeypatch.setattr("moctefuse.verify.run", lambda scope, seed: [("matmul", 1.0, 1e-5, False)])
    assert main(["gradcheck", "--scope", "primitive"]) == 1
    assert "FAIL matmul" in capsys.readouterr().out


def test_exactly_one_subcommand():
    with pytest.raises(SystemExit):
        main([])


def test_console_script_runs():
    out = subprocess.run([sys.executable, "-m", "moctefuse", "gradcheck", "--scope", "competitive"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert "PASS competitive_zero_gate" in out.stdout
