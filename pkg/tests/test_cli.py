import re
import shutil

import pytest
import torch

from dermclf.cli import main
from dermclf.toydata import write_toy_config, write_toy_dataset


@pytest.fixture
def toy_dir(tmp_path):
    write_toy_dataset(tmp_path)
    write_toy_config(tmp_path)
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(toy_dir, capsys):
    cfg = toy_dir / "config.toml"
    code, _, _ = run(capsys, "--config", cfg, "train")
    assert code == 0
    return toy_dir


def test_ingest_toy_counts(toy_dir, capsys):
    code, out, _ = run(capsys, "--config", toy_dir / "config.toml", "ingest")
    assert code == 0
    assert "train: 14 records" in out and "val: 7 records" in out and "test: 7 records" in out
    assert "MEL=2 NV=2 BCC=2 AKIEC=2 BKL=2 DF=2 VASC=2" in out
    assert (toy_dir / "run" / "manifests" / "train.csv").exists()


def test_ingest_missing_image_exit_2(toy_dir, capsys):
    (toy_dir / "images" / "TOY_val_DF_000.jpg").unlink()
    code, _, err = run(capsys, "--config", toy_dir / "config.toml", "ingest")
    assert code == 2
    assert "TOY_val_DF_000" in err


def test_ingest_bad_header_exit_2(toy_dir, capsys):
    (toy_dir / "test_ground_truth.csv").write_text("image,A,B\n")
    code, _, err = run(capsys, "--config", toy_dir / "config.toml", "ingest")
    assert code == 2 and "header" in err


def test_dry_run_default_plan(capsys, tmp_path):
    code, out, _ = run(capsys, "--output", tmp_path, "train", "--dry-run")
    assert code == 0
    assert "total epochs: 19" in out
    assert "total cycles: 8" in out
    assert "restart epochs: 0, 1, 2, 3, 4, 5, 7, 11" in out
    assert not any(tmp_path.iterdir())


def test_train_twice_same_loss_csv(toy_dir, capsys):
    cfg = toy_dir / "config.toml"
    assert run(capsys, "--config", cfg, "train")[0] == 0
    first = (toy_dir / "run" / "loss.csv").read_text()
    shutil.rmtree(toy_dir / "run")
    code, out, _ = run(capsys, "--config", cfg, "train")
    assert code == 0
    assert (toy_dir / "run" / "loss.csv").read_text() == first
    assert "final training loss (last step)" in out and "last-epoch mean" in out
    assert (toy_dir / "run" / "schedule.csv").read_text().startswith("step,epoch,phase,cycle,lr_g0,lr_g1,lr_g2\n")


def test_evaluate_writes_reports(trained, capsys):
    cfg = trained / "config.toml"
    ckpt = trained / "run" / "checkpoints" / "last.pt"
    code, out, _ = run(capsys, "--config", cfg, "evaluate", "--checkpoint", ckpt, "--split", "val", "--tta")
    assert code == 0
    assert "balanced accuracy (plain)" in out and "balanced accuracy (TTA" in out
    assert (trained / "run" / "val_report.json").exists()
    assert (trained / "run" / "val_predictions.csv").read_text().startswith("image,MEL,NV,BCC,AKIEC,BKL,DF,VASC,predicted")


def test_evaluate_degenerate_tta_equals_plain(trained, capsys):
    cfg = trained / "config.toml"
    text = cfg.read_text().replace("p_hflip = 0.5", "p_hflip = 0.0").replace("p_vflip = 0.5", "p_vflip = 0.0")
    text = text.replace("zoom_max = 1.1", "zoom_max = 1.0")
    cfg.write_text(text)
    shutil.rmtree(trained / "run")
    assert run(capsys, "--config", cfg, "train")[0] == 0
    code, out, _ = run(capsys, "--config", cfg, "evaluate", "--checkpoint", trained / "run/checkpoints/last.pt", "--tta")
    assert code == 0
    accs = re.findall(r"balanced accuracy .*: ([0-9.]+)", out)
    assert len(accs) == 2 and accs[0] == accs[1]


def test_predict_zero_head_uniform(trained, capsys, tmp_path):
    ckpt = trained / "run" / "checkpoints" / "last.pt"
    payload = torch.load(ckpt, weights_only=True)
    payload["model"]["head.out.weight"].zero_()
    payload["model"]["head.out.bias"].zero_()
    zero = tmp_path / "zero.pt"
    torch.save(payload, zero)
    image = trained / "images" / "TOY_val_NV_000.jpg"
    code, out, _ = run(capsys, "--config", trained / "config.toml", "predict", "--checkpoint", zero, image)
    assert code == 0
    lines = out.strip().splitlines()
    assert [l.split("\t")[0] for l in lines[:7]] == ["MEL", "NV", "BCC", "AKIEC", "BKL", "DF", "VASC"]
    assert all(l.split("\t")[1] == "0.142857" for l in lines[:7])
    assert lines[7] == "predicted\tMEL"


def test_predict_repeatable(trained, capsys):
    ckpt = trained / "run" / "checkpoints" / "last.pt"
    image = trained / "images" / "TOY_val_BCC_000.jpg"
    for extra in ([], ["--tta"]):
        a = run(capsys, "--config", trained / "config.toml", "predict", "--checkpoint", ckpt, *extra, image)
        b = run(capsys, "--config", trained / "config.toml", "predict", "--checkpoint", ckpt, *extra, image)
        assert a[0] == 0 and a == b


def test_predict_undecodable_exit_2(trained, capsys, tmp_path):
    bad = tmp_path / "bad.jpg"
    bad.write_bytes(b"nope")
    code, _, _ = run(capsys, "--config", trained / "config.toml", "predict",
                     "--checkpoint", trained / "run/checkpoints/last.pt", bad)
    assert code == 2


def test_evaluate_corrupt_checkpoint_exit_2(trained, capsys, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"\x00" * 10)
    code, _, err = run(capsys, "--config", trained / "config.toml", "evaluate", "--checkpoint", bad)
    assert code == 2 and "checkpoint" in err


def test_plot_recipe_plan(capsys, tmp_path):
    code, out, _ = run(capsys, "--output", tmp_path, "plot", "--steps-per-epoch", 7)
    assert code == 0
    assert "learning-rate restarts (top group): 8" in out
    assert "max lr group 0: 0.00111111" in out
    lines = (tmp_path / "figures" / "lr_phase2.csv").read_text().splitlines()
    assert lines[0] == "step,group,lr"
    g0 = [float(l.split(",")[2]) for l in lines[1:] if l.split(",")[1] == "0"]
    assert max(g0) == 1e-2 / 9


def test_plot_from_training_outputs(trained, capsys):
    run_dir = trained / "run"
    code, out, _ = run(capsys, "--config", trained / "config.toml", "plot", "--loss", run_dir / "loss.csv",
                       "--schedule", run_dir / "schedule.csv")
    assert code == 0
    assert (run_dir / "figures" / "loss.csv").read_text().startswith("step,loss\n")
    assert (run_dir / "figures" / "lr_phase1.csv").exists()


def test_plot_empty_or_malformed_loss_exit_2(capsys, tmp_path):
    empty = tmp_path / "loss.csv"
    empty.write_text("step,epoch,phase,loss\n")
    assert run(capsys, "--output", tmp_path, "plot", "--steps-per-epoch", 1, "--loss", empty)[0] == 2
    empty.write_text("garbage\n1,2\n")
    assert run(capsys, "--output", tmp_path, "plot", "--steps-per-epoch", 1, "--loss", empty)[0] == 2
    sched = tmp_path / "s.csv"
    sched.write_text("a,b\n")
    assert run(capsys, "--output", tmp_path, "plot", "--schedule", sched)[0] == 2


def test_bad_config_exit_2(capsys, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[train]\nbogus = 1\n")
    assert run(capsys, "--config", cfg, "show-config")[0] == 2


def test_show_config_round_trip(capsys, toy_dir):
    code, out, _ = run(capsys, "show-config")
    assert code == 0
    (toy_dir / "again.toml").write_text(out)
    code, out2, _ = run(capsys, "--config", toy_dir / "again.toml", "show-config")
    assert out2.replace(str(toy_dir) + "/", "") == out
