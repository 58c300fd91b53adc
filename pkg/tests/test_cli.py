import csv
import json
from collections import Counter

import pytest

from nicelab.cli import main
from nicelab.scene import load_dataset
from nicelab.trainer import load_checkpoint

SMALL_GEN = ["--height", "32", "--width", "32", "--min-size", "6", "--max-size", "12"]
SMALL_TRAIN = ["--channels", "8", "--embed-dim", "8", "--layers", "2", "--heads", "2", "--hidden", "8",
               "--epochs", "2", "--batch-size", "2", "--lr", "1e-3", "--schedule", "constant"]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["gen", "--seed", "4", "--count", "3", "--out", str(out)] + SMALL_GEN) == 0
    return out


def test_gen_count_zero(tmp_path):
    assert main(["gen", "--count", "0", "--out", str(tmp_path)]) == 0
    assert load_dataset(tmp_path / "dataset.nicelab") == []


def test_gen_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["gen", "--seed", "9", "--count", "4", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/dataset.nicelab").read_bytes() == (tmp_path / "b/dataset.nicelab").read_bytes()
    assert (tmp_path / "a/manifest.json").read_text() == (tmp_path / "b/manifest.json").read_text()


def test_gen_manifest_matches_loader(tmp_path):
    assert main(["gen", "--count", "16", "--out", str(tmp_path)]) == 0
    scenes = load_dataset(tmp_path / "dataset.nicelab")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(scenes) == 16 == manifest["count"]
    assert manifest["phrase_histogram"] == dict(Counter(p.text for s in scenes for p in s.phrases))
    assert (tmp_path / "config.txt").read_text().startswith("count = 16")


def test_gen_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "gen.txt"
    cfg.write_text("height = 32\nwidth = 32\nmax_size = 12  # small canvas\n")
    assert main(["gen", "--count", "1", "--config", str(cfg), "--width", "48", "--out", str(tmp_path / "o")]) == 0
    (s,) = load_dataset(tmp_path / "o/dataset.nicelab")
    assert s.image.shape == (32, 48, 3)
    assert "width = 48" in (tmp_path / "o/config.txt").read_text()


def test_gen_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["gen", "--count", "1", "--out", str(blocker / "sub")]) == 2


def test_gen_bad_config_value(tmp_path):
    assert main(["gen", "--count", "1", "--height", "7", "--out", str(tmp_path)]) == 2


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2


def test_train_zero_epochs(data_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir / "dataset.nicelab"), "--out", str(out)]
                + SMALL_TRAIN[:-8] + ["--epochs", "0"]) == 0
    ckpt = load_checkpoint(out / "checkpoint.nckpt")
    assert ckpt.epoch == 0 and ckpt.step == 0


def test_train_mask_only_log(data_dir, tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data_dir / "dataset.nicelab"), "--out", str(out), "--mode", "mask_only"]
                + SMALL_TRAIN) == 0
    with open(out / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert all(float(r["smooth_l1"]) == 0.0 and float(r["giou"]) == 0.0 for r in rows)
    assert all(float(r["bce"]) > 0 for r in rows)


def _train(data_dir, out, extra=()):
    assert main(["train", "--data", str(data_dir / "dataset.nicelab"), "--out", str(out)]
                + SMALL_TRAIN + list(extra)) == 0
    return out / "checkpoint.nckpt"


def test_eval_deterministic_and_oracle(data_dir, tmp_path):
    ckpt = _train(data_dir, tmp_path / "run")
    data = str(data_dir / "dataset.nicelab")
    assert main(["eval", "--data", data, "--ckpt", str(ckpt), "--out", str(tmp_path / "e1")]) == 0
    assert main(["eval", "--data", data, "--ckpt", str(ckpt), "--out", str(tmp_path / "e2")]) == 0
    r1 = (tmp_path / "e1/report.json").read_text()
    assert r1 == (tmp_path / "e2/report.json").read_text()
    assert (tmp_path / "e1/recall_curves.csv").read_text() == (tmp_path / "e2/recall_curves.csv").read_text()
    rep = json.loads(r1)
    c = rep["counts"]
    assert c["thing"] + c["stuff"] == c["all"] == c["single"] + c["plural"]

    assert main(["eval", "--data", data, "--ckpt", str(ckpt), "--out", str(tmp_path / "o"), "--oracle"]) == 0
    rep = json.loads((tmp_path / "o/report.json").read_text())
    assert rep["ar_mask"]["all"] == pytest.approx(1.0) and rep["ar_box"]["all"] == pytest.approx(1.0)
    assert rep["ie"]["all"] == 0.0


def test_eval_config_mismatch(data_dir, tmp_path):
    ckpt = _train(data_dir, tmp_path / "run")
    other = tmp_path / "other.txt"
    other.write_text((tmp_path / "run/config.txt").read_text().replace("layers = 2", "layers = 3"))
    args = ["eval", "--data", str(data_dir / "dataset.nicelab"), "--ckpt", str(ckpt), "--out", str(tmp_path / "e")]
    assert main(args + ["--config", str(tmp_path / "run/config.txt")]) == 0
    assert main(args + ["--config", str(other)]) == 2


def test_eval_missing_checkpoint(data_dir, tmp_path):
    assert main(["eval", "--data", str(data_dir / "dataset.nicelab"), "--ckpt", str(tmp_path / "x"),
                 "--out", str(tmp_path / "e")]) == 2


def test_train_divergence_exit_code(data_dir, tmp_path):
    assert main(["train", "--data", str(data_dir / "dataset.nicelab"), "--out", str(tmp_path / "run"),
                 "--lr", "1e300", "--clip-norm", "0"] + SMALL_TRAIN[:-6] + ["--epochs", "3"]) == 3


def test_ablate(data_dir, tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--data", str(data_dir / "dataset.nicelab"), "--out", str(out),
                 "--variants", "joint,box_only"] + SMALL_TRAIN) == 0
    lines = (out / "ablation.tsv").read_text().splitlines()
    assert [ln.split("\t")[0] for ln in lines[1:]] == ["joint", "box_only"]
    assert (out / "report_box_only.json").exists()


def test_check_passes_and_corruption_fails(capsys):
    assert main(["check", "--trials", "1", "--instances", "50"]) == 0
    out = capsys.readouterr().out
    assert "cga_stack" in out and "giou" in out
    assert main(["check", "--trials", "1", "--instances", "50", "--corrupt", "sigmoid"]) == 1
    assert "sigmoid" in capsys.readouterr().err
