import json

import numpy as np
import pytest

from gmmtrans.cli import main
from gmmtrans.pngio import read_image, write_image

TINY = ["--K", "2", "--latent-dim", "4", "--patch-size", "16", "--channel-widths", "4,8",
        "--patches-per-image", "2", "--batch-size", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "d"
    assert main(["dataset", "--out", str(root), "--train-a", "3", "--train-b", "3", "--val", "2",
                 "--test", "2", "--seed", "1", "--image-size", "48"]) == 0
    return root


@pytest.fixture(scope="module")
def run(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "r"
    cfg = out.parent / "c.cfg"
    cfg.write_text("steps = 3\nseed = 2\n")
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(out), *TINY]) == 0
    return out


def test_dataset_command(data):
    manifest = json.loads((data / "manifest.json").read_text())
    assert sum(r["role"] in ("train_a", "train_b") for r in manifest) == 6
    record = json.loads((data / "run_manifest.json").read_text())
    assert record["command"] == "dataset" and record["seed"] == 1 and record["dataset_manifest_hash"]


def test_dataset_default_counts(tmp_path):
    out = tmp_path / "d"
    assert main(["dataset", "--out", str(out), "--train-a", "70", "--train-b", "70", "--val", "1", "--test", "1",
                 "--seed", "1", "--image-size", "32"]) == 0
    assert len(list((out / "train_a").glob("*.png"))) + len(list((out / "train_b").glob("*.png"))) == 140


def test_dataset_rerun_is_byte_identical(data, tmp_path):
    again = tmp_path / "d"
    main(["dataset", "--out", str(again), "--train-a", "3", "--train-b", "3", "--val", "2",
          "--test", "2", "--seed", "1", "--image-size", "48"])
    for path in data.rglob("*.png"):
        assert path.read_bytes() == (again / path.relative_to(data)).read_bytes()
    assert (data / "manifest.json").read_bytes() == (again / "manifest.json").read_bytes()


def test_missing_required_flag(capsys):
    assert main(["dataset"]) == 2
    assert "--out" in capsys.readouterr().err


def test_bad_phantom_flag(tmp_path, capsys):
    assert main(["dataset", "--out", str(tmp_path / "x"), "--noise-sigma", "-1"]) == 2
    assert "noise_sigma" in capsys.readouterr().err


def test_train_outputs(run):
    assert (run / "final.ckpt").exists() and (run / "loss_log.jsonl").exists()
    assert len((run / "loss_log.jsonl").read_text().splitlines()) == 3
    record = json.loads((run / "run_manifest.json").read_text())
    assert record["command"] == "train" and record["seed"] == 2 and record["config_hash"]
    assert "K = 2" in (run / "config.cfg").read_text()


def test_train_invalid_config_lists_fields(data, tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("K = 0\nlearning_rate_gen = 5\n")
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "K" in err and "learning_rate_gen" in err


def test_train_missing_config_file(data, tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 2


def test_flags_override_config_file(data, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("steps = 5\nseed = 3\n")
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--steps", "1", "--data", str(data), "--out", str(out), *TINY]) == 0
    assert len((out / "loss_log.jsonl").read_text().splitlines()) == 1


def test_translate(run, data, tmp_path):
    src = tmp_path / "x.png"
    write_image(read_image(data / "test" / "0000_a.png"), src)
    assert main(["translate", "--ckpt", str(run / "final.ckpt"), "--input", str(src), "--dir", "1to2"]) == 0
    out = tmp_path / "x_1to2.png"
    assert read_image(out).shape == (48, 48)
    assert (tmp_path / "x_1to2.png.run.json").exists()
    first = out.read_bytes()
    main(["translate", "--ckpt", str(run / "final.ckpt"), "--input", str(src), "--dir", "1to2"])
    assert out.read_bytes() == first


def test_translate_runtime_failure(run, tmp_path, capsys):
    assert main(["translate", "--ckpt", str(run / "final.ckpt"), "--input", str(tmp_path / "missing.png")]) == 1
    assert "translate" in capsys.readouterr().err


def test_eval_on_split_dir(run, data, tmp_path):
    out = tmp_path / "m.json"
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(data / "test"), "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    assert metrics["split"] == "test" and len(metrics["images"]) == 2
    assert {"mean", "std"} == set(metrics["aggregate"]["dice"])


def test_eval_bad_data_dir(run, tmp_path):
    assert main(["eval", "--ckpt", str(run / "final.ckpt"), "--data", str(tmp_path)]) == 2


def test_select_k(data, tmp_path, capsys):
    out = tmp_path / "sk"
    assert main(["select-k", "--data", str(data), "--grid", "1,2", "--steps", "4", "--budget", "0.5",
                 "--out", str(out), *TINY]) == 0
    printed = capsys.readouterr().out
    assert "best K" in printed
    table = json.loads((out / "select_k.json").read_text())
    assert [row["K"] for row in table["table"]] == [1, 2]
    assert (out / "run_manifest.json").exists()


def test_select_k_bad_grid(data, tmp_path):
    assert main(["select-k", "--data", str(data), "--grid", "1,x", "--out", str(tmp_path)]) == 2


def test_dump_latent(run, data, tmp_path):
    out = tmp_path / "z.csv"
    assert main(["dump-latent", "--ckpt", str(run / "final.ckpt"), "--data", str(data), "--n", "12",
                 "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("image_id,row,col,component,entropy,has_plaque") and len(lines) == 13


def test_threads_flag_and_env(monkeypatch, data, tmp_path):
    import torch
    monkeypatch.setenv("GMMTRANS_THREADS", "1")
    assert main(["dump-latent", "--ckpt", "nope", "--data", str(data), "--out", str(tmp_path / "z")]) == 1
    assert torch.get_num_threads() == 1
