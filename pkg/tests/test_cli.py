import json
import subprocess
import sys

import pytest

from mimlab.archive import read_archive
from mimlab.cli import main
from mimlab.harness import DatasetSpec, read_rows
from mimlab.teacher import TargetCache, pseudo_vit
from mimlab.train import TrainConfig, pretrain

CONFIG = {
    "train": {"epochs": 2, "batch_size": 16, "lr_peak": 1e-3, "image_size": 8, "gamma": 0.5},
    "probe": {"epochs": 2},
    "finetune": {"epochs": 1, "batch_size": 16},
    "dataset": {"n": 32, "image_size": 8},
    "sweep": {
        "gammas": [0.25, 0.5],
        "seeds": [0],
        "epochs": 1,
        "train": {"batch_size": 16, "image_size": 8},
        "probe": {"epochs": 1},
        "dataset": {"n": 32, "image_size": 8},
    },
}


@pytest.fixture()
def config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(CONFIG))
    return str(path)


def test_pretrain_probe_finetune(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", config, "--seed", "3", "--out-dir", str(out)]) == 0
    assert "final loss" in capsys.readouterr().out
    ckpt = out / "checkpoint-epoch002.caet"
    assert ckpt.exists() and (out / "metrics.csv").exists()
    meta = json.loads(ckpt.with_suffix(".json").read_text())
    assert meta["config"]["seed"] == 3

    assert main(["probe", "--config", config, "--checkpoint", str(ckpt), "--out-dir", str(out)]) == 0
    probe = json.loads((out / "probe.json").read_text())
    assert 0.0 <= probe["top1"] <= 1.0
    assert main(["finetune", "--config", config, "--checkpoint", str(ckpt), "--out-dir", str(out)]) == 0
    assert 0.0 <= json.loads((out / "finetune.json").read_text())["top1"] <= 1.0


def test_pretrain_resume_and_epochs_flag(tmp_path, config):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", config, "--epochs", "1", "--out-dir", str(out)]) == 0
    assert len(read_rows(out / "metrics.csv")) == 1


def test_export_targets_then_pretrain_with_them(tmp_path, config):
    targets = tmp_path / "t.caet"
    assert main(["export-targets", "--config", config, "--dataset", "synthetic:32", "--teacher", "pseudo_vit", "--seed", "0", "--out", str(targets)]) == 0
    arch = read_archive(targets)
    assert len(arch.tensors) == 32 and arch.metadata["grid"] == [2, 2, 4]

    conf = json.loads(open(config).read())
    conf["train"]["augment_per_epoch"] = False
    cached = tmp_path / "cached.json"
    cached.write_text(json.dumps(conf))
    args = ["pretrain", "--config", str(cached), "--seed", "0"]
    assert main([*args, "--targets", str(targets), "--out-dir", str(tmp_path / "a")]) == 0
    assert main([*args, "--out-dir", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    # every lookup made by the training loop is served by the exported archive
    cache = TargetCache.load(targets)
    cfg = TrainConfig.from_dict({**conf["train"], "seed": 0})
    pretrain(cfg, DatasetSpec(**conf["dataset"]).build(), pseudo_vit("micro", 4, 1234), cache=cache)
    assert cache.misses == 0 and cache.hits == 64


def test_export_targets_from_saved_teacher(tmp_path, config):
    path = pseudo_vit("micro", 4, 7).save(tmp_path / "teacher.caet")
    out = tmp_path / "t.caet"
    assert main(["export-targets", "--config", config, "--dataset", "synthetic:8", "--teacher", str(path), "--out", str(out)]) == 0
    assert len(read_archive(out).tensors) == 8


def test_sweep_subcommand(tmp_path, config, capsys):
    assert main(["sweep", "--config", config, "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "sweep.csv")
    assert len(rows) == 2
    assert main(["sweep", "--config", config, "--out-dir", str(tmp_path)]) == 0
    assert "0 new rows" in capsys.readouterr().out.splitlines()[-1]


def test_mask_dump(capsys):
    assert main(["mask-dump", "--grid", "6", "--gamma", "0.5", "--sampler", "random", "--count", "2", "--seed", "1"]) == 0
    blocks = capsys.readouterr().out.strip().split("\n\n")
    assert len(blocks) == 2
    for block in blocks:
        lines = block.splitlines()
        assert len(lines) == 6 and all(len(line) == 6 for line in lines)
        assert block.count("#") == 18


def test_gradcheck_subcommand(capsys):
    assert main(["gradcheck", "--probes", "3"]) == 0
    assert "PASS" in capsys.readouterr().out.splitlines()[-1]


def test_unknown_config_field_is_rejected(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epoch": 2}}))
    with pytest.raises(ValueError):
        main(["pretrain", "--config", str(bad), "--out-dir", str(tmp_path)])


def test_console_entry_point_help():
    done = subprocess.run([sys.executable, "-m", "mimlab.cli", "--help"], capture_output=True, text=True)
    assert done.returncode == 0
    for name in ("pretrain", "probe", "finetune", "sweep", "export-targets", "mask-dump", "gradcheck"):
        assert name in done.stdout
