import json
import os
import subprocess
import sys

import numpy as np
import pytest

from versediff.cli import EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, run
from versediff.io import fingerprint, read_png, write_png

TINY = ["--set", "diffusion.T=5", "--set", "model.levels=2", "--set", "model.base_channels=8",
        "--set", "model.time_embed_dim=16", "--set", "train.checkpoint_interval=0"]


def synth(out, count=6, seed=3):
    return run(["synth", "--out", str(out), "--count", str(count), "--seed", str(seed),
                "--height", "32", "--width", "16", "--vertebrae", "3"])


def test_unknown_subcommand_and_flag_are_usage_errors(capsys):
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["synth", "--no-such-flag"]) == EXIT_USAGE
    assert run([]) == EXIT_USAGE
    assert "error[usage]" in capsys.readouterr().err


def test_synth_is_reproducible(tmp_path):
    assert synth(tmp_path / "a") == EXIT_OK
    assert synth(tmp_path / "b") == EXIT_OK
    assert fingerprint(tmp_path / "a") == fingerprint(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["parameters"]["count"] == 6 and len(manifest["ids"]) == 6
    run_man = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert run_man["exit_status"] == 0 and run_man["seeds"] == {"synth": 3}
    assert run_man["dataset_fingerprint"] == fingerprint(tmp_path / "a")
    assert synth(tmp_path / "c", seed=4) == EXIT_OK
    assert fingerprint(tmp_path / "c") != fingerprint(tmp_path / "a")


def test_eval_of_identical_directories_is_perfect(tmp_path):
    rng = np.random.default_rng(0)
    for d in ("gt", "pred"):
        (tmp_path / d).mkdir()
    for i in range(3):
        m = (rng.random((10, 12)) > 0.5).astype(np.uint8) * 255
        write_png(tmp_path / "gt" / f"s{i}.png", m)
        write_png(tmp_path / "pred" / f"s{i}.png", m)
    write_png(tmp_path / "gt" / "empty.png", np.zeros((4, 4), np.uint8))
    write_png(tmp_path / "pred" / "empty.png", np.zeros((4, 4), np.uint8))
    rep = tmp_path / "report.json"
    code = run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--report", str(rep)])
    assert code == EXIT_OK
    report = json.loads(rep.read_text())
    assert report["mean_dice"] == 1.0 and report["mean_iou"] == 1.0 and len(report["per_subject"]) == 4
    assert (tmp_path / "report.manifest.json").is_file()


def test_error_categories_have_distinct_codes(tmp_path, capsys):
    assert run(["train", "--out", str(tmp_path / "o")]) == EXIT_MISSING
    assert run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == EXIT_MISSING
    assert run(["synth", "--out", str(tmp_path / "s"), "--set", "diffusion.T=-1"]) == EXIT_CONFIG
    assert run(["synth", "--out", str(tmp_path / "s"), "--set", "bogus.key=1"]) == EXIT_CONFIG
    assert run(["synth", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "s")]) == EXIT_MISSING
    (tmp_path / "gt").mkdir()
    (tmp_path / "pred").mkdir()
    write_png(tmp_path / "gt" / "a.png", np.zeros((4, 4), np.uint8))
    write_png(tmp_path / "pred" / "a.png", np.zeros((5, 4), np.uint8))
    args = ["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt"), "--report", str(tmp_path / "r.json")]
    assert run(args) == EXIT_DATA
    (tmp_path / "pred" / "a.png").unlink()
    assert run(args) == EXIT_MISSING
    err = capsys.readouterr().err.strip().splitlines()
    assert all(line.startswith("versediff: error[") for line in err)
    assert len({EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME}) == 6


def test_print_config_reflects_precedence(tmp_path, capsys):
    ini = tmp_path / "c.ini"
    ini.write_text("[train]\nepochs = 7\nbatch_size = 3\nseed = 1\n")
    code = run(["train", "--config", str(ini), "--set", "train.batch_size=5", "--set", "train.seed=2",
                "--seed", "9", "--print-config"])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "epochs = 7" in text and "batch_size = 5" in text and "seed = 9" in text


def test_train_sample_eval_round_trip(tmp_path):
    data, run_dir, preds = tmp_path / "data", tmp_path / "run", tmp_path / "preds"
    assert synth(data) == EXIT_OK
    assert run(["train", "--data", str(data), "--out", str(run_dir), "--epochs", "1", "--batch-size", "2", *TINY]) == 0
    split = json.loads((run_dir / "split.json").read_text())
    assert len(split["train"]) == 4 and len(split["test"]) == 2
    assert (run_dir / "checkpoint" / "weights.bin").is_file() and (run_dir / "config.ini").is_file()
    man = json.loads((run_dir / "run_manifest.json").read_text())
    assert man["artifacts"]["loss_stats"]["steps"] == 2

    code = run(["sample", "--checkpoint", str(run_dir / "checkpoint"), "--data", str(data),
                "--split", str(run_dir / "split.json"), "--out", str(preds), "--n", "3"])
    assert code == EXIT_OK
    assert sorted(p.name for p in preds.iterdir() if p.is_dir()) == sorted(split["test"])
    one = preds / split["test"][0]
    assert {"mask_fused.png", "mask_0.png", "mask_2.png", "variance.png", "variance.json"} <= {
        p.name for p in one.iterdir()}
    assert read_png(one / "mask_fused.png").shape == (32, 16)

    for score in ("fused", "best", "average"):
        rep = tmp_path / f"{score}.json"
        code = run(["eval", "--pred", str(preds), "--gt", str(data), "--split", str(run_dir / "split.json"),
                    "--report", str(rep), "--score", score])
        assert code == EXIT_OK
        report = json.loads(rep.read_text())
        assert report["score"] == score and len(report["per_subject"]) == 2
        assert 0.0 <= report["mean_dice"] <= 1.0

    single = tmp_path / "single"
    img = data / "images" / f"{split['test'][0]}.png"
    assert run(["sample", "--checkpoint", str(run_dir / "checkpoint"), "--image", str(img),
                "--out", str(single), "--n", "2"]) == EXIT_OK
    assert (single / "mask_1.png").is_file()


def test_console_entry_point(tmp_path):
    env = {**os.environ, "VERSEDIFF_THREADS": "1"}
    proc = subprocess.run([sys.executable, "-m", "versediff.cli", "synth", "--out", str(tmp_path / "d"),
                           "--count", "2", "--height", "32", "--width", "16", "--vertebrae", "3"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    bad = subprocess.run([sys.executable, "-m", "versediff.cli", "nope"], capture_output=True, text=True, env=env)
    assert bad.returncode == 2
