"""End-to-end command-line interface tests."""

import json
import os

import numpy as np
import pytest

from defield.cli import main


def test_unknown_flag_exits_1(capsys):
    assert main(["train", "--data", "x", "--out", "y", "--frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_subcommand_exits_1():
    assert main([]) == 1


def test_unknown_scene_exits_2(tmp_path, capsys):
    code = main(["gen-synthetic", "--scene", "nope", "--out", str(tmp_path)])
    assert code == 2
    assert "unknown scene" in capsys.readouterr().err


def test_missing_dataset_exits_2(tmp_path):
    code = main([
        "train", "--data", str(tmp_path / "absent"), "--out",
        str(tmp_path / "run"), "--iters", "1",
    ])
    assert code == 2


@pytest.mark.slow
def test_full_pipeline(tmp_path, capsys):
    data = str(tmp_path / "data")
    run = str(tmp_path / "run")
    pred = str(tmp_path / "pred")
    report = str(tmp_path / "report.json")

    assert main([
        "gen-synthetic", "--scene", "blob-orbit", "--out", data,
        "--frames", "12", "--cameras", "2", "--size", "24",
        "--render-samples", "64", "--n-sparse", "6", "--dense-stride", "6",
        "--offset", "5",
    ]) == 0
    assert os.path.exists(os.path.join(data, "rig.json"))

    # regenerate priors with outliers; files must be rewritten
    assert main([
        "gen-priors", "--data", data, "--noise", "0.3", "--noise-px", "4",
        "--offset", "5", "--n-sparse", "6", "--dense-stride", "6",
    ]) == 0

    train_cfg = {
        "iterations": 4,
        "batch_rays": 48,
        "n_samples": 12,
        "warmup_steps": 2,
        "prior_offset": 5,
        "model": {
            "motion_levels": [8], "motion_time_levels": [4],
            "canonical_levels": [12], "motion_feature_dim": 4,
            "canonical_feature_dim": 6, "motion_mlp_width": 16,
            "color_mlp_width": 16, "dtype": "float32",
        },
    }
    cfg_path = str(tmp_path / "train.json")
    with open(cfg_path, "w") as f:
        json.dump(train_cfg, f)
    assert main([
        "train", "--data", data, "--config", cfg_path, "--out", run,
        "--train-cameras", "1,2",
    ]) == 0
    assert os.path.exists(os.path.join(run, "ckpt_4.bin"))
    assert os.path.exists(os.path.join(run, "config.json"))
    assert os.path.exists(os.path.join(run, "loss_log.csv"))

    assert main([
        "render", "--ckpt", os.path.join(run, "ckpt_4.bin"),
        "--camera", os.path.join(data, "rig.json"),
        "--frames", "1..2", "--out", pred, "--samples", "16",
    ]) == 0
    assert os.path.exists(os.path.join(pred, "cam_1", "frame_1.png"))
    assert os.path.exists(os.path.join(pred, "depth", "cam_2", "frame_2.f32"))

    assert main([
        "evaluate", "--pred", pred, "--gt", data, "--out", report,
    ]) == 0
    rep = json.loads(open(report).read())
    assert {"psnr", "ssim", "depth_mae", "n_frames"} <= set(rep)
    assert rep["n_frames"] == 4
    frames_csv = str(tmp_path / "report_frames.csv")
    assert os.path.exists(frames_csv)


@pytest.mark.slow
def test_ablation_flags_recorded(tmp_path, tiny_dataset):
    run = str(tmp_path / "ablate")
    cfg_path = str(tmp_path / "t.json")
    with open(cfg_path, "w") as f:
        json.dump({
            "iterations": 2, "batch_rays": 24, "n_samples": 8,
            "model": {
                "motion_levels": [8], "motion_time_levels": [4],
                "canonical_levels": [12], "motion_feature_dim": 4,
                "canonical_feature_dim": 6, "motion_mlp_width": 16,
                "color_mlp_width": 16, "dtype": "float32",
            },
        }, f)
    assert main([
        "train", "--data", tiny_dataset, "--config", cfg_path,
        "--out", run, "--no-sf", "--no-df", "--sd",
    ]) == 0
    resolved = json.loads(open(os.path.join(run, "config.json")).read())
    assert resolved["lambda_sf"] == 0.0
    assert resolved["lambda_df"] == 0.0
    assert resolved["lambda_sd"] == 1.0
    log = open(os.path.join(run, "loss_log.csv")).read().splitlines()
    assert all(line.split(",")[2] == "0" for line in log[1:])
