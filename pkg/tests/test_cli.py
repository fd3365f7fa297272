import json
import os
from pathlib import Path

import numpy as np
import pytest

from pclink.cli import main
from pclink.metrics import read_metrics_csv
from pclink.pcdata import load_point_cloud

RUN_CFG = """
# desk-scale run configuration
n_points = 128
range_m = 15.0
n_stages = 2
downsample_factor = 4
bottleneck_dim = 4
k_neighbors = 8
k_max = 4
hidden_dims = 12,16
up_hidden_dims = 12,12
crop_limit = 20.0
epochs = 1
seed = 0
snr_db = 5.0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text(RUN_CFG)
    data = root / "data"
    rc = main(["synth", "--config", str(cfg), "--pairs", "3", "--out", str(data)])
    assert rc == 0
    return root


def cfg_path(workdir) -> str:
    return str(workdir / "run.cfg")


def test_synth_outputs(workdir):
    data = workdir / "data"
    plys = sorted(p.name for p in data.glob("*.ply"))
    assert len(plys) == 6  # tx and rx per pair
    index = (data / "index.txt").read_text().strip().splitlines()
    assert len(index) == 3
    for line in index:
        for f in line.split("\t")[1:]:
            assert (data / f).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 0


def test_synth_rerun_identical_data(workdir, tmp_path):
    out2 = tmp_path / "data2"
    rc = main(["synth", "--config", cfg_path(workdir), "--pairs", "3", "--out", str(out2)])
    assert rc == 0
    for name in sorted(p.name for p in (workdir / "data").glob("*.ply")):
        assert (out2 / name).read_bytes() == (workdir / "data" / name).read_bytes()
    assert (out2 / "index.txt").read_text() == (workdir / "data" / "index.txt").read_text()


def test_refuses_nonempty_out_without_force(workdir):
    rc = main(["synth", "--config", cfg_path(workdir), "--pairs", "1",
               "--out", str(workdir / "data")])
    assert rc == 2


def test_manifest_hash_tracks_config(workdir, tmp_path):
    cfg2 = tmp_path / "run2.cfg"
    cfg2.write_text(RUN_CFG.replace("snr_db = 5.0", "snr_db = 7.0"))
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(["synth", "--config", cfg_path(workdir), "--pairs", "1", "--out", str(out_a)]) == 0
    assert main(["synth", "--config", str(cfg2), "--pairs", "1", "--out", str(out_b)]) == 0
    ha = json.loads((out_a / "manifest.json").read_text())["config_hash"]
    hb = json.loads((out_b / "manifest.json").read_text())["config_hash"]
    h_same = json.loads((workdir / "data" / "manifest.json").read_text())["config_hash"]
    assert ha != hb
    assert ha == h_same


@pytest.fixture(scope="module")
def trained(workdir):
    out = workdir / "train"
    rc = main(["train", "--config", cfg_path(workdir), "--data", str(workdir / "data"),
               "--out", str(out)])
    assert rc == 0
    return out


def test_train_outputs(trained):
    log = (trained / "train_log.csv").read_text().strip().splitlines()
    assert log[0] == "epoch,mean_loss,lr"
    assert len(log) == 2  # header + 1 epoch
    assert (trained / "checkpoint.pclk").exists()


def test_finetune_and_eval(workdir, trained):
    fine = workdir / "fine"
    rc = main(["finetune", "--config", cfg_path(workdir), "--data", str(workdir / "data"),
               "--init", str(trained / "checkpoint.pclk"), "--out", str(fine)])
    assert rc == 0
    out = workdir / "eval"
    rc = main(["eval", "--config", cfg_path(workdir), "--checkpoint", str(fine / "checkpoint.pclk"),
               "--data", str(workdir / "data"), "--snrs", "0,10", "--out", str(out)])
    assert rc == 0
    records = read_metrics_csv(out / "metrics.csv")
    assert len(records) == 6  # 3 frames x 2 SNRs
    summary = json.loads((out / "summary.json").read_text())
    for snr in ("0.0", "10.0"):
        assert "mean_cd" in summary["per_snr"][snr]
        assert "median_cd" in summary["per_snr"][snr]
    for plot in ("cd_vs_snr.png", "d1_psnr_vs_snr.png", "d2_psnr_vs_snr.png"):
        assert (out / plot).exists()


def test_baseline_rate_validation(workdir):
    rc = main(["baseline", "--data", str(workdir / "data"), "--rate", "2/3",
               "--out", str(workdir / "bl_bad")])
    assert rc == 2


def test_baseline_schema_matches_eval(workdir):
    out = workdir / "bl"
    rc = main(["baseline", "--config", cfg_path(workdir), "--data", str(workdir / "data"),
               "--depth", "6", "--rate", "1/2", "--snrs", "12", "--channel", "awgn",
               "--out", str(out)])
    assert rc == 0
    records = read_metrics_csv(out / "metrics.csv")  # same schema as eval
    assert len(records) == 3
    summary = json.loads((out / "summary.json").read_text())
    assert "n_failed" in summary["per_snr"]["12.0"]


def test_transmit_outputs_and_determinism(workdir, trained, tmp_path):
    data = workdir / "data"
    tx = next(iter(sorted(data.glob("*_tx.ply"))))
    rx = next(iter(sorted(data.glob("*_rx.ply"))))
    out1, out2 = tmp_path / "t1", tmp_path / "t2"
    for out in (out1, out2):
        rc = main(["transmit", "--config", cfg_path(workdir),
                   "--checkpoint", str(trained / "checkpoint.pclk"),
                   "--tx", str(tx), "--rx", str(rx), "--snr", "5", "--seed", "3",
                   "--out", str(out)])
        assert rc == 0
    rec1 = (out1 / "reconstruction.ply").read_bytes()
    rec2 = (out2 / "reconstruction.ply").read_bytes()
    assert rec1 == rec2  # same seed -> identical reconstruction
    assert b"property float nn_error" in rec1
    assert load_point_cloud(out1 / "reconstruction.ply", "ply_binary_le").n >= 1


def test_transmit_perfect_link_matches_codec_roundtrip(workdir, trained, tmp_path):
    import torch
    from pclink.trainer import load_model, prepare_frames, run_pipeline

    data = workdir / "data"
    tx = next(iter(sorted(data.glob("*_tx.ply"))))
    rx = next(iter(sorted(data.glob("*_rx.ply"))))
    out = tmp_path / "perfect"
    rc = main(["transmit", "--config", cfg_path(workdir),
               "--checkpoint", str(trained / "checkpoint.pclk"),
               "--tx", str(tx), "--rx", str(rx), "--snr", "inf", "--perfect-link",
               "--out", str(out)])
    assert rc == 0
    model, _ = load_model(str(trained / "checkpoint.pclk"))
    from pclink.pcdata import PointCloud, ScenePair

    cloud = load_point_cloud(tx, "ply_binary_le")
    rx_cloud = load_point_cloud(rx, "ply_binary_le")
    pair = ScenePair(tx=cloud, rx=rx_cloud, tx_to_rx=np.eye(4), separation=0.0)
    frames = prepare_frames([pair], model.codec_cfg, need_rx=False)
    with torch.no_grad():
        recon, _, _ = run_pipeline(model, frames[0], float("inf"), None, None, transmit=False)
    written = load_point_cloud(out / "reconstruction.ply", "ply_binary_le")
    assert np.array_equal(written.points, recon.numpy().astype(np.float32))


def test_plot_regenerates_bitwise(workdir, tmp_path):
    src_csv = workdir / "eval" / "metrics.csv"
    p1, p2 = tmp_path / "p1", tmp_path / "p2"
    for p in (p1, p2):
        rc = main(["plot", "--csv", str(src_csv), "--out", str(p)])
        assert rc == 0
    for name in ("cd_vs_snr.png", "d1_psnr_vs_snr.png", "d2_psnr_vs_snr.png"):
        assert (p1 / name).read_bytes() == (p2 / name).read_bytes()


def test_bad_arguments_exit_2():
    assert main(["eval", "--data", "nowhere"]) == 2  # missing --checkpoint
    assert main(["nonsense"]) == 2


def test_missing_dataset_exit_2(tmp_path, workdir, trained):
    rc = main(["eval", "--config", cfg_path(workdir), "--checkpoint",
               str(trained / "checkpoint.pclk"), "--data", str(tmp_path / "missing"),
               "--out", str(tmp_path / "o")])
    assert rc == 2
