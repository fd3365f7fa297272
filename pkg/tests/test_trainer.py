import math

import numpy as np
import pytest
import torch

import pclink.link as linkmod
from pclink.featurecodec import CodecConfig
from pclink.link import LinkConfig
from pclink.metrics import LossWeights
from pclink.pcdata import SceneParams, synth_scene
from pclink import trainer
from pclink.trainer import (
    TrainConfig,
    TrainError,
    TrainingDiverged,
    TransmissionModel,
    cardinality_targets,
    evaluate,
    finetune,
    load_model,
    lr_at,
    prepare_frames,
    pretrain,
    run_pipeline,
    save_model,
)

TINY = CodecConfig(
    n_stages=2,
    downsample_factor=4,
    bottleneck_dim=4,
    k_neighbors=8,
    k_max=4,
    hidden_dims=(12, 16),
    up_hidden_dims=(12, 12),
    crop_limit=20.0,
)


@pytest.fixture(scope="module")
def tiny_pairs():
    return [synth_scene(s, SceneParams(n_points=128, range_m=15.0)) for s in range(3)]


def pre_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("seed", 0)
    return TrainConfig.pretrain_defaults(**kw)


def fine_cfg(**kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("seed", 0)
    kw.setdefault("snr_db", 5.0)
    return TrainConfig.finetune_defaults(**kw)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

def test_train_config_defaults():
    p = TrainConfig.pretrain_defaults()
    assert (p.epochs, p.step_size, p.gamma, p.learning_rate) == (80, 15, 0.5, 1e-3)
    f = TrainConfig.finetune_defaults()
    assert (f.epochs, f.step_size, f.gamma) == (20, 4, 0.8)


def test_batch_size_must_be_one():
    with pytest.raises(TrainError):
        TrainConfig(batch_size=2)


def test_lr_schedule_exact():
    cfg = TrainConfig(learning_rate=1e-3, step_size=15, gamma=0.5)
    for epoch in range(50):
        assert lr_at(cfg, epoch) == 1e-3 * 0.5 ** (epoch // 15)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

def test_pretrain_never_touches_link(tiny_pairs, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("ste_transmit invoked during stage-1 training")

    monkeypatch.setattr(linkmod, "ste_transmit", boom)
    result = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    assert len(result.stats) == 1


def test_pretrain_loss_trace_deterministic(tiny_pairs):
    a = pretrain(tiny_pairs, TINY, pre_cfg(seed=7))
    b = pretrain(tiny_pairs, TINY, pre_cfg(seed=7))
    assert [s.mean_loss for s in a.stats] == [s.mean_loss for s in b.stats]
    assert [s.mean_cd for s in a.stats] == [s.mean_cd for s in b.stats]


def test_pretrain_uses_adaptive_optimizer_and_schedule(tiny_pairs):
    result = pretrain(tiny_pairs, TINY, pre_cfg(epochs=2, step_size=1, gamma=0.5, learning_rate=1e-3))
    assert result.stats[0].lr == 1e-3
    assert result.stats[1].lr == 5e-4


def test_pretrain_nan_abort(tiny_pairs, monkeypatch):
    def bad_loss(*a, **k):
        return torch.tensor(float("nan"), requires_grad=True), {"chamfer": float("nan")}

    monkeypatch.setattr(trainer, "frame_loss", bad_loss)
    with pytest.raises(TrainingDiverged) as err:
        pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    assert err.value.epoch == 0
    assert err.value.lr == 1e-3
    assert err.value.frame_id


def test_pretrain_requires_stage(tiny_pairs):
    with pytest.raises(TrainError):
        pretrain(tiny_pairs, TINY, fine_cfg())


# ---------------------------------------------------------------------------
# Finetuning and the full pipeline
# ---------------------------------------------------------------------------

def test_finetune_full_pipeline_runs(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    fin = finetune(pre.model, tiny_pairs, fine_cfg(epochs=2), link_cfg=LinkConfig(snr_db=5.0))
    assert len(fin.stats) == 2
    assert all(math.isfinite(s.mean_loss) for s in fin.stats)
    assert fin.model.channel_enc is not None and fin.model.fusion is not None


def test_finetune_freeze_codec(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    before = [p.clone() for p in pre.model.feature_enc.parameters()]
    fin = finetune(pre.model, tiny_pairs, fine_cfg(epochs=1, freeze_codec=True))
    after = list(fin.model.feature_enc.parameters())
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_finetune_ablated_variants_run(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    no_chan = finetune(pre.model, tiny_pairs, fine_cfg(epochs=1, use_channel_codec=False))
    assert no_chan.model.channel_enc is None
    no_fus = finetune(pre.model, tiny_pairs, fine_cfg(epochs=1, use_fusion=False))
    assert no_fus.model.fusion is None


def test_finetune_uniform_snr_mode(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    fin = finetune(
        pre.model, tiny_pairs,
        fine_cfg(epochs=1, snr_mode="uniform", snr_lo=-5.0, snr_hi=15.0),
    )
    assert math.isfinite(fin.stats[0].mean_loss)


def test_zero_init_residuals_preserve_pretrained_behavior(tiny_pairs):
    # safe start: before any stage-2 update, disabling the link makes the full
    # model reproduce the pretrained reconstruction exactly
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    torch.manual_seed(123)
    full = TransmissionModel(TINY, use_channel_codec=True, use_fusion=True, activation="none")
    full.feature_enc.load_state_dict(pre.model.feature_enc.state_dict())
    full.feature_dec.load_state_dict(pre.model.feature_dec.state_dict())
    frames = prepare_frames(tiny_pairs[:1], TINY, need_rx=True)
    with torch.no_grad():
        recon_pre, _, _ = run_pipeline(pre.model, frames[0], 10.0, None, None, transmit=False)
        recon_full, _, _ = run_pipeline(full, frames[0], 10.0, None, None, transmit=True)
    assert torch.equal(recon_pre, recon_full)


# ---------------------------------------------------------------------------
# Cardinality alignment
# ---------------------------------------------------------------------------

def test_cardinality_targets_alignment(tiny_pairs):
    torch.manual_seed(3)
    model = TransmissionModel(TINY, use_channel_codec=False, use_fusion=False)
    frames = prepare_frames(tiny_pairs[:1], TINY, need_rx=False)
    recon, stages, _ = run_pipeline(model, frames[0], 0.0, None, None, transmit=False)
    grounds, preds = cardinality_targets(frames[0].tx_geo, stages)
    assert len(grounds) == len(preds) == TINY.n_stages
    # stage 0 targets are the per-latent-parent child counts (sum = level size)
    assert grounds[0].sum() == 128 // TINY.downsample_factor
    assert grounds[0].shape[0] == stages[0].expected_counts.shape[0]
    assert grounds[1].shape[0] == stages[1].expected_counts.shape[0]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def test_evaluate_row_count_and_determinism(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    rep1 = evaluate(pre.model, tiny_pairs, [0.0, 5.0], channel="awgn", seed=11)
    rep2 = evaluate(pre.model, tiny_pairs, [0.0, 5.0], channel="awgn", seed=11)
    assert len(rep1.records) == len(tiny_pairs) * 2
    assert [r.cd for r in rep1.records] == [r.cd for r in rep2.records]
    assert {r.snr_db for r in rep1.records} == {0.0, 5.0}


def test_evaluate_bpp_matches_config(tiny_pairs):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    rep = evaluate(pre.model, tiny_pairs, [10.0], seed=0)
    n_latent = 128 // TINY.downsample_factor**2
    assert rep.records[0].bpp == n_latent * TINY.bottleneck_dim * 8 / 128


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_bitwise_metrics(tiny_pairs, tmp_path):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    fin = finetune(pre.model, tiny_pairs, fine_cfg(epochs=1))
    path = tmp_path / "model.pclk"
    save_model(str(path), fin.model, fin.train_cfg, epoch=1)
    loaded, meta = load_model(str(path))
    assert meta["epoch"] == 1
    rep_orig = evaluate(fin.model, tiny_pairs, [3.0], seed=5)
    rep_load = evaluate(loaded, tiny_pairs, [3.0], seed=5)
    assert [r.cd for r in rep_orig.records] == [r.cd for r in rep_load.records]
    assert [r.d1_psnr for r in rep_orig.records] == [r.d1_psnr for r in rep_load.records]


def test_checkpoint_namespaces(tiny_pairs, tmp_path):
    from pclink.checkpoint import load_arrays

    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1))
    fin = finetune(pre.model, tiny_pairs, fine_cfg(epochs=1))
    path = tmp_path / "m.pclk"
    save_model(str(path), fin.model)
    arrays, meta = load_arrays(str(path))
    names = set(arrays)
    for prefix in ("param.feature_enc.", "param.feature_dec.", "param.channel_enc.",
                   "param.channel_dec.", "param.fusion."):
        assert any(n.startswith(prefix) for n in names), prefix
    assert "rng.torch" in names
    assert meta["flags"]["use_fusion"] is True


def test_model_flags_roundtrip(tiny_pairs, tmp_path):
    pre = pretrain(tiny_pairs, TINY, pre_cfg(epochs=1, activation="hardtanh"))
    path = tmp_path / "s1.pclk"
    save_model(str(path), pre.model)
    loaded, meta = load_model(str(path))
    assert loaded.channel_enc is None and loaded.fusion is None
    assert loaded.activation == "hardtanh"
    assert loaded.codec_cfg == pre.model.codec_cfg
