"""Two-stage optimization and evaluation of the transmission pipeline.

Stage 1 pretrains the feature codec alone, noise-free. Stage 2 finetunes the
full pipeline (feature encoder -> channel encoder -> digital link via the
straight-through estimator -> channel decoder -> fusion -> feature decoder)
end to end at a fixed or per-frame-uniform SNR, initialized from stage 1.

Batch size is 1 by contract: the decoder's adaptive child counts make frames
ragged. All randomness flows through explicit seeds, so a fixed seed gives a
bitwise-identical loss trace on one machine.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import link as linkmod
from .channelcodec import ACTIVATIONS, make_channel_decoder, make_channel_encoder, nonlinear_activation
from .checkpoint import load_arrays, save_arrays
from .featurecodec import (
    CodecConfig,
    EncoderGeometry,
    FeatureDecoder,
    FeatureEncoder,
    build_encoder_geometry,
)
from .fusion import FeatureFusion
from .metrics import (
    LossWeights,
    MetricRecord,
    bpp,
    chamfer,
    d1_psnr,
    d2_psnr,
    density_target_stats,
    summarize_records,
    total_loss,
)
from .pcdata import PointCloud, ScenePair, estimate_normals, tree_knn

SNR_MODES = ("fixed", "uniform")
STAGES = ("pretrain", "finetune")


class TrainError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries where it happened."""

    def __init__(self, epoch: int, lr: float, frame_id: str):
        super().__init__(
            f"non-finite loss at epoch {epoch}, lr {lr:.3e}, frame {frame_id!r}"
        )
        self.epoch = epoch
        self.lr = lr
        self.frame_id = frame_id


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 80
    learning_rate: float = 1e-3
    step_size: int = 15
    gamma: float = 0.5
    batch_size: int = 1
    snr_mode: str = "fixed"
    snr_db: float = 10.0
    snr_lo: float = -5.0
    snr_hi: float = 15.0
    channel: str = "awgn"
    seed: int = 0
    use_abs_pos: bool = True
    use_channel_codec: bool = True
    use_fusion: bool = True
    activation: str = "tanh"
    feed_snr: bool = True
    freeze_codec: bool = False
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise TrainError(f"stage must be one of {STAGES}")
        if self.batch_size != 1:
            raise TrainError("batch_size must be 1 (adaptive upsampling assumes it)")
        if self.snr_mode not in SNR_MODES:
            raise TrainError(f"snr_mode must be one of {SNR_MODES}")
        if self.activation not in ACTIVATIONS:
            raise TrainError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def pretrain_defaults(cls, **kw) -> "TrainConfig":
        kw.setdefault("stage", "pretrain")
        kw.setdefault("epochs", 80)
        kw.setdefault("step_size", 15)
        kw.setdefault("gamma", 0.5)
        return cls(**kw)

    @classmethod
    def finetune_defaults(cls, **kw) -> "TrainConfig":
        kw.setdefault("stage", "finetune")
        kw.setdefault("epochs", 20)
        kw.setdefault("step_size", 4)
        kw.setdefault("gamma", 0.8)
        return cls(**kw)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Step decay: lr0 * gamma ** floor(epoch / step_size), epoch counted from 0."""
    return cfg.learning_rate * cfg.gamma ** (epoch // cfg.step_size)


# ---------------------------------------------------------------------------
# Model assembly
# ---------------------------------------------------------------------------

class TransmissionModel(nn.Module):
    """All learned components of the pipeline; ablated modules are simply absent."""

    def __init__(
        self,
        codec_cfg: CodecConfig,
        use_channel_codec: bool = True,
        use_fusion: bool = True,
        activation: str = "tanh",
        feed_snr: bool = True,
    ):
        super().__init__()
        self.codec_cfg = codec_cfg
        self.activation = activation
        self.feature_enc = FeatureEncoder(codec_cfg)
        self.feature_dec = FeatureDecoder(codec_cfg)
        c = codec_cfg.bottleneck_dim
        scale = codec_cfg.crop_limit
        self.channel_enc = (
            make_channel_encoder(c, activation=activation, pos_scale=scale, feed_snr=feed_snr)
            if use_channel_codec
            else None
        )
        self.channel_dec = (
            make_channel_decoder(c, pos_scale=scale, feed_snr=feed_snr) if use_channel_codec else None
        )
        self.fusion = FeatureFusion(c, pos_scale=scale, feed_snr=feed_snr) if use_fusion else None

    @property
    def flags(self) -> dict:
        return {
            "use_channel_codec": self.channel_enc is not None,
            "use_fusion": self.fusion is not None,
            "activation": self.activation,
            "feed_snr": (self.channel_enc or self.fusion or _Dummy()).feed_snr,
        }


class _Dummy:
    feed_snr = True


@dataclass
class FrameState:
    """Per-pair cache: geometry and target statistics are pure functions of the
    points, built once and reused across epochs."""

    pair_id: str
    tx_points: np.ndarray
    tx_geo: EncoderGeometry
    tx_target: torch.Tensor
    density_stats: tuple
    rx_geo: EncoderGeometry | None = None
    aligned: bool = True


def prepare_frames(dataset: list[ScenePair], codec_cfg: CodecConfig, need_rx: bool) -> list[FrameState]:
    frames = []
    for i, pair in enumerate(dataset):
        tx = np.asarray(pair.tx.points, dtype=np.float64)
        target = torch.as_tensor(tx, dtype=torch.get_default_dtype())
        frames.append(
            FrameState(
                pair_id=pair.tx.frame_id or f"pair{i:04d}",
                tx_points=tx,
                tx_geo=build_encoder_geometry(tx, codec_cfg),
                tx_target=target,
                density_stats=density_target_stats(target, codec_cfg.r_density),
                rx_geo=build_encoder_geometry(pair.rx.points, codec_cfg) if need_rx else None,
                aligned=pair.aligned,
            )
        )
    return frames


def run_pipeline(
    model: TransmissionModel,
    frame: FrameState,
    snr_db: float,
    link_cfg: linkmod.LinkConfig | None,
    rng: np.random.Generator | None,
    transmit: bool = True,
    info: dict | None = None,
):
    """One frame end to end. transmit=False is the pure codec roundtrip used in
    stage-1 training (no activation, no link, no channel codec, no fusion).

    Returns (reconstruction (R,3) tensor, per-stage upsample outputs, latent).
    """
    latent = model.feature_enc(frame.tx_geo)
    feats = latent.feats
    if transmit:
        if model.channel_enc is not None:
            feats = model.channel_enc(latent.coords, feats, snr_db)
        else:
            feats = nonlinear_activation(feats, model.activation)
        if link_cfg is not None:
            cfg = replace(link_cfg, snr_db=snr_db)
            feats = linkmod.ste_transmit(feats, cfg, rng, info=info)
        if model.channel_dec is not None:
            feats = model.channel_dec(latent.coords, feats, snr_db)
        if model.fusion is not None:
            if frame.rx_geo is None:
                raise TrainError("fusion enabled but the frame has no receiver geometry")
            rx_latent = model.feature_enc(frame.rx_geo)
            feats = model.fusion(
                feats, latent.coords, rx_latent.feats, rx_latent.coords, snr_db, aligned=frame.aligned
            )
    recon, stages = model.feature_dec(latent.coords, feats)
    return recon, stages, latent


def cardinality_targets(geo: EncoderGeometry, stages) -> tuple[list[np.ndarray], list[torch.Tensor]]:
    """Per-decode-stage ground-truth child counts aligned to the predicted ones.

    Decode stage d refines (an approximation of) encoder level n-d down toward
    level n-1-d; its ground counts come from the encoder's nearest-parent
    assignment at that level. Stage 0 parents are exactly the latent points, so
    the alignment is direct; later stages pair each decoded parent with its
    nearest point of the matching encoder level.
    """
    n = len(geo.stages)
    grounds: list[np.ndarray] = []
    preds: list[torch.Tensor] = []
    parent_coords: np.ndarray | None = None
    for d, out in enumerate(stages):
        gt = geo.stages[n - 1 - d].child_count
        if d == 0:
            ground = gt
        else:
            level = geo.levels[n - d]
            idx, _ = tree_knn(level, parent_coords, 1)
            ground = gt[idx[:, 0]]
        grounds.append(ground)
        preds.append(out.expected_counts)
        parent_coords = out.select()[0].detach().cpu().numpy()
    return grounds, preds


def frame_loss(model, frame: FrameState, recon, stages, weights: LossWeights):
    grounds, preds = cardinality_targets(frame.tx_geo, stages)
    return total_loss(
        frame.tx_target,
        recon,
        grounds,
        preds,
        weights,
        radius=model.codec_cfg.r_density,
        k_norm=model.codec_cfg.k_neighbors,
        density_stats=frame.density_stats,
    )


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_cd: float
    lr: float


@dataclass
class TrainResult:
    model: TransmissionModel
    stats: list[EpochStats]
    codec_cfg: CodecConfig
    train_cfg: TrainConfig


def _seed_parts(*parts) -> list[int]:
    out = []
    for p in parts:
        if isinstance(p, float):
            out.append(int(np.float64(p).view(np.int64)) & 0x7FFFFFFFFFFFFFFF)
        elif isinstance(p, str):
            out.append(abs(hash(p)) & 0xFFFFFFFF)
        else:
            out.append(int(p))
    return out


def _epoch_pass(model, frames, cfg, weights, optim, epoch, link_cfg, rngs):
    order_rng, link_rng, snr_rng = rngs
    perm = order_rng.permutation(len(frames))
    lr = lr_at(cfg, epoch)
    for g in optim.param_groups:
        g["lr"] = lr
    losses, cds = [], []
    transmit = cfg.stage == "finetune"
    for fi in perm:
        frame = frames[fi]
        if cfg.snr_mode == "uniform":
            snr = float(snr_rng.uniform(cfg.snr_lo, cfg.snr_hi))
        else:
            snr = cfg.snr_db
        recon, stages, _ = run_pipeline(
            model, frame, snr, link_cfg if transmit else None, link_rng, transmit=transmit
        )
        loss, parts = frame_loss(model, frame, recon, stages, weights)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDiverged(epoch, lr, frame.pair_id)
        optim.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        optim.step()
        losses.append(loss_val)
        cds.append(parts["chamfer"])
    return EpochStats(epoch=epoch, mean_loss=float(np.mean(losses)), mean_cd=float(np.mean(cds)), lr=lr)


def pretrain(
    dataset: list[ScenePair],
    codec_cfg: CodecConfig,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    log_fn=None,
) -> TrainResult:
    """Stage 1: optimize the feature codec alone on clean roundtrips."""
    if cfg.stage != "pretrain":
        raise TrainError("pretrain requires a config with stage='pretrain'")
    weights = weights or LossWeights()
    codec_cfg = replace(codec_cfg, use_abs_pos=cfg.use_abs_pos)
    torch.manual_seed(cfg.seed)
    model = TransmissionModel(
        codec_cfg, use_channel_codec=False, use_fusion=False,
        activation=cfg.activation, feed_snr=cfg.feed_snr,
    )
    frames = prepare_frames(dataset, codec_cfg, need_rx=False)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rngs = (
        np.random.default_rng(_seed_parts(cfg.seed, 1)),
        np.random.default_rng(_seed_parts(cfg.seed, 2)),
        np.random.default_rng(_seed_parts(cfg.seed, 3)),
    )
    stats = []
    for epoch in range(cfg.epochs):
        st = _epoch_pass(model, frames, cfg, weights, optim, epoch, None, rngs)
        stats.append(st)
        if log_fn:
            log_fn(st)
    return TrainResult(model=model, stats=stats, codec_cfg=codec_cfg, train_cfg=cfg)


def finetune(
    init: "TransmissionModel | str",
    dataset: list[ScenePair],
    cfg: TrainConfig,
    link_cfg: linkmod.LinkConfig | None = None,
    weights: LossWeights | None = None,
    codec_cfg: CodecConfig | None = None,
    from_scratch: bool = False,
    log_fn=None,
) -> TrainResult:
    """Stage 2: optimize the full pipeline through the straight-through link.

    `init` is a stage-1 checkpoint path or a model whose feature codec seeds
    this run; `from_scratch=True` skips the transfer and trains a fresh codec.
    """
    if cfg.stage != "finetune":
        raise TrainError("finetune requires a config with stage='finetune'")
    weights = weights or LossWeights()
    if isinstance(init, str):
        init_model, meta = load_model(init)
        codec_cfg = init_model.codec_cfg
    else:
        init_model = init
        codec_cfg = codec_cfg or (init_model.codec_cfg if init_model is not None else None)
    if codec_cfg is None:
        raise TrainError("finetune needs a codec config (from init or explicit)")
    codec_cfg = replace(codec_cfg, use_abs_pos=cfg.use_abs_pos)

    torch.manual_seed(_seed_parts(cfg.seed, 10)[0] % (2**63))
    model = TransmissionModel(
        codec_cfg,
        use_channel_codec=cfg.use_channel_codec,
        use_fusion=cfg.use_fusion,
        activation=cfg.activation,
        feed_snr=cfg.feed_snr,
    )
    if not from_scratch:
        if init_model.codec_cfg.use_abs_pos != codec_cfg.use_abs_pos:
            raise TrainError("stage-1 codec was built with a different use_abs_pos flag")
        model.feature_enc.load_state_dict(init_model.feature_enc.state_dict())
        model.feature_dec.load_state_dict(init_model.feature_dec.state_dict())
    if cfg.freeze_codec:
        for p in model.feature_enc.parameters():
            p.requires_grad_(False)
        for p in model.feature_dec.parameters():
            p.requires_grad_(False)

    link_cfg = link_cfg or linkmod.LinkConfig()
    link_cfg = replace(link_cfg, channel=cfg.channel)
    frames = prepare_frames(dataset, codec_cfg, need_rx=cfg.use_fusion)
    trainable = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(trainable, lr=cfg.learning_rate)
    rngs = (
        np.random.default_rng(_seed_parts(cfg.seed, 11)),
        np.random.default_rng(_seed_parts(cfg.seed, 12)),
        np.random.default_rng(_seed_parts(cfg.seed, 13)),
    )
    stats = []
    for epoch in range(cfg.epochs):
        st = _epoch_pass(model, frames, cfg, weights, optim, epoch, link_cfg, rngs)
        stats.append(st)
        if log_fn:
            log_fn(st)
    return TrainResult(model=model, stats=stats, codec_cfg=codec_cfg, train_cfg=cfg)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    records: list[MetricRecord]
    summary: dict
    channel: str
    snr_grid: list[float]


def evaluate(
    model: TransmissionModel,
    dataset: list[ScenePair],
    snr_grid,
    channel: str = "awgn",
    link_cfg: linkmod.LinkConfig | None = None,
    seed: int = 0,
    frames: list[FrameState] | None = None,
) -> ExperimentReport:
    """Per-frame metrics at every SNR of the grid; deterministic in `seed`."""
    link_cfg = replace(link_cfg or linkmod.LinkConfig(), channel=channel)
    if frames is None:
        frames = prepare_frames(dataset, model.codec_cfg, need_rx=model.fusion is not None)
    records = []
    n_latent = model.codec_cfg.latent_points(frames[0].tx_points.shape[0])
    rate = bpp(
        n_latent,
        model.codec_cfg.bottleneck_dim,
        link_cfg.bits_per_feature,
        frames[0].tx_points.shape[0],
    )
    model.eval()
    with torch.no_grad():
        for fi, frame in enumerate(frames):
            for snr in snr_grid:
                rng = np.random.default_rng(_seed_parts(seed, fi, float(snr)))
                recon, _, _ = run_pipeline(model, frame, float(snr), link_cfg, rng, transmit=True)
                recon_np = recon.detach().cpu().numpy()
                rec = frame_metrics(frame, recon_np, float(snr), rate)
                records.append(rec)
    model.train()
    return ExperimentReport(
        records=records,
        summary=summarize_records(records),
        channel=channel,
        snr_grid=[float(s) for s in snr_grid],
    )


def frame_metrics(frame: FrameState, recon_np: np.ndarray, snr: float, rate: float) -> MetricRecord:
    target = frame.tx_points
    cd = chamfer(target, recon_np)
    d1 = d1_psnr(target, recon_np)
    recon_cloud = PointCloud(points=recon_np)
    k = min(16, len(recon_cloud))
    if k >= 3:
        normals, degen = estimate_normals(recon_cloud, k=k)
        d2 = d2_psnr(target, recon_np, normals, degenerate_q=degen)
    else:
        d2 = float("-inf")
    return MetricRecord(frame_id=frame.pair_id, snr_db=snr, bpp=rate, cd=cd, d1_psnr=d1, d2_psnr=d2)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ABLATION_AXES = ("use_abs_pos", "use_channel_codec", "use_fusion")


def run_ablation(
    dataset: list[ScenePair],
    codec_cfg: CodecConfig,
    pre_cfg: TrainConfig,
    fine_cfg: TrainConfig,
    axes=ABLATION_AXES,
    snr_grid=(0.0, 5.0, 10.0),
    link_cfg: linkmod.LinkConfig | None = None,
    eval_seed: int = 1234,
) -> dict[str, ExperimentReport]:
    """Train and evaluate the full model and one variant per ablation axis.

    All variants share the dataset, seeds, and SNR grid; variants that keep the
    codec architecture share the stage-1 checkpoint.
    """
    bad = set(axes) - set(ABLATION_AXES)
    if bad:
        raise TrainError(f"unknown ablation axes {sorted(bad)}")
    variants: dict[str, dict] = {"full": {}}
    if "use_abs_pos" in axes:
        variants["no_abs_pos"] = {"use_abs_pos": False}
    if "use_channel_codec" in axes:
        variants["no_channel"] = {"use_channel_codec": False}
    if "use_fusion" in axes:
        variants["no_fusion"] = {"use_fusion": False}

    pretrained: dict[bool, TrainResult] = {}
    reports: dict[str, ExperimentReport] = {}
    for name, flags in variants.items():
        abs_pos = flags.get("use_abs_pos", True)
        if abs_pos not in pretrained:
            p_cfg = replace(pre_cfg, use_abs_pos=abs_pos)
            pretrained[abs_pos] = pretrain(dataset, codec_cfg, p_cfg)
        f_cfg = replace(fine_cfg, use_abs_pos=abs_pos, **{k: v for k, v in flags.items() if k != "use_abs_pos"})
        result = finetune(pretrained[abs_pos].model, dataset, f_cfg, link_cfg=link_cfg)
        reports[name] = evaluate(
            result.model, dataset, snr_grid, channel=f_cfg.channel, link_cfg=link_cfg, seed=eval_seed
        )
    return reports


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model: TransmissionModel, train_cfg: TrainConfig | None = None, epoch: int = 0):
    arrays = {f"param.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays["rng.torch"] = torch.get_rng_state().numpy()
    meta = {
        "epoch": epoch,
        "codec": _jsonable(dataclasses.asdict(model.codec_cfg)),
        "flags": model.flags,
        "train": _jsonable(dataclasses.asdict(train_cfg)) if train_cfg else None,
    }
    save_arrays(path, arrays, meta)


def load_model(path):
    arrays, meta = load_arrays(path)
    codec_kw = dict(meta["codec"])
    codec_kw["hidden_dims"] = tuple(codec_kw["hidden_dims"])
    codec_kw["up_hidden_dims"] = tuple(codec_kw["up_hidden_dims"])
    codec_cfg = CodecConfig(**codec_kw)
    flags = meta["flags"]
    model = TransmissionModel(
        codec_cfg,
        use_channel_codec=flags["use_channel_codec"],
        use_fusion=flags["use_fusion"],
        activation=flags["activation"],
        feed_snr=flags["feed_snr"],
    )
    state = {
        k[len("param."):]: torch.as_tensor(v)
        for k, v in arrays.items()
        if k.startswith("param.")
    }
    model.load_state_dict(state)
    return model, meta


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            out[k] = list(v)
        else:
            out[k] = v
    return out
