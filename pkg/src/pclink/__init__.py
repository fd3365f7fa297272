"""pclink: LiDAR point-cloud feature transmission over simulated wireless links.

A transmitter compresses a scan into a small latent (anchor coordinates plus
per-point features), enhances the features with an SNR-conditioned channel
encoder, and sends them through a digital link (quantization, Gray-mapped
modulation, block fading, ZF equalization). The receiver decodes, fuses with
its own locally encoded scan by cross-attention, and reconstructs the
transmitter's cloud with a density-adaptive decoder. Training is two-stage with
a straight-through estimator bridging the non-differentiable link. An
octree+LDPC pipeline provides the classical separate-coding baseline.
"""

from .featurecodec import CodecConfig, FeatureDecoder, FeatureEncoder, LatentRepresentation
from .link import ChannelRealization, LinkConfig
from .metrics import LossWeights, MetricRecord, bpp, chamfer, d1_psnr, d2_psnr
from .pcdata import (
    NeighborIndex,
    PointCloud,
    SceneParams,
    ScenePair,
    crop_range,
    estimate_normals,
    farthest_point_sample,
    knn,
    load_point_cloud,
    save_point_cloud,
    synth_scene,
)
from .trainer import TrainConfig, TransmissionModel, evaluate, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "CodecConfig",
    "ChannelRealization",
    "FeatureDecoder",
    "FeatureEncoder",
    "LatentRepresentation",
    "LinkConfig",
    "LossWeights",
    "MetricRecord",
    "NeighborIndex",
    "PointCloud",
    "SceneParams",
    "ScenePair",
    "TrainConfig",
    "TransmissionModel",
    "bpp",
    "chamfer",
    "crop_range",
    "d1_psnr",
    "d2_psnr",
    "estimate_normals",
    "evaluate",
    "farthest_point_sample",
    "finetune",
    "knn",
    "load_point_cloud",
    "pretrain",
    "save_point_cloud",
    "synth_scene",
]
