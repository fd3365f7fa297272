"""Density-preserving point-cloud feature codec.

The encoder stacks downsampling blocks: each FPS-samples the current level by
the stage factor, then fuses three per-parent embeddings (neighborhood
cardinality, attention-pooled local offsets, and a vector-attention ancestor
aggregation) into the parent's output feature. The decoder mirrors it with
upsampling blocks that predict, per parent, a bounded offset fan, per-candidate
features (grouped transforms, no replication), and an integer child count.

Geometry (FPS picks, neighbor indices, counts) is plain numpy and carries no
gradients; only features and decoder coordinates live in the torch graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .nn_ops import channel_softmax, mlp
from .pcdata import farthest_point_indices, radius_counts, tree_knn


class CodecError(ValueError):
    """Invalid codec configuration or input."""


@dataclass
class CodecConfig:
    n_stages: int = 3
    downsample_factor: int = 4
    bottleneck_dim: int = 8
    k_neighbors: int = 16
    k_max: int = 8
    r_max: float = 2.0
    hidden_dims: tuple[int, ...] = (64, 128, 256)
    up_hidden_dims: tuple[int, ...] = (64, 64, 64)
    r_density: float = 1.0
    crop_limit: float = 70.0
    use_abs_pos: bool = True

    def __post_init__(self):
        if self.n_stages < 1:
            raise CodecError("n_stages must be >= 1")
        if self.downsample_factor < 2:
            raise CodecError("downsample_factor must be >= 2")
        if self.bottleneck_dim < 1:
            raise CodecError("bottleneck_dim must be >= 1")
        if self.k_max < self.downsample_factor:
            raise CodecError("k_max must be >= downsample_factor")
        if len(self.hidden_dims) != self.n_stages or len(self.up_hidden_dims) != self.n_stages:
            raise CodecError("hidden_dims and up_hidden_dims must have one width per stage")

    @property
    def total_factor(self) -> int:
        return self.downsample_factor**self.n_stages

    def latent_points(self, n: int) -> int:
        if n % self.total_factor != 0:
            raise CodecError(
                f"cloud size {n} is not divisible by the total downsample factor {self.total_factor}"
            )
        return n // self.total_factor


@dataclass
class LatentRepresentation:
    """The transmissible bottleneck: anchor coordinates plus per-point features."""

    coords: np.ndarray  # (Ns, 3) meters; never enters the noisy link
    feats: torch.Tensor  # (Ns, C)

    def __post_init__(self):
        if self.coords.shape[0] != self.feats.shape[0]:
            raise CodecError("coords and feats disagree on the number of latent points")
        if isinstance(self.feats, torch.Tensor) and not torch.isfinite(self.feats).all():
            raise CodecError("latent features must be finite")


@dataclass
class StageGeometry:
    """Static per-stage geometry computed once per frame."""

    parent_index: np.ndarray  # (M,) FPS picks into the stage input level
    neighbor_index: np.ndarray  # (M, k) kNN of each parent among the input level
    density_count: np.ndarray  # (M,) points of the input level within the density radius
    child_count: np.ndarray  # (M,) input-level points whose nearest parent is this one


@dataclass
class EncoderGeometry:
    levels: list[np.ndarray]  # level 0 = input cloud, level n = latent coords
    stages: list[StageGeometry] = field(default_factory=list)


def build_encoder_geometry(points: np.ndarray, cfg: CodecConfig) -> EncoderGeometry:
    pts = np.asarray(points, dtype=np.float64)
    cfg.latent_points(pts.shape[0])  # validates divisibility
    geo = EncoderGeometry(levels=[pts])
    cur = pts
    for s in range(cfg.n_stages):
        m = cur.shape[0] // cfg.downsample_factor
        pidx = farthest_point_indices(cur, m)
        parents = cur[pidx]
        k = min(cfg.k_neighbors, cur.shape[0])
        nb_idx, _ = tree_knn(cur, parents, k)
        counts = radius_counts(cur, parents, cfg.r_density * (2.0**s))
        assign, _ = tree_knn(parents, cur, 1)
        child = np.bincount(assign[:, 0], minlength=m)
        geo.stages.append(
            StageGeometry(
                parent_index=pidx,
                neighbor_index=nb_idx,
                density_count=counts,
                child_count=child,
            )
        )
        cur = parents
        geo.levels.append(cur)
    return geo


# ---------------------------------------------------------------------------
# Encoder blocks
# ---------------------------------------------------------------------------

class DensityEmbedding(nn.Module):
    """Perceptron image of the neighborhood cardinality.

    The count is normalized by the fixed k_neighbors constant so the embedding
    is a pure function of the local count.
    """

    def __init__(self, width: int, k_norm: int):
        super().__init__()
        self.k_norm = float(k_norm)
        self.net = mlp([1, width, width])

    def forward(self, counts: torch.Tensor) -> torch.Tensor:
        return self.net((counts.to(self.net[0].weight.dtype) / self.k_norm).unsqueeze(-1))


class LocalPositionEmbedding(nn.Module):
    """Attention-pooled embedding of neighbor offsets (directions and distances)."""

    def __init__(self, width: int):
        super().__init__()
        self.encode = mlp([4, width, width])
        self.score = nn.Linear(width, width)
        self.value = nn.Linear(width, width)

    def forward(self, offsets: torch.Tensor) -> torch.Tensor:
        # offsets: (M, k, 3)
        norms = offsets.norm(dim=-1, keepdim=True)
        e = self.encode(torch.cat([offsets, norms], dim=-1))
        attn = torch.softmax(self.score(e), dim=1)
        return (attn * self.value(e)).sum(dim=1)


class PointTransformer(nn.Module):
    """Vector self-attention over a local neighborhood.

    y_i = sum_j softmax_j(gamma(phi(f_j) - psi(f_i) + delta_ij)) * (alpha(f_j) + delta_ij)
    with delta_ij = theta(p_i - p_j), plus beta(p_i / pos_scale) when absolute
    position encoding is enabled. The softmax runs over the neighbor axis
    independently per channel.
    """

    def __init__(self, c_in: int, width: int, use_abs_pos: bool, pos_scale: float):
        super().__init__()
        self.phi = nn.Linear(c_in, width)
        self.psi = nn.Linear(c_in, width)
        self.alpha = nn.Linear(c_in, width)
        self.gamma = mlp([width, width, width])
        self.theta = mlp([3, width, width])
        self.beta = mlp([3, width, width]) if use_abs_pos else None
        self.pos_scale = float(pos_scale)

    def position_encoding(self, query_pts: torch.Tensor, neighbor_pts: torch.Tensor) -> torch.Tensor:
        delta = self.theta(query_pts.unsqueeze(1) - neighbor_pts)
        if self.beta is not None:
            delta = delta + self.beta(query_pts / self.pos_scale).unsqueeze(1)
        return delta

    def forward(
        self,
        query_pts: torch.Tensor,  # (M, 3)
        query_feats: torch.Tensor,  # (M, C_in)
        support_pts: torch.Tensor,  # (N, 3)
        support_feats: torch.Tensor,  # (N, C_in)
        neighbor_index: torch.Tensor,  # (M, k) long
        return_attention: bool = False,
    ):
        if neighbor_index.numel() and int(neighbor_index.max()) >= support_pts.shape[0]:
            raise CodecError("neighbor index out of range of the support set")
        f_j = support_feats[neighbor_index]  # (M, k, C_in)
        p_j = support_pts[neighbor_index]
        delta = self.position_encoding(query_pts, p_j)
        logits = self.gamma(self.phi(f_j) - self.psi(query_feats).unsqueeze(1) + delta)
        attn = torch.softmax(logits, dim=1)  # per-channel over the neighbor axis
        y = (attn * (self.alpha(f_j) + delta)).sum(dim=1)
        if return_attention:
            return y, attn
        return y


class DownsampleBlock(nn.Module):
    def __init__(self, c_in: int, width: int, c_out: int, cfg: CodecConfig):
        super().__init__()
        self.density = DensityEmbedding(width, cfg.k_neighbors)
        self.local_pos = LocalPositionEmbedding(width)
        self.ancestor = PointTransformer(c_in, width, cfg.use_abs_pos, cfg.crop_limit)
        self.fuse = mlp([3 * width, c_out, c_out])

    def forward(self, query_pts, query_feats, support_pts, support_feats, neighbor_index, counts):
        p_j = support_pts[neighbor_index]
        emb = torch.cat(
            [
                self.density(counts),
                self.local_pos(p_j - query_pts.unsqueeze(1)),
                self.ancestor(query_pts, query_feats, support_pts, support_feats, neighbor_index),
            ],
            dim=-1,
        )
        return self.fuse(emb)


class FeatureEncoder(nn.Module):
    """n cascaded downsampling blocks producing the latent (coords, feats)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        c_in = 3
        for s in range(cfg.n_stages):
            width = cfg.hidden_dims[s]
            c_out = cfg.bottleneck_dim if s == cfg.n_stages - 1 else width
            blocks.append(DownsampleBlock(c_in, width, c_out, cfg))
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, geometry: EncoderGeometry) -> LatentRepresentation:
        dtype = next(self.parameters()).dtype
        device = next(self.parameters()).device
        support_pts = torch.as_tensor(geometry.levels[0], dtype=dtype, device=device)
        feats = support_pts / self.cfg.crop_limit  # stage-0 features: scaled coordinates
        for block, stage, level in zip(self.blocks, geometry.stages, geometry.levels[1:]):
            query_pts = torch.as_tensor(level, dtype=dtype, device=device)
            pidx = torch.as_tensor(stage.parent_index, dtype=torch.long, device=device)
            nidx = torch.as_tensor(stage.neighbor_index, dtype=torch.long, device=device)
            counts = torch.as_tensor(stage.density_count, dtype=dtype, device=device)
            feats = block(query_pts, feats[pidx], support_pts, feats, nidx, counts)
            support_pts = query_pts
        return LatentRepresentation(coords=geometry.levels[-1], feats=feats)


def encode(points: np.ndarray, encoder: FeatureEncoder):
    """Convenience wrapper: build geometry and run the encoder.

    Returns (latent, geometry); the geometry carries the per-stage ground-truth
    child counts that the cardinality loss consumes.
    """
    geometry = build_encoder_geometry(points, encoder.cfg)
    return encoder(geometry), geometry


# ---------------------------------------------------------------------------
# Decoder blocks
# ---------------------------------------------------------------------------

@dataclass
class UpsampleOutput:
    points: torch.Tensor  # (M, K_max, 3) candidate children
    feats: torch.Tensor  # (M, K_max, C_out)
    counts: torch.Tensor  # (M,) integer K_i in [1, K_max]
    radii: torch.Tensor  # (M,) learned per-parent radius r_i <= r_max
    expected_counts: torch.Tensor  # (M,) softmax-relaxed counts (differentiable)

    def select(self):
        """First K_i candidates of every parent, flattened."""
        k_max = self.points.shape[1]
        mask = torch.arange(k_max, device=self.points.device).unsqueeze(0) < self.counts.unsqueeze(1)
        return self.points[mask], self.feats[mask]


class UpsampleBlock(nn.Module):
    """Adaptive upsampling: bounded offset fan, grouped per-candidate feature
    transforms (sub-point convolution), and a categorical child-count head."""

    def __init__(self, c_in: int, c_out: int, k_max: int, r_max: float, f_init: int | None = None):
        super().__init__()
        self.k_max = k_max
        self.r_max = float(r_max)
        hidden = max(2 * c_in, 32)
        self.offset_head = mlp([c_in, hidden, k_max * 3])
        self.radius_head = mlp([c_in, hidden, 1])
        self.count_head = mlp([c_in, hidden, k_max])
        self.sub_weight = nn.Parameter(torch.empty(k_max, c_in, c_out))
        self.sub_bias = nn.Parameter(torch.zeros(k_max, c_out))
        nn.init.kaiming_uniform_(self.sub_weight, a=5**0.5)
        if f_init is not None:
            # start at the balanced count so early reconstructions keep the
            # input size instead of fanning out to k_max children everywhere
            if not 1 <= f_init <= k_max:
                raise CodecError(f"f_init must lie in [1, {k_max}]")
            with torch.no_grad():
                last = self.count_head[-1]
                last.weight.zero_()
                last.bias.zero_()
                last.bias[f_init - 1] = 2.0

    def forward(self, parent_pts: torch.Tensor, parent_feats: torch.Tensor, force_k: int | None = None):
        m = parent_pts.shape[0]
        raw = self.offset_head(parent_feats).view(m, self.k_max, 3)
        norms = raw.norm(dim=-1, keepdim=True)
        # tanh bound on the offset norm keeps every candidate within r_i (L2)
        unit = raw * (torch.tanh(norms) / (norms + 1e-12))
        radii = self.r_max * torch.sigmoid(self.radius_head(parent_feats))  # (M, 1)
        offsets = radii.unsqueeze(-1) * unit
        children = parent_pts.unsqueeze(1) + offsets

        feats = torch.einsum("mc,kcd->mkd", parent_feats, self.sub_weight) + self.sub_bias
        feats = torch.relu(feats)

        logits = self.count_head(parent_feats)  # (M, k_max), class k means count k+1
        probs = channel_softmax(logits, dim=1)
        ks = torch.arange(1, self.k_max + 1, dtype=probs.dtype, device=probs.device)
        expected = (probs * ks).sum(dim=1)
        if force_k is None:
            counts = logits.argmax(dim=1) + 1
        else:
            if not 1 <= force_k <= self.k_max:
                raise CodecError(f"force_k must lie in [1, {self.k_max}]")
            counts = torch.full((m,), force_k, dtype=torch.long, device=parent_pts.device)
        return UpsampleOutput(
            points=children,
            feats=feats,
            counts=counts,
            radii=radii.squeeze(1),
            expected_counts=expected,
        )


class FeatureDecoder(nn.Module):
    """n density-adaptive upsampling blocks; the output size is data-dependent."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        blocks = []
        c_in = cfg.bottleneck_dim
        for s in range(cfg.n_stages):
            c_out = cfg.up_hidden_dims[s]
            blocks.append(
                UpsampleBlock(c_in, c_out, cfg.k_max, cfg.r_max, f_init=cfg.downsample_factor)
            )
            c_in = c_out
        self.blocks = nn.ModuleList(blocks)

    def forward(self, coords, feats: torch.Tensor, force_k: int | None = None):
        """Returns (reconstructed points (R, 3), per-stage UpsampleOutput list)."""
        dtype = feats.dtype
        device = feats.device
        pts = torch.as_tensor(np.asarray(coords), dtype=dtype, device=device) \
            if not isinstance(coords, torch.Tensor) else coords
        outputs = []
        for block in self.blocks:
            out = block(pts, feats, force_k=force_k)
            outputs.append(out)
            pts, feats = out.select()
        return pts, outputs
