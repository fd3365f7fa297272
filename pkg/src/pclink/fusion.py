"""Cross-attention fusion of the decoded transmitter latent with the receiver's.

The receiver encodes its own scan with the shared feature encoder (that latent
never crosses the link); fusion then enhances each transmitter feature with a
per-channel cross-attention mixture of receiver features. Both streams share
one set of preprocessing perceptrons, and the output branch starts at zero so
an untrained fusion is exactly the identity on the transmitter features.

Positions enter the per-stream embeddings relative to the transmitter's first
latent point (a deterministic anchor both ends know). Differences of
coordinates are all the network ever sees, so the output is exactly invariant
to a joint translation of both clouds, and the anchor cannot move under any
permutation of the receiver's points.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .nn_ops import channel_softmax, mlp, ordered_sum, zero_module


class FrameMismatchError(ValueError):
    """Fusion inputs are not expressed in a common frame."""


class FeatureFusion(nn.Module):
    def __init__(self, feat_dim: int, pos_scale: float = 70.0, feed_snr: bool = True, hidden: int = 32):
        super().__init__()
        c = feat_dim
        self.feat_dim = c
        self.pos_scale = float(pos_scale)
        self.feed_snr = feed_snr
        # shared preprocessing for both streams (single parameter set)
        self.pos_embed = mlp([3, hidden, c])
        self.feat_embed = mlp([c, hidden, 2 * c])
        self.snr_embed = mlp([1, hidden, c])
        self.query = mlp([4 * c, hidden, c])
        self.key = mlp([4 * c, hidden, c])
        self.rel_pos = mlp([3, hidden, c])
        self.out_proj = zero_module(nn.Linear(c, c))

    def _unify(self, coords: torch.Tensor, feats: torch.Tensor, snr_db: float) -> torch.Tensor:
        snr_val = float(snr_db) if self.feed_snr else 0.0
        snr_in = torch.full((coords.shape[0], 1), snr_val, dtype=feats.dtype, device=feats.device)
        return torch.cat(
            [self.pos_embed(coords / self.pos_scale), self.feat_embed(feats), self.snr_embed(snr_in)],
            dim=-1,
        )

    def forward(
        self,
        tx_feats: torch.Tensor,  # (Nt, C) channel-decoded transmitter features
        tx_coords,  # (Nt, 3) anchor coordinates, common frame
        rx_feats: torch.Tensor,  # (Nr, C) receiver's locally encoded features
        rx_coords,  # (Nr, 3) common frame
        snr_db: float,
        aligned: bool = True,
        return_attention: bool = False,
    ):
        if not aligned:
            raise FrameMismatchError("transmitter and receiver clouds are not in a common frame")
        if not isinstance(tx_coords, torch.Tensor):
            tx_coords = torch.as_tensor(np.asarray(tx_coords), dtype=tx_feats.dtype, device=tx_feats.device)
        if not isinstance(rx_coords, torch.Tensor):
            rx_coords = torch.as_tensor(np.asarray(rx_coords), dtype=rx_feats.dtype, device=rx_feats.device)

        anchor = tx_coords[0]
        tx_local = tx_coords - anchor
        rx_local = rx_coords - anchor
        e_q = self.query(self._unify(tx_local, tx_feats, snr_db))  # (Nt, C)
        e_k = self.key(self._unify(rx_local, rx_feats, snr_db))  # (Nr, C)
        rel = tx_coords.unsqueeze(1) - rx_coords.unsqueeze(0)  # (Nt, Nr, 3)
        logits = e_q.unsqueeze(1) - e_k.unsqueeze(0) + self.rel_pos(rel / self.pos_scale)
        attn = channel_softmax(logits, dim=1)  # softmax over receiver index per channel
        fused = tx_feats + self.out_proj(ordered_sum(attn * rx_feats.unsqueeze(0), dim=1))
        if return_attention:
            return fused, attn
        return fused
