"""Self-attention channel encoder/decoder conditioned on positions and SNR.

Both directions share one architecture (separate weights): per-point position,
feature, and SNR embeddings are concatenated into a unified embedding, queries
and keys come from MLPs on it, and a relative position encoder biases the full
pairwise attention. The encoder ends in a bounded nonlinear activation so its
output fits the quantizer's [-1, 1] domain; the decoder has no terminal
activation.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .nn_ops import channel_softmax, mlp, ordered_sum, zero_module

ACTIVATIONS = ("tanh", "hardtanh", "none")


def nonlinear_activation(x, kind: str):
    """Elementwise bounded activation; `none` is the identity."""
    if kind not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    if isinstance(x, torch.Tensor):
        if kind == "tanh":
            return torch.tanh(x)
        if kind == "hardtanh":
            return torch.clamp(x, -1.0, 1.0)
        return x
    x = np.asarray(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "hardtanh":
        return np.clip(x, -1.0, 1.0)
    return x


class ChannelCodec(nn.Module):
    """One direction of the channel codec (encoder or decoder).

    The SNR enters as the raw dB scalar broadcast to every point; with
    `feed_snr` disabled the scalar is pinned to zero so the architecture (and
    the 4C unified width) is unchanged.
    """

    def __init__(
        self,
        feat_dim: int,
        pos_scale: float = 70.0,
        feed_snr: bool = True,
        terminal_activation: str | None = None,
        hidden: int = 32,
    ):
        super().__init__()
        c = feat_dim
        self.feat_dim = c
        self.pos_scale = float(pos_scale)
        self.feed_snr = feed_snr
        self.terminal_activation = terminal_activation
        self.pos_embed = mlp([3, hidden, c])
        self.feat_embed = mlp([c, hidden, 2 * c])
        self.snr_embed = mlp([1, hidden, c])
        self.query = mlp([4 * c, hidden, c])
        self.key = mlp([4 * c, hidden, c])
        self.rel_pos = mlp([3, hidden, c])
        # zero-initialized output branch: at construction the codec is the identity
        self.out_proj = zero_module(nn.Linear(c, c))

    def unify_embeddings(self, coords: torch.Tensor, feats: torch.Tensor, snr_db: float) -> torch.Tensor:
        """Concat(position, feature, SNR) embeddings along channels -> (N, 4C)."""
        n = coords.shape[0]
        snr_val = float(snr_db) if self.feed_snr else 0.0
        snr_in = torch.full((n, 1), snr_val, dtype=feats.dtype, device=feats.device)
        return torch.cat(
            [self.pos_embed(coords / self.pos_scale), self.feat_embed(feats), self.snr_embed(snr_in)],
            dim=-1,
        )

    def attend(self, unified: torch.Tensor, feats: torch.Tensor, coords: torch.Tensor,
               return_attention: bool = False):
        """f_i + out_proj(sum_j a_ij * f_j), a_ij = softmax_j(eQ_i - eK_j + xi(p_i - p_j))."""
        e_q = self.query(unified)  # (N, C)
        e_k = self.key(unified)
        rel = coords.unsqueeze(1) - coords.unsqueeze(0)  # (N, N, 3)
        logits = e_q.unsqueeze(1) - e_k.unsqueeze(0) + self.rel_pos(rel / self.pos_scale)
        attn = channel_softmax(logits, dim=1)  # softmax over j per (i, channel)
        mixed = ordered_sum(attn * feats.unsqueeze(0), dim=1)
        out = feats + self.out_proj(mixed)
        if return_attention:
            return out, attn
        return out

    def forward(self, coords, feats: torch.Tensor, snr_db: float, return_attention: bool = False):
        if not isinstance(coords, torch.Tensor):
            coords = torch.as_tensor(np.asarray(coords), dtype=feats.dtype, device=feats.device)
        result = self.attend(self.unify_embeddings(coords, feats, snr_db), feats, coords,
                             return_attention=return_attention)
        out, attn = result if return_attention else (result, None)
        if self.terminal_activation is not None:
            out = nonlinear_activation(out, self.terminal_activation)
        return (out, attn) if return_attention else out


def make_channel_encoder(feat_dim: int, activation: str = "tanh", **kw) -> ChannelCodec:
    return ChannelCodec(feat_dim, terminal_activation=activation, **kw)


def make_channel_decoder(feat_dim: int, **kw) -> ChannelCodec:
    return ChannelCodec(feat_dim, terminal_activation=None, **kw)
