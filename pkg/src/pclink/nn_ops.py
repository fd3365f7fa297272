"""Small shared blocks for the attention networks."""
from __future__ import annotations

import torch
import torch.nn as nn


def ordered_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum along `dim` with operands in sorted order.

    Floating-point summation is order-sensitive; sorting first makes the result
    depend only on the multiset of addends, so attention reductions stay
    bitwise identical under any permutation of the reduced axis.
    """
    return torch.sort(x, dim=dim).values.sum(dim=dim)


def channel_softmax(logits: torch.Tensor, dim: int) -> torch.Tensor:
    """Per-channel softmax along `dim` with an order-independent denominator."""
    m = logits.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(logits - m)
    return e / ordered_sum(e, dim=dim).unsqueeze(dim)


def mlp(dims: list[int] | tuple[int, ...]) -> nn.Sequential:
    """Plain ReLU MLP; no activation after the last linear layer."""
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def zero_module(module: nn.Module) -> nn.Module:
    """Zero all parameters in place (used for safe-start residual branches)."""
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module
