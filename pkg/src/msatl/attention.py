"""Self-attention filter applied to a sub-network's bottleneck features.

For a feature map X flattened to C x K (K = H*W):

    f = W_f X,  g = W_g X,  h = W_h X                (C' x K, C' x K, C x K)
    M[b, a] = softmax_a( f[:, a] . g[:, b] )         (K x K, rows sum to 1)
    X'[:, b] = W_v sum_a M[b, a] h[:, a]
    out = mu * X' + X

``mu`` starts at zero, so a fresh module is the identity.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import nn


def reduced_channels(C: int) -> int:
    return max(1, C // 8)


class SelfAttention(nn.Module):
    """Learned attention parameters ``{W_f, W_g, W_h, W_v, mu}`` for ``C`` channels."""

    def __init__(self, C: int, generator: Optional[torch.Generator] = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if C < 1:
            raise ValueError(f"channel count must be >= 1, got {C}")
        Cr = reduced_channels(C)
        self.C = C
        self.W_f = nn.Parameter(torch.empty(Cr, C, dtype=dtype))
        self.W_g = nn.Parameter(torch.empty(Cr, C, dtype=dtype))
        self.W_h = nn.Parameter(torch.empty(C, C, dtype=dtype))
        self.W_v = nn.Parameter(torch.empty(C, C, dtype=dtype))
        self.mu = nn.Parameter(torch.zeros((), dtype=dtype))
        self.reset_parameters(generator)

    def reset_parameters(self, generator: Optional[torch.Generator] = None) -> None:
        bound = 1.0 / math.sqrt(self.C)
        with torch.no_grad():
            for w in (self.W_f, self.W_g, self.W_h, self.W_v):
                w.uniform_(-bound, bound, generator=generator)
            self.mu.zero_()

    def clamp_mu(self) -> None:
        with torch.no_grad():
            self.mu.clamp_(min=0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return apply_attention(x, self)


def init_attention(C: int, seed: int = 0, dtype: torch.dtype = torch.float32) -> SelfAttention:
    gen = torch.Generator().manual_seed(seed)
    return SelfAttention(C, generator=gen, dtype=dtype)


def _flatten(x: torch.Tensor, p: SelfAttention) -> torch.Tensor:
    if x.dim() not in (3, 4):
        raise ValueError(f"expected C x H x W or B x C x H x W, got shape {tuple(x.shape)}")
    if x.shape[-3] != p.C:
        raise ValueError(f"feature map has {x.shape[-3]} channels, attention expects {p.C}")
    if not torch.isfinite(x).all():
        raise ValueError("feature map contains non-finite values")
    return x.flatten(-2)


def attention_map(x: torch.Tensor, p: SelfAttention) -> torch.Tensor:
    """K x K (or B x K x K) row-stochastic map; row b is the distribution over a."""
    X = _flatten(x, p)
    f = p.W_f @ X
    g = p.W_g @ X
    logits = g.transpose(-1, -2) @ f  # [b, a] = g_b . f_a
    logits = logits - logits.amax(dim=-1, keepdim=True).detach()
    e = logits.exp()
    return e / e.sum(dim=-1, keepdim=True)


def apply_attention(x: torch.Tensor, p: SelfAttention) -> torch.Tensor:
    X = _flatten(x, p)
    M = attention_map(x, p)
    h = p.W_h @ X
    attended = p.W_v @ (h @ M.transpose(-1, -2))
    return (p.mu * attended + X).reshape(x.shape)
