"""Attention primitives shared by the lab encoder and the fusion module."""

from __future__ import annotations

import math

import torch
from torch import nn

# Finite stand-in for -inf: masked keys get exactly zero weight after the
# max-subtracted exp, and fully masked rows stay NaN-free.
NEG_LARGE = -1e30


def masked_softmax(scores: torch.Tensor, key_valid: torch.Tensor | None) -> torch.Tensor:
    if key_valid is not None:
        scores = scores.masked_fill(~key_valid, NEG_LARGE)
    return torch.softmax(scores, dim=-1)


class MultiHeadAttention(nn.Module):
    """Multi-head scaled dot-product attention with key validity masking."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        if d_model % heads:
            raise ValueError(f"d_model={d_model} not divisible by heads={heads}")
        self.d_model, self.heads = d_model, heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, _ = x.shape
        return x.reshape(*lead, n, self.heads, self.d_model // self.heads).transpose(-3, -2)

    def merge(self, x: torch.Tensor) -> torch.Tensor:
        *lead, h, n, dh = x.shape
        return x.transpose(-3, -2).reshape(*lead, n, h * dh)

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, key_valid: torch.Tensor | None):
        """Attention over already-projected ``q, k, v`` of width ``d_model``.

        Returns the merged (pre output projection) values and the weights
        ``(..., heads, n_q, n_k)``.
        """
        qh, kh, vh = self.split(q), self.split(k), self.split(v)
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.d_model // self.heads)
        mask = None if key_valid is None else key_valid[..., None, None, :]
        weights = masked_softmax(scores, mask)
        return self.merge(weights @ vh), weights

    def forward(self, x_q: torch.Tensor, x_kv: torch.Tensor, key_valid: torch.Tensor | None = None):
        out, weights = self.attend(self.q(x_q), self.k(x_kv), self.v(x_kv), key_valid)
        return self.o(out), weights


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: masked self-attention then a GELU MLP."""

    def __init__(self, d_model: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model), nn.GELU(), nn.Linear(mlp_ratio * d_model, d_model)
        )

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, key_valid)[0]
        return x + self.mlp(self.norm2(x))


def seeded_init(module: nn.Module, seed: int) -> None:
    """Deterministic initialisation from ``seed``.

    Linear weights are uniform in +-1/sqrt(fan_in), biases zero, LayerNorm
    affine is identity, and free-standing tables (positional rows, mask
    token, per-item scalars) are uniform in +-1/sqrt(width).
    """
    gen = torch.Generator().manual_seed(int(seed))
    norm_params = set()
    for m in module.modules():
        if isinstance(m, nn.LayerNorm):
            norm_params.update(id(p) for p in m.parameters(recurse=False))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if id(p) in norm_params:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            elif p.ndim == 2 and not getattr(p, "_table", False):
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))
            else:
                width = p.shape[-1]
                bound = 1.0 / math.sqrt(width)
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64).mul(2 * bound).sub(bound))


def mark_table(p: nn.Parameter) -> nn.Parameter:
    p._table = True
    return p
