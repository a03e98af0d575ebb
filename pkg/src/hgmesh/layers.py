"""Transformer building blocks shared by the decoder and the point encoder."""

from __future__ import annotations

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


def init_linear(layer: nn.Linear, std: float) -> nn.Linear:
    nn.init.normal_(layer.weight, 0.0, std)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


def rope_angles(positions: torch.Tensor, head_dim: int, theta: float) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables for integer positions of any shape; computed in float64."""
    inv = theta ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = positions.to(torch.float64)[..., None] * inv
    return ang.cos(), ang.sin()


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate (..., n, d) features pairwise (first half, second half)."""
    cos, sin = cos.to(x.dtype), sin.to(x.dtype)
    x1, x2 = x.chunk(2, dim=-1)
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def windowed_causal_attention(q, k, v, window: int | None, block: int = 1024):
    """Softmax attention where query i sees keys j with i - window < j <= i.

    q, k, v: (B, h, L, d). Queries are processed in blocks so memory stays
    O(L * window). Masked scores are -inf, so masked keys get weight exactly 0.
    """
    B, h, L, d = q.shape
    scale = d ** -0.5
    out = []
    for s in range(0, L, block):
        e = min(L, s + block)
        k0 = 0 if window is None else max(0, s - window + 1)
        scores = torch.matmul(q[:, :, s:e], k[:, :, k0:e].transpose(-1, -2)) * scale
        qi = torch.arange(s, e)[:, None]
        kj = torch.arange(k0, e)[None, :]
        mask = kj > qi
        if window is not None:
            mask = mask | (kj <= qi - window)
        scores = scores.masked_fill(mask, float("-inf"))
        out.append(torch.matmul(scores.softmax(dim=-1), v[:, :, k0:e]))
    return torch.cat(out, dim=2)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        std = dim ** -0.5
        self.w_gate = init_linear(nn.Linear(dim, hidden, bias=False), std)
        self.w_up = init_linear(nn.Linear(dim, hidden, bias=False), std)
        self.w_down = init_linear(nn.Linear(hidden, dim, bias=False), std)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class SelfAttention(nn.Module):
    def __init__(self, dim: int, head_dim: int, theta: float | None):
        super().__init__()
        if dim % head_dim:
            raise ValueError(f"channels {dim} not divisible by head channels {head_dim}")
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.theta = theta
        std = dim ** -0.5
        self.to_qkv = init_linear(nn.Linear(dim, 3 * dim, bias=False), std)
        self.to_out = init_linear(nn.Linear(dim, dim, bias=False), std)

    def project(self, x, positions=None):
        q, k, v = rearrange(self.to_qkv(x), "b n (t h d) -> t b h n d", t=3, h=self.heads)
        if self.theta is not None and positions is not None:
            cos, sin = rope_angles(positions, self.head_dim, self.theta)
            cos, sin = cos[:, None], sin[:, None]  # broadcast over heads
            q, k = apply_rope(q, cos, sin), apply_rope(k, cos, sin)
        return q, k, v

    def forward(self, x, positions, window: int | None):
        q, k, v = self.project(x, positions)
        out = windowed_causal_attention(q, k, v, window)
        return self.to_out(rearrange(out, "b h n d -> b n (h d)"))


class CrossAttention(nn.Module):
    """Queries from the stream, keys/values from a context set (no positions, no mask)."""

    def __init__(self, dim: int, head_dim: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = dim // head_dim
        std = dim ** -0.5
        self.to_q = init_linear(nn.Linear(dim, dim, bias=False), std)
        self.to_kv = init_linear(nn.Linear(context_dim, 2 * dim, bias=False), context_dim ** -0.5)
        self.to_out = init_linear(nn.Linear(dim, dim, bias=False), std)

    def context_kv(self, context):
        k, v = rearrange(self.to_kv(context), "b m (t h d) -> t b h m d", t=2, h=self.heads)
        return k, v

    def forward(self, x, context=None, kv=None):
        if kv is None:
            kv = self.context_kv(context)
        k, v = kv
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        scale = q.shape[-1] ** -0.5
        attn = (torch.matmul(q, k.transpose(-1, -2)) * scale).softmax(dim=-1)
        return self.to_out(rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)"))


def rms_norm(dim: int, eps: float = 1e-6) -> nn.RMSNorm:
    return nn.RMSNorm(dim, eps=eps)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
