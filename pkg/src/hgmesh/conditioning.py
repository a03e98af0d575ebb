"""Point-cloud and scalar encoders producing the cross-attention context."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .layers import CrossAttention, SwiGLU, init_linear, rms_norm


class ConditioningError(ValueError):
    pass


class _LatentLayer(nn.Module):
    """Latents read the point set, then mix among themselves."""

    def __init__(self, dim, head_dim, ffn_hidden):
        super().__init__()
        self.norm_latent = rms_norm(dim)
        self.norm_points = rms_norm(dim)
        self.read = CrossAttention(dim, head_dim)
        self.norm_self = rms_norm(dim)
        self.mix = CrossAttention(dim, head_dim)
        self.norm_ffn = rms_norm(dim)
        self.ffn = SwiGLU(dim, ffn_hidden)

    def forward(self, latents, points):
        latents = latents + self.read(self.norm_latent(latents), self.norm_points(points))
        h = self.norm_self(latents)
        latents = latents + self.mix(h, h)
        return latents + self.ffn(self.norm_ffn(latents))


def _scalar_mlp(dim):
    return nn.Sequential(init_linear(nn.Linear(1, dim), 1.0), nn.SiLU(), init_linear(nn.Linear(dim, dim), dim ** -0.5))


class ConditioningEncoder(nn.Module):
    """Learned queries over (position, normal) point features plus two scalar MLPs."""

    def __init__(self, dim: int, head_dim: int, ffn_hidden: int, num_latents: int = 64,
                 depth: int = 2, point_features: int = 6):
        super().__init__()
        self.num_latents = num_latents
        self.lift = init_linear(nn.Linear(point_features, dim), point_features ** -0.5)
        self.latents = nn.Parameter(torch.randn(num_latents, dim) * dim ** -0.5)
        self.layers = nn.ModuleList([_LatentLayer(dim, head_dim, ffn_hidden) for _ in range(depth)])
        self.norm_out = rms_norm(dim)
        self.face_mlp = _scalar_mlp(dim)
        self.quad_mlp = _scalar_mlp(dim)

    def encode_pointcloud(self, features: torch.Tensor) -> torch.Tensor:
        """(B, n, 6) point features -> (B, K, dim) embeddings."""
        if features.ndim == 2:
            features = features[None]
        if features.shape[1] == 0:
            raise ConditioningError("empty point cloud")
        points = self.lift(features)
        lat = self.latents.to(points.dtype).expand(points.shape[0], -1, -1)
        for layer in self.layers:
            lat = layer(lat, points)
        return self.norm_out(lat)

    def encode_scalars(self, face_count, quad_ratio) -> torch.Tensor:
        """Per-sample face count and quad ratio -> (B, 2, dim)."""
        dtype = self.latents.dtype
        fc = torch.as_tensor(face_count, dtype=torch.float64).reshape(-1)
        qr = torch.as_tensor(quad_ratio, dtype=torch.float64).reshape(-1)
        if torch.any(fc < 1):
            raise ConditioningError("face count must be >= 1")
        if torch.any((qr < 0) | (qr > 1)):
            raise ConditioningError("quad ratio must lie in [0, 1]")
        face = self.face_mlp(face_count_feature(fc).to(dtype)[:, None])
        quad = self.quad_mlp(qr.to(dtype)[:, None])
        return torch.stack([face, quad], dim=1)

    def forward(self, features, face_count, quad_ratio) -> torch.Tensor:
        return bundle(self.encode_pointcloud(features), self.encode_scalars(face_count, quad_ratio))


def face_count_feature(face_count) -> torch.Tensor:
    return torch.log10(torch.as_tensor(face_count, dtype=torch.float64))


def bundle(point_emb: torch.Tensor, scalar_embs: torch.Tensor) -> torch.Tensor:
    """Concatenate to (B, K + 2, dim): point embeddings, then face count, then quad ratio."""
    if point_emb.shape[-1] != scalar_embs.shape[-1]:
        raise ConditioningError(
            f"channel mismatch: points {point_emb.shape[-1]} vs scalars {scalar_embs.shape[-1]}")
    if point_emb.ndim == 2:
        point_emb = point_emb[None]
    if scalar_embs.ndim == 2:
        scalar_embs = scalar_embs[None]
    return torch.cat([point_emb, scalar_embs], dim=1)


def unbundle(cond: torch.Tensor, num_latents: int) -> tuple[torch.Tensor, torch.Tensor]:
    return cond[:, :num_latents], cond[:, num_latents:]


def point_features(cloud) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(cloud.features()))

