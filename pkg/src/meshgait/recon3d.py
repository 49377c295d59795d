"""3D branch: silhouettes -> voxel heatmaps -> joints/markers -> mesh, plus heatmap features.

Heatmaps are laid out [..., K, D, H, W] with K = joints + markers. Keypoint
coordinates are (x, y, z) = (width, height, depth) voxel indices.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from meshgait.backbone import BasicBlock, init_weights, residual_stages
from meshgait.errors import ConfigError, ContractError, ShapeError

HEATMAP_FEATURE_DIMS = (4, 8, 16)
NORMALIZATION_TOL = 1e-3


class HeatmapEstimator(nn.Module):
    """Small strided-conv + upsample network with a fixed output contract.

    [B, T, 1, 64, 44] -> [B, T, K, D, H, W], every keypoint channel a softmax
    over its D*H*W voxels. The last 1x1 conv predicts K*D maps at HxW which
    are unfolded into depth.
    """

    def __init__(
        self,
        num_keypoints: int = 88,
        dims: tuple[int, int, int] = (16, 16, 16),
        channels: Sequence[int] = (16, 32),
        zero_init_final: bool = True,
    ):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.dims = tuple(dims)
        c0, c1 = channels
        self.encoder = nn.Sequential(
            nn.Conv2d(1, c0, 3, padding=1, bias=False),
            nn.BatchNorm2d(c0),
            nn.ReLU(inplace=True),
            BasicBlock(c0, c1, stride=2),
            BasicBlock(c1, c1, stride=2),
        )
        self.refine = nn.Sequential(
            nn.Conv2d(c1, c1, 3, padding=1, bias=False),
            nn.BatchNorm2d(c1),
            nn.ReLU(inplace=True),
        )
        self.final = nn.Conv2d(c1, num_keypoints * self.dims[0], 1)
        init_weights(self)
        if zero_init_final:
            nn.init.zeros_(self.final.weight)
            nn.init.zeros_(self.final.bias)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[2:] != (1, 64, 44):
            raise ShapeError(f"estimate_heatmaps expects [B, T, 1, 64, 44], got {tuple(x.shape)}")
        b, t = x.shape[:2]
        d, h, w = self.dims
        feat = self.encoder(x.reshape(b * t, 1, 64, 44))
        feat = F.interpolate(feat, size=(h, w), mode="bilinear", align_corners=True)
        out = self.final(self.refine(feat))
        return out.reshape(b, t, self.num_keypoints, d, h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return normalize_heatmaps(self.logits(x))


def normalize_heatmaps(logits: torch.Tensor) -> torch.Tensor:
    """Per-channel softmax over the trailing three (voxel) axes."""
    shape = logits.shape
    return torch.softmax(logits.flatten(-3), dim=-1).reshape(shape)


def check_normalized(h: torch.Tensor, tol: float = NORMALIZATION_TOL) -> None:
    sums = h.detach().sum(dim=(-3, -2, -1))
    dev = (sums - 1).abs().max().item() if sums.numel() else 0.0
    if dev > tol:
        raise ContractError(f"heatmap channels must sum to 1 (max deviation {dev:.3g})")


def soft_argmax(h: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Expected voxel coordinate per channel: [..., D, H, W] -> [..., 3] as (x, y, z)."""
    if check:
        check_normalized(h)
    d, hh, w = h.shape[-3:]
    m_x = h.sum(dim=(-3, -2))
    m_y = h.sum(dim=(-3, -1))
    m_z = h.sum(dim=(-2, -1))
    x = (m_x * torch.arange(w, dtype=h.dtype, device=h.device)).sum(-1)
    y = (m_y * torch.arange(hh, dtype=h.dtype, device=h.device)).sum(-1)
    z = (m_z * torch.arange(d, dtype=h.dtype, device=h.device)).sum(-1)
    return torch.stack([x, y, z], dim=-1)


def voxel_index(coords: torch.Tensor, dims: tuple[int, int, int]) -> torch.Tensor:
    """Round half-up and clamp (x, y, z) to the grid; return flat index z*H*W + y*W + x."""
    d, h, w = dims
    c = torch.floor(coords.detach() + 0.5).long()
    x = c[..., 0].clamp(0, w - 1)
    y = c[..., 1].clamp(0, h - 1)
    z = c[..., 2].clamp(0, d - 1)
    return z * h * w + y * w + x


def gather_confidence(h: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Heatmap value at the rounded keypoint voxel: [..., K, D, H, W], [..., K, 3] -> [..., K]."""
    if coords.shape[-1] != 3 or coords.shape[:-1] != h.shape[:-3]:
        raise ShapeError(f"coords {tuple(coords.shape)} do not match heatmaps {tuple(h.shape)}")
    idx = voxel_index(coords, tuple(h.shape[-3:]))
    return torch.gather(h.flatten(-3), -1, idx.unsqueeze(-1)).squeeze(-1)


class CoefficientRegressor(nn.Module):
    """Vertex-from-keypoint coefficient matrix.

    ``adaptive``: a linear map from per-keypoint confidences to a per-sample
    [M, K] matrix. ``static``: one learned [M, K] matrix shared by all samples.
    Both start with every vertex at the keypoint centroid.
    """

    def __init__(self, num_keypoints: int = 88, num_vertices: int = 6890, mode: str = "adaptive"):
        super().__init__()
        if mode not in ("adaptive", "static"):
            raise ConfigError(f"regressor mode must be adaptive or static, got {mode!r}")
        self.mode = mode
        self.num_keypoints = num_keypoints
        self.num_vertices = num_vertices
        if mode == "adaptive":
            self.linear = nn.Linear(num_keypoints, num_vertices * num_keypoints)
            nn.init.zeros_(self.linear.weight)
            nn.init.constant_(self.linear.bias, 1.0 / num_keypoints)
        else:
            self.coef = nn.Parameter(torch.full((num_vertices, num_keypoints), 1.0 / num_keypoints))

    def forward(self, confidence: torch.Tensor | None = None) -> torch.Tensor:
        if self.mode == "static":
            return self.coef
        if confidence is None or confidence.dim() != 2 or confidence.shape[1] != self.num_keypoints:
            got = None if confidence is None else tuple(confidence.shape)
            raise ShapeError(f"confidence must be [N, {self.num_keypoints}], got {got}")
        out = self.linear(confidence)
        return out.reshape(confidence.shape[0], self.num_vertices, self.num_keypoints)


def reconstruct_mesh(coef: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """vertices[v] = sum_k coef[v, k] * coords[k]; coef [N, M, K] or [M, K], coords [N, K, 3]."""
    if coef.shape[-1] != coords.shape[-2]:
        raise ShapeError(f"coef has {coef.shape[-1]} columns but there are {coords.shape[-2]} keypoints")
    if coef.dim() == 3 and coef.shape[0] != coords.shape[0]:
        raise ShapeError(f"coef batch {coef.shape[0]} != keypoint batch {coords.shape[0]}")
    return torch.matmul(coef, coords)


class HeatmapFeatures(nn.Module):
    """Heatmaps [B, T, K, D, H, W] -> F1 [B, T, C_q, H, 11].

    A pointwise Conv3d reduces K to ``feat_dim`` channels and a 3x3x3 Conv3d
    mixes neighbouring voxels (each with BN + ReLU); depth is then folded into
    channels, a (1, W-10) conv projects width to 11, then residual blocks.
    """

    def __init__(
        self,
        num_keypoints: int = 88,
        dims: tuple[int, int, int] = (16, 16, 16),
        feat_dim: int = 8,
        channels: Sequence[int] = (32, 64),
        out_width: int = 11,
        allowed_dims: Sequence[int] = HEATMAP_FEATURE_DIMS,
    ):
        super().__init__()
        if feat_dim not in allowed_dims:
            raise ConfigError(f"heatmap feature dim {feat_dim} not in {tuple(allowed_dims)}")
        d, h, w = dims
        if w < out_width:
            raise ConfigError(f"heatmap width {w} smaller than feature width {out_width}")
        channels = tuple(channels)
        self.out_channels = channels[-1]
        self.conv3d = nn.Sequential(
            nn.Conv3d(num_keypoints, feat_dim, 1, bias=False),
            nn.BatchNorm3d(feat_dim),
            nn.ReLU(inplace=True),
            nn.Conv3d(feat_dim, feat_dim, 3, padding=1, bias=False),
            nn.BatchNorm3d(feat_dim),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(feat_dim * d, channels[0], (1, w - out_width + 1), bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(inplace=True),
        )
        self.stages = residual_stages(channels[0], channels, [1] * len(channels))
        init_weights(self)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, t, k, d, hh, w = h.shape
        x = self.conv3d(h.reshape(b * t, k, d, hh, w))
        x = x.reshape(b * t, -1, hh, w)
        x = self.stages(self.project(x))
        return x.reshape(b, t, *x.shape[1:])
