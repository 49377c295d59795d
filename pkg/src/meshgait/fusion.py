"""Feature fusion, temporal/horizontal pooling, per-part embedding and BNNeck head."""

from __future__ import annotations

import torch
from torch import nn

from meshgait.errors import ConfigError, ShapeError

FUSION_STRATEGIES = ("concat", "add", "attention")


class AttentionGate(nn.Module):
    """out = g * f0 + (1 - g) * f1 with g = sigmoid(per-channel logit), logit initialised to 0."""

    def __init__(self, channels: int):
        super().__init__()
        self.logit = nn.Parameter(torch.zeros(channels))

    def forward(self, f0: torch.Tensor, f1: torch.Tensor) -> torch.Tensor:
        g = torch.sigmoid(self.logit).view(1, 1, -1, 1, 1)
        return g * f0 + (1 - g) * f1


def fused_channels(strategy: str, c0: int, c1: int) -> int:
    if strategy not in FUSION_STRATEGIES:
        raise ConfigError(f"unknown fusion strategy {strategy!r}")
    if strategy == "concat":
        return c0 + c1
    if c0 != c1:
        raise ShapeError(f"{strategy} fusion needs equal channels, got {c0} and {c1}")
    return c0


def fuse(f0: torch.Tensor, f1: torch.Tensor, strategy: str = "concat", gate: AttentionGate | None = None):
    """Combine [B, T, C, H, W] maps; only ``concat`` changes the channel count."""
    if f0.shape[:2] != f1.shape[:2] or f0.shape[3:] != f1.shape[3:]:
        raise ShapeError(f"cannot fuse {tuple(f0.shape)} with {tuple(f1.shape)}")
    fused_channels(strategy, f0.shape[2], f1.shape[2])
    if strategy == "concat":
        return torch.cat([f0, f1], dim=2)
    if strategy == "add":
        return f0 + f1
    if gate is None:
        raise ConfigError("attention fusion needs an AttentionGate")
    return gate(f0, f1)


def temporal_pool(f: torch.Tensor) -> torch.Tensor:
    # max over time: [B, T, C, H, W] -> [B, C, H, W]
    return f.max(dim=1).values


def horizontal_pool(f: torch.Tensor, parts: int = 16) -> torch.Tensor:
    """Split rows into ``parts`` strips; each strip -> max + mean over its cells. [B, C, H, W] -> [B, C, P]."""
    b, c, h, w = f.shape
    if parts < 1 or h % parts:
        raise ConfigError(f"feature height {h} is not divisible into {parts} parts")
    strips = f.reshape(b, c, parts, (h // parts) * w)
    return strips.max(dim=-1).values + strips.mean(dim=-1)


class SeparateFC(nn.Module):
    """Independent linear map per part: [B, C_in, P] -> [B, C_out, P]."""

    def __init__(self, parts: int, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(parts, in_channels, out_channels))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # [P, B, C_in] @ [P, C_in, C_out] -> [P, B, C_out]
        out = torch.bmm(x.permute(2, 0, 1), self.weight)
        return out.permute(1, 2, 0).contiguous()


class BNNeck(nn.Module):
    """Per-part batch norm followed by a bias-free per-part classifier.

    Returns logits [B, num_classes, P]. Batch statistics need more than one
    sample in training mode (torch raises on B=1).
    """

    def __init__(self, parts: int, channels: int, num_classes: int):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("BNNeck needs at least two classes")
        self.parts = parts
        self.bn = nn.BatchNorm1d(channels * parts)
        self.fc = SeparateFC(parts, channels, num_classes)
        nn.init.normal_(self.fc.weight, std=0.01)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        b, c, p = e.shape
        normed = self.bn(e.reshape(b, c * p)).reshape(b, c, p)
        return self.fc(normed)
