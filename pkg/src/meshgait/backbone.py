"""Residual 2D encoder for silhouette frames (the 2D feature branch)."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from meshgait.errors import ConfigError, ShapeError

# channel plans; the first two stages downsample by 2, later ones keep 16x11
PRESETS: dict[str, tuple[int, ...]] = {
    "tiny": (16, 16),
    "base": (32, 64),
    "deepgaitv2": (64, 128, 256),
}

RESIDUAL_INIT_SCALE = 0.1


def preset_channels(preset: str) -> tuple[int, ...]:
    try:
        return PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {preset!r}; choose from {sorted(PRESETS)}") from None


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def init_weights(module: nn.Module) -> None:
    """He fan-in init for convs; residual branches start near identity."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d, nn.BatchNorm1d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    for m in module.modules():
        if isinstance(m, BasicBlock):
            nn.init.constant_(m.bn2.weight, RESIDUAL_INIT_SCALE)


def residual_stages(in_ch: int, channels: Sequence[int], strides: Sequence[int]) -> nn.Sequential:
    layers, prev = [], in_ch
    for ch, s in zip(channels, strides):
        layers.append(BasicBlock(prev, ch, stride=s))
        prev = ch
    return nn.Sequential(*layers)


class Backbone2D(nn.Module):
    """Per-frame encoder: [B, T, 1, 64, 44] -> F0 [B, T, C_p, 16, 11].

    Time is folded into the batch axis, so frames never interact.
    """

    def __init__(self, channels: Sequence[int] = PRESETS["base"], in_channels: int = 1):
        super().__init__()
        channels = tuple(channels)
        if len(channels) < 2:
            raise ConfigError("backbone needs at least two stages (two stride-2 downsamplings)")
        self.out_channels = channels[-1]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, channels[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(channels[0]),
            nn.ReLU(inplace=True),
        )
        strides = [2, 2] + [1] * (len(channels) - 2)
        self.stages = residual_stages(channels[0], channels, strides)
        init_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[2:] != (1, 64, 44):
            raise ShapeError(f"encode2d expects [B, T, 1, 64, 44], got {tuple(x.shape)}")
        b, t = x.shape[:2]
        out = self.stages(self.stem(x.reshape(b * t, *x.shape[2:])))
        return out.reshape(b, t, *out.shape[1:])
