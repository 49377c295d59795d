"""Mesh-Gait: gait recognition from silhouettes fused with reconstructed 3D heatmaps."""

from meshgait.errors import (
    ConfigError,
    ContractError,
    FormatError,
    LoadError,
    SamplingError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "FormatError",
    "LoadError",
    "SamplingError",
    "ShapeError",
]
