"""The composed Mesh-Gait network, its configuration, and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from meshgait.backbone import Backbone2D, preset_channels
from meshgait.errors import ConfigError, FormatError, LoadError
from meshgait.fusion import BNNeck, AttentionGate, SeparateFC, fuse, fused_channels, horizontal_pool, temporal_pool
from meshgait.losses import LossWeights
from meshgait.recon3d import (
    CoefficientRegressor,
    HeatmapEstimator,
    HeatmapFeatures,
    gather_confidence,
    reconstruct_mesh,
    soft_argmax,
)

FEATURE_HEIGHT = 16


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "base"
    heatmap_dims: tuple[int, int, int] = (16, 16, 16)
    num_joints: int = 24
    num_markers: int = 64
    num_vertices: int = 6890
    heatmap_feat_dim: int = 8
    fusion: str = "concat"
    parts: int = 16
    embed_dim: int = 256
    regressor: str = "adaptive"
    loss: LossWeights = field(default_factory=LossWeights)
    enable_mesh_branch: bool = True
    num_classes: int = 16
    estimator_channels: tuple[int, int] = (16, 32)
    # fraction of the identity-loss gradient let through into the heatmaps (0 = detached)
    heatmap_grad_scale: float = 0.0

    @property
    def num_keypoints(self) -> int:
        return self.num_joints + self.num_markers

    def validate(self) -> None:
        preset_channels(self.backbone)
        if len(self.heatmap_dims) != 3 or min(self.heatmap_dims) < 1:
            raise ConfigError(f"heatmap_dims must be three positive ints, got {self.heatmap_dims}")
        if self.heatmap_dims[1] != FEATURE_HEIGHT:
            raise ConfigError(f"heatmap height must be {FEATURE_HEIGHT} to align F1 with F0")
        if self.parts < 1 or FEATURE_HEIGHT % self.parts:
            raise ConfigError(f"parts={self.parts} must divide the feature height {FEATURE_HEIGHT}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.num_joints < 1 or self.num_markers < 0 or self.num_vertices < 1 or self.embed_dim < 1:
            raise ConfigError("keypoint/vertex/embedding sizes must be positive")
        if self.regressor not in ("adaptive", "static"):
            raise ConfigError(f"regressor must be adaptive or static, got {self.regressor!r}")
        if not 0.0 <= self.heatmap_grad_scale <= 1.0:
            raise ConfigError("heatmap_grad_scale must lie in [0, 1]")
        self.loss.validate()

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        if "loss" in data and isinstance(data["loss"], dict):
            data["loss"] = LossWeights(**data["loss"])
        for name in ("heatmap_dims", "estimator_channels"):
            if name in data:
                data[name] = tuple(data[name])
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_fingerprint(data: dict) -> str:
    """sha256 over canonical JSON (sorted keys, no whitespace): independent of field order."""
    canon = json.dumps(_jsonable(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class ForwardOutput:
    embeddings: torch.Tensor  # [B, C_e, P]
    logits: torch.Tensor  # [B, num_classes, P]
    keypoints: torch.Tensor  # [B, T, J+V, 3]
    confidence: torch.Tensor  # [B, T, J+V]
    mesh: torch.Tensor | None = None  # [B, T', M, 3]
    heatmaps: torch.Tensor | None = None


class MeshGait(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        channels = preset_channels(cfg.backbone)
        k = cfg.num_keypoints
        self.backbone = Backbone2D(channels)
        self.estimator = HeatmapEstimator(k, cfg.heatmap_dims, cfg.estimator_channels)
        self.heatmap_features = HeatmapFeatures(k, cfg.heatmap_dims, cfg.heatmap_feat_dim, channels)
        self.regressor = (
            CoefficientRegressor(k, cfg.num_vertices, cfg.regressor) if cfg.enable_mesh_branch else None
        )
        fused = fused_channels(cfg.fusion, self.backbone.out_channels, self.heatmap_features.out_channels)
        self.gate = AttentionGate(fused) if cfg.fusion == "attention" else None
        self.embed = SeparateFC(cfg.parts, fused, cfg.embed_dim)
        self.head = BNNeck(cfg.parts, cfg.embed_dim, cfg.num_classes)

    def reconstruct(
        self, heatmaps: torch.Tensor, coords: torch.Tensor, confidence: torch.Tensor, frames: Sequence[int] | None = None
    ) -> torch.Tensor:
        """Mesh vertices for (a subset of) frames: [B, T', M, 3]."""
        if self.regressor is None:
            raise ConfigError("mesh branch is disabled in this model")
        if frames is not None:
            idx = torch.as_tensor(list(frames), dtype=torch.long)
            coords, confidence = coords[:, idx], confidence[:, idx]
        b, t, k = confidence.shape
        coef = self.regressor(confidence.reshape(b * t, k))
        mesh = reconstruct_mesh(coef, coords.reshape(b * t, k, 3))
        return mesh.reshape(b, t, -1, 3)

    def forward(
        self,
        x: torch.Tensor,
        compute_mesh: bool = True,
        mesh_frames: Sequence[int] | None = None,
        keep_heatmaps: bool = False,
    ) -> ForwardOutput:
        f0 = self.backbone(x)
        h = self.estimator(x)
        coords = soft_argmax(h, check=False)
        confidence = gather_confidence(h, coords)
        mesh = None
        if compute_mesh and self.regressor is not None:
            mesh = self.reconstruct(h, coords, confidence, mesh_frames)
        f1 = self.heatmap_features(scale_grad(h, self.cfg.heatmap_grad_scale))
        f2 = fuse(f0, f1, self.cfg.fusion, self.gate)
        f4 = horizontal_pool(temporal_pool(f2), self.cfg.parts)
        e = self.embed(f4)
        logits = self.head(e)
        return ForwardOutput(e, logits, coords, confidence, mesh, h if keep_heatmaps else None)


def scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Identity in the forward pass; multiplies the backward gradient by ``scale``."""
    if scale == 1.0:
        return x
    if scale == 0.0:
        return x.detach()
    return x * scale + x.detach() * (1.0 - scale)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def regressor_parameter_count(cfg: ModelConfig) -> int:
    if not cfg.enable_mesh_branch:
        return 0
    k, m = cfg.num_keypoints, cfg.num_vertices
    return k * m * k + m * k if cfg.regressor == "adaptive" else m * k


def parameter_report(model: MeshGait) -> dict[str, int]:
    report = {name: count_parameters(child) for name, child in model.named_children() if child is not None}
    report["total"] = count_parameters(model)
    return report


@torch.no_grad()
def extract_embeddings(model: MeshGait, sequences, max_frames: int | None = None) -> np.ndarray:
    """Eval-mode embeddings [N, C_e, P] for a list of SilhouetteSequence (mesh head skipped)."""
    model.eval()
    out = []
    for seq in sequences:
        frames = seq.frames if max_frames is None else seq.frames[:max_frames]
        x = torch.from_numpy(np.array(frames, dtype=np.float32))[None]
        out.append(model(x, compute_mesh=False).embeddings[0].numpy())
    return np.stack(out) if out else np.zeros((0, model.cfg.embed_dim, model.cfg.parts), np.float32)


# ---------------------------------------------------------------- checkpoints
#
# Container layout (little-endian):
#   b"MGCK" | u32 version | u64 header_len | header JSON (utf-8)
#   | tensor payload (row-major, per-tensor dtype) | sha256 of all preceding bytes (32 bytes)
# The header lists every tensor as {name, dtype, shape, offset, nbytes}; offsets
# are relative to the payload start. Model tensors are "model/<key>",
# optimizer tensors "optim/<param index>/<key>".

CKPT_MAGIC = b"MGCK"
CKPT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8", torch.int32: "<i4", torch.bool: "|b1"}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


class FingerprintMismatch(ConfigError):
    pass


def _tensor_bytes(t: torch.Tensor) -> bytes:
    t = t.detach().cpu().contiguous()
    return t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()


def save_checkpoint(
    path: str | os.PathLike,
    model: MeshGait,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    entries: list[tuple[str, torch.Tensor]] = [(f"model/{k}", v) for k, v in model.state_dict().items()]
    optim_meta = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        optim_meta = {"param_groups": sd["param_groups"], "scalars": {}}
        for idx, state in sd["state"].items():
            for key, val in state.items():
                if torch.is_tensor(val):
                    entries.append((f"optim/{idx}/{key}", val))
                else:
                    optim_meta["scalars"][f"{idx}/{key}"] = val

    tensors, offset = [], 0
    for name, t in entries:
        code = _DTYPES.get(t.dtype)
        if code is None:
            raise FormatError(f"cannot store {name} of dtype {t.dtype}")
        nbytes = t.numel() * t.element_size()
        tensors.append({"name": name, "dtype": code, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "fingerprint": model.cfg.fingerprint(),
        "config": model.cfg.to_dict(),
        "step": int(step),
        "optimizer": optim_meta,
        "extra": extra or {},
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    digest = hashlib.sha256()
    with open(tmp, "wb") as fh:
        for chunk in (CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(head)), head):
            digest.update(chunk)
            fh.write(chunk)
        for _, t in entries:
            raw = _tensor_bytes(t)
            digest.update(raw)
            fh.write(raw)
        fh.write(digest.digest())
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: checkpoint not found")
    buf = path.read_bytes()
    if len(buf) < 48 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a Mesh-Gait checkpoint")
    body, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError(f"{path}: checksum mismatch (corrupt checkpoint)")
    version, head_len = struct.unpack_from("<IQ", body, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    header = json.loads(body[start : start + head_len])
    payload = memoryview(body)[start + head_len :]
    tensors = {}
    for meta in header["tensors"]:
        raw = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"])
        tensors[meta["name"]] = torch.from_numpy(arr.copy()).to(_TORCH_DTYPES[meta["dtype"]])
    return header, tensors


def load_checkpoint(
    path: str | os.PathLike,
    model: MeshGait | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    allow_mismatch: bool = False,
) -> tuple[MeshGait, dict]:
    """Restore a model (built from the stored config when ``model`` is None) and optimizer state.

    Returns (model, header). Refuses a model whose config fingerprint differs
    unless ``allow_mismatch``.
    """
    header, tensors = read_checkpoint(path)
    if model is None:
        model = MeshGait(ModelConfig.from_dict(header["config"]))
    elif model.cfg.fingerprint() != header["fingerprint"] and not allow_mismatch:
        raise FingerprintMismatch(
            f"{path}: config fingerprint {header['fingerprint'][:12]} does not match model "
            f"{model.cfg.fingerprint()[:12]}"
        )
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state, strict=not allow_mismatch)
    if optimizer is not None and header.get("optimizer"):
        meta = header["optimizer"]
        st: dict[int, dict] = {}
        for name, t in tensors.items():
            if name.startswith("optim/"):
                _, idx, key = name.split("/", 2)
                st.setdefault(int(idx), {})[key] = t
        for name, val in meta["scalars"].items():
            idx, key = name.split("/", 1)
            st.setdefault(int(idx), {})[key] = val
        optimizer.load_state_dict({"state": st, "param_groups": meta["param_groups"]})
    return model, header


def with_overrides(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
