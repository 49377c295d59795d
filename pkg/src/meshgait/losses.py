"""Training objectives: batch-all triplet, per-part cross-entropy, keypoint MSE, mesh L1."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from meshgait.errors import ConfigError, ShapeError

TERMS = ("triplet", "ce", "joint", "mesh")


@dataclass(frozen=True)
class LossWeights:
    triplet: float = 1.0
    ce: float = 1.0
    joint: float = 1.0
    mesh: float = 1.0
    margin: float = 0.2

    def validate(self) -> None:
        values = [self.triplet, self.ce, self.joint, self.mesh]
        if any(v < 0 for v in values) or self.margin < 0:
            raise ConfigError(f"loss weights and margin must be >= 0: {asdict(self)}")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive")

    def of(self, term: str) -> float:
        return getattr(self, term)


def pairwise_euclidean(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """[P, B, C] -> [P, B, B] Euclidean distances (clamped away from 0 for a finite gradient)."""
    diff = x.unsqueeze(2) - x.unsqueeze(1)
    return diff.pow(2).sum(-1).clamp_min(eps).sqrt()


def triplet_loss(e: torch.Tensor, labels: torch.Tensor, margin: float = 0.2) -> tuple[torch.Tensor, int]:
    """Batch-all hinge on per-part embeddings ``e`` [B, C, P].

    Averages max(d(a,p) - d(a,n) + margin, 0) over every valid triplet and
    every part, zero-loss triplets included. Returns (loss, number of valid
    triplets); with no valid triplet the loss is 0 and the count is 0.
    """
    labels = labels.reshape(-1)
    if e.dim() != 3 or e.shape[0] != labels.shape[0]:
        raise ShapeError(f"embeddings {tuple(e.shape)} do not match {labels.shape[0]} labels")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    valid = pos.unsqueeze(2) & neg.unsqueeze(1)  # [a, p, n]
    count = int(valid.sum())
    if count == 0:
        return e.sum() * 0.0, 0
    dist = pairwise_euclidean(e.permute(2, 0, 1))
    hinge = F.relu(dist.unsqueeze(3) - dist.unsqueeze(2) + margin)  # [P, a, p, n]
    return hinge[:, valid].mean(), count


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax over classes per part, mean NLL over batch and parts. logits [B, K, P]."""
    num_classes = logits.shape[1]
    labels = labels.reshape(-1).long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    target = labels.unsqueeze(1).expand(-1, logits.shape[2])
    return F.cross_entropy(logits, target)


def _gated(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None, name: str):
    if pred.shape != gt.shape:
        raise ShapeError(f"{name}: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    if mask is None:
        return pred, gt, pred.shape[0]
    mask = mask.reshape(-1).bool()
    n = int(mask.sum())
    return pred[mask], gt[mask], n


def joint_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
    """Mean squared error over all coordinates of samples with ground truth; returns (loss, n_samples)."""
    p, g, n = _gated(pred, gt, mask, "joint_loss")
    if n == 0:
        return pred.sum() * 0.0, 0
    return F.mse_loss(p, g), n


def mesh_loss(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor | None = None) -> tuple[torch.Tensor, int]:
    """Mean absolute error over all vertex coordinates of samples with ground truth."""
    p, g, n = _gated(pred, gt, mask, "mesh_loss")
    if n == 0:
        return pred.sum() * 0.0, 0
    return F.l1_loss(p, g), n


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the available terms, plus a flat record of raw and weighted values."""
    total = None
    record: dict[str, float] = {}
    for name in TERMS:
        if name not in terms:
            record[name] = 0.0
            record[f"w_{name}"] = 0.0
            continue
        weighted = weights.of(name) * terms[name]
        total = weighted if total is None else total + weighted
        record[name] = float(terms[name].detach())
        record[f"w_{name}"] = float(weighted.detach())
    if total is None:
        total = torch.zeros(())
    record["total"] = float(total.detach())
    return total, record
