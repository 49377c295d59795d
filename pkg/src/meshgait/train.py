"""Training loop: P x K batches, four-term loss, SGD with step decay, CSV log, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from meshgait.config import RunConfig
from meshgait.dataset import Batch, GaitDataset, sample_batch
from meshgait.errors import ConfigError, MeshGaitError
from meshgait.losses import ce_loss, joint_loss, mesh_loss, total_loss, triplet_loss
from meshgait.metrics import EvalReport, evaluate
from meshgait.model import MeshGait, load_checkpoint, parameter_report, save_checkpoint

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step", "triplet", "ce", "joint", "mesh",
    "w_triplet", "w_ce", "w_joint", "w_mesh", "total", "lr", "valid_triplets",
)


class NonFiniteLoss(MeshGaitError):
    pass


@dataclass
class TrainResult:
    model: MeshGait
    report: EvalReport | None
    log_path: Path
    checkpoint: Path
    records: list[dict]


def lr_at(cfg: RunConfig, step: int) -> float:
    decays = sum(1 for m in cfg.optim.milestones if step >= m)
    return cfg.optim.lr * cfg.optim.gamma**decays


def make_optimizer(cfg: RunConfig, model: torch.nn.Module) -> torch.optim.Optimizer:
    o = cfg.optim
    if o.name == "sgd":
        return torch.optim.SGD(model.parameters(), lr=o.lr, momentum=o.momentum, weight_decay=o.weight_decay)
    if o.name == "adam":
        # the fused kernel makes the update of the large coefficient regressor several times cheaper
        try:
            return torch.optim.Adam(model.parameters(), lr=o.lr, weight_decay=o.weight_decay, fused=True)
        except (RuntimeError, TypeError):
            return torch.optim.Adam(model.parameters(), lr=o.lr, weight_decay=o.weight_decay)
    raise ConfigError(f"unknown optimizer {o.name!r}")


def step_losses(model: MeshGait, batch: Batch, labels: torch.Tensor, mesh_frames):
    """Forward one batch and return (total, record)."""
    w = model.cfg.loss
    want_mesh = model.regressor is not None and w.mesh > 0
    out = model(torch.from_numpy(batch.frames), compute_mesh=want_mesh, mesh_frames=mesh_frames)
    gt_mask = torch.from_numpy(batch.gt_mask)
    terms = {}
    terms["triplet"], n_trip = triplet_loss(out.embeddings, labels, w.margin)
    terms["ce"] = ce_loss(out.logits, labels)
    gt_kp = torch.from_numpy(np.concatenate([batch.joints, batch.markers], axis=2))
    terms["joint"], _ = joint_loss(out.keypoints, gt_kp, gt_mask)
    if out.mesh is not None:
        gt_mesh = torch.from_numpy(batch.mesh if mesh_frames is None else batch.mesh[:, mesh_frames])
        terms["mesh"], _ = mesh_loss(out.mesh, gt_mesh, gt_mask)
    total, record = total_loss(terms, w)
    record["valid_triplets"] = n_trip
    return total, record


def _dump_batch(out_dir: Path, step: int, batch: Batch, record: dict) -> Path:
    path = out_dir / f"nonfinite_step{step:06d}.json"
    path.write_text(
        json.dumps(
            {"step": step, "seq_ids": batch.seq_ids, "frame_index": batch.frame_index.tolist(), "losses": record},
            indent=2,
        )
    )
    return path


def _prune(ckpt_dir: Path, keep: int) -> None:
    ckpts = sorted(ckpt_dir.glob("step_*.ckpt"))
    for old in ckpts[:-keep] if keep > 0 else []:
        old.unlink()


def prepare_data(cfg: RunConfig, dataset: GaitDataset | None = None):
    full = dataset if dataset is not None else GaitDataset.from_root(cfg.data.root)
    if cfg.data.holdout > 0:
        train_ds, held = full.split_holdout(cfg.data.holdout)
        if len(held) == 0:
            held = None
    else:
        train_ds, held = full, None
    return train_ds, held


def train(
    cfg: RunConfig,
    resume: str | Path | None = None,
    dataset: GaitDataset | None = None,
    evaluate_at_end: bool = True,
    keep_checkpoints: int = 2,
) -> TrainResult:
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    torch.manual_seed(cfg.seed)

    train_ds, held = prepare_data(cfg, dataset)
    classes = train_ds.identities
    label_of = {ident: i for i, ident in enumerate(classes)}
    model_cfg = replace(cfg.model, num_classes=len(classes))
    model = MeshGait(model_cfg)
    optimizer = make_optimizer(cfg, model)
    start = 0
    if resume is not None:
        model, header = load_checkpoint(resume, model, optimizer)
        start = int(header["step"])
        log.info("resumed from %s at step %d", resume, start)
    (out_dir / "config.txt").write_text(replace(cfg, model=model_cfg).to_text())
    log.info("parameters: %s", parameter_report(model))

    log_path = out_dir / "train_log.csv"
    fresh_log = start == 0 or not log_path.exists()
    if not fresh_log:
        _truncate_log(log_path, start)
    fh = open(log_path, "w" if fresh_log else "a", newline="")
    writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
    if fresh_log:
        fh.write(f"# fingerprint: {model_cfg.fingerprint()}\n")
        writer.writeheader()

    records: list[dict] = []
    last_ckpt = None
    t_fixed = cfg.batch.T_fixed
    try:
        for step in range(start, cfg.max_steps):
            rng = np.random.default_rng([cfg.seed, step])
            batch = sample_batch(rng, cfg.batch, train_ds)
            labels = torch.tensor([label_of[i] for i in batch.identities])
            mesh_frames = None
            if 0 < cfg.train.mesh_frames < t_fixed:
                mesh_frames = sorted(int(i) for i in rng.choice(t_fixed, cfg.train.mesh_frames, replace=False))
            lr = lr_at(cfg, step)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model.train()
            total, record = step_losses(model, batch, labels, mesh_frames)
            record.update(step=step + 1, lr=lr)
            if not math.isfinite(record["total"]):
                dump = _dump_batch(out_dir, step + 1, batch, record)
                raise NonFiniteLoss(f"non-finite loss at step {step + 1}; batch dumped to {dump}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()

            writer.writerow(record)
            records.append(record)
            if (step + 1) % cfg.train.log_interval == 0:
                fh.flush()
                log.info("step %d total %.4f (trip %.4f ce %.4f joint %.4f mesh %.4f)", step + 1,
                         record["total"], record["triplet"], record["ce"], record["joint"], record["mesh"])
            if (step + 1) % cfg.eval_interval == 0:
                last_ckpt = ckpt_dir / f"step_{step + 1:06d}.ckpt"
                save_checkpoint(last_ckpt, model, optimizer, step + 1, {"identities": classes})
                _prune(ckpt_dir, keep_checkpoints)
    finally:
        fh.close()

    final = out_dir / "final.ckpt"
    save_checkpoint(final, model, optimizer, cfg.max_steps, {"identities": classes})
    report = None
    if evaluate_at_end:
        report = final_eval(cfg, model, train_ds, held)
        report.write(out_dir / "eval.csv")
        log.info("eval: rank1 %.2f rank5 %.2f mAP %.2f mINP %.2f", report.rank1, report.rank5, report.mAP, report.mINP)
    return TrainResult(model, report, log_path, final, records)


def final_eval(cfg: RunConfig, model: MeshGait, train_ds: GaitDataset, held: GaitDataset | None) -> EvalReport:
    max_frames = cfg.eval.max_frames or None
    if held is None:
        return evaluate(model, train_ds, cfg.eval.protocol, cfg.eval.seed, max_frames=max_frames)
    # held-out sequences probe a gallery made of the training sequences
    both = GaitDataset(train_ds.sequences + held.sequences, train_ds.ground_truth + held.ground_truth)
    probes = np.arange(len(train_ds), len(both))
    return evaluate(model, both, cfg.eval.protocol, cfg.eval.seed, probe_indices=probes, max_frames=max_frames)


def _truncate_log(path: Path, step: int) -> None:
    """Drop rows past ``step`` so a resumed run continues the log without duplicates."""
    lines = path.read_text().splitlines(keepends=True)
    kept = []
    for line in lines:
        head = line.split(",", 1)[0]
        if head.isdigit() and int(head) > step:
            continue
        kept.append(line)
    path.write_text("".join(kept))
