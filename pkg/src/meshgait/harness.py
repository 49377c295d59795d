"""Reduced-budget ablation sweeps and the mesh-head inference benchmark."""

from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from meshgait.config import RunConfig
from meshgait.dataset import GaitDataset
from meshgait.errors import ConfigError
from meshgait.model import MeshGait

log = logging.getLogger(__name__)

ABLATION_BUDGET = 0.2
METRIC_COLUMNS = ("R-1", "R-5", "mAP", "mINP")

# axis -> (leading columns, [(row labels, model overrides)])
AXES: dict[str, tuple[tuple[str, ...], list[tuple[tuple[str, ...], dict]]]] = {
    "fusion": (
        ("Fusion Strategy",),
        [
            (("Attention",), {"fusion": "attention"}),
            (("Add",), {"fusion": "add"}),
            (("Concatenate",), {"fusion": "concat"}),
        ],
    ),
    "representation": (
        ("Heatmap", "joint", "mesh"),
        [
            (("yes", "yes", "no"), {"enable_mesh_branch": False}),
            (("yes", "yes", "yes"), {"enable_mesh_branch": True}),
        ],
    ),
    "featdim": (
        ("Feature Dimension",),
        [((str(d),), {"heatmap_feat_dim": d}) for d in (4, 8, 16)],
    ),
}


@dataclass
class AblationRow:
    labels: tuple[str, ...]
    metrics: tuple[float, float, float, float]
    steps: int
    fingerprint: str


def ablation_settings(axis: str):
    if axis not in AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    return AXES[axis]


def ablate(
    cfg: RunConfig,
    axis: str,
    out_dir: str | Path | None = None,
    budget: float = ABLATION_BUDGET,
    dataset: GaitDataset | None = None,
) -> tuple[Path, list[AblationRow]]:
    """Train one reduced run per setting on ``axis`` and write ``ablation_<axis>.csv``."""
    from meshgait.train import train

    columns, settings = ablation_settings(axis)
    if not 0 < budget <= 1:
        raise ConfigError(f"ablation budget must lie in (0, 1], got {budget}")
    cfg.validate()
    steps = max(1, int(round(cfg.max_steps * budget)))
    out_dir = Path(out_dir or Path(cfg.output_dir) / f"ablate_{axis}")
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = GaitDataset.from_root(cfg.data.root)

    rows = []
    for labels, changes in settings:
        name = "_".join(labels).lower()
        run = replace(
            cfg,
            model=replace(cfg.model, **changes),
            max_steps=steps,
            eval_interval=steps,
            output_dir=str(out_dir / name),
        )
        log.info("ablation %s=%s: %d steps", axis, name, steps)
        result = train(run, dataset=dataset, keep_checkpoints=1)
        r = result.report
        rows.append(AblationRow(labels, (r.rank1, r.rank5, r.mAP, r.mINP), steps, r.fingerprint))

    path = out_dir / f"ablation_{axis}.csv"
    path.write_text(ablation_csv(columns, rows, cfg.model.fingerprint()))
    return path, rows


def ablation_csv(columns, rows: list[AblationRow], fingerprint: str) -> str:
    buf = io.StringIO()
    buf.write(f"# fingerprint: {fingerprint}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*columns, *METRIC_COLUMNS, "steps", "run_fingerprint"])
    for row in rows:
        writer.writerow([*row.labels, *(f"{m:.2f}" for m in row.metrics), row.steps, row.fingerprint])
    return buf.getvalue()


@dataclass
class BenchReport:
    n_sequences: int
    frames: int
    runs: int
    mesh_on: float  # median seconds per sequence
    mesh_off: float
    fingerprint: str

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# fingerprint: {self.fingerprint}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n_sequences", "frames", "runs", "mesh_on_s_per_seq", "mesh_off_s_per_seq", "speedup"])
        speedup = self.mesh_on / self.mesh_off if self.mesh_off > 0 else float("nan")
        writer.writerow([self.n_sequences, self.frames, self.runs, f"{self.mesh_on:.6f}", f"{self.mesh_off:.6f}", f"{speedup:.3f}"])
        return buf.getvalue()


@torch.no_grad()
def bench(
    model: MeshGait,
    dataset: GaitDataset,
    n: int = 100,
    runs: int = 5,
    max_frames: int | None = None,
) -> BenchReport:
    """Median per-sequence eval-mode forward time with and without the mesh head.

    Sequences are reused cyclically when ``n`` exceeds the dataset. One
    untimed pass per mode warms up allocator and kernels; timed passes
    alternate between the modes so drift affects both equally.
    """
    if n < 1:
        raise ConfigError("bench needs n >= 1 sequences")
    if runs < 5:
        raise ConfigError("bench needs at least 5 timed runs")
    if len(dataset) == 0:
        raise ConfigError("bench needs a non-empty dataset")
    if model.regressor is None:
        raise ConfigError("bench compares mesh head on/off; the model has no mesh branch")
    model.eval()
    inputs = []
    for i in range(n):
        frames = dataset.sequences[i % len(dataset)].frames
        if max_frames:
            frames = frames[:max_frames]
        inputs.append(torch.from_numpy(np.array(frames, dtype=np.float32))[None])

    def one_pass(mesh: bool) -> float:
        start = time.perf_counter()
        for x in inputs:
            model(x, compute_mesh=mesh)
        return (time.perf_counter() - start) / n

    one_pass(True)
    one_pass(False)
    on, off = [], []
    for _ in range(runs):
        on.append(one_pass(True))
        off.append(one_pass(False))
    frames = int(np.mean([x.shape[1] for x in inputs]))
    return BenchReport(n, frames, runs, statistics.median(on), statistics.median(off), model.cfg.fingerprint())
