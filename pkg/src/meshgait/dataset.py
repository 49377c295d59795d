"""Silhouette sequences with paired 3D ground truth: loading, synthesis, batching.

On-disk layout::

    root/<identity>/<covariate>/<view>/<seq>/frame_%04d.png
                                           [joints.mg3d markers.mg3d mesh.mg3d]

Ground-truth coordinates live in the heatmap voxel cube ``[0, D-1]^3`` with
axis order (x, y, z) = (width, height, depth).
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from meshgait import mg3d
from meshgait.errors import ConfigError, FormatError, LoadError, SamplingError

log = logging.getLogger(__name__)

SIL_HEIGHT = 64
SIL_WIDTH = 44
NUM_JOINTS = 24
NUM_MARKERS = 64
NUM_VERTICES = 6890
CUBE_SIZE = 16

SIDECARS = ("joints", "markers", "mesh")


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SilhouetteSequence:
    frames: np.ndarray  # [T, 1, 64, 44] float32 in {0, 1}
    seq_id: str
    identity: int
    view: str = "000"
    covariate: str = "nm"

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1:] != (1, SIL_HEIGHT, SIL_WIDTH):
            raise FormatError(f"{self.seq_id}: frames must be [T,1,64,44], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise FormatError(f"{self.seq_id}: empty sequence")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class GroundTruth3D:
    joints: np.ndarray  # [T, 24, 3]
    markers: np.ndarray  # [T, 64, 3]
    mesh: np.ndarray  # [T, 6890, 3]

    @property
    def keypoints(self) -> np.ndarray:
        return np.concatenate([self.joints, self.markers], axis=1)


@dataclass(frozen=True)
class BatchSpec:
    P: int = 8
    K: int = 4
    T_fixed: int = 30

    def validate(self, triplet: bool = True) -> None:
        if self.T_fixed < 1:
            raise ConfigError("T_fixed must be >= 1")
        if self.P < 1 or self.K < 1:
            raise ConfigError("P and K must be >= 1")
        if triplet and (self.P < 2 or self.K < 2):
            raise ConfigError(f"triplet loss needs P>=2 and K>=2, got P={self.P} K={self.K}")


# ---------------------------------------------------------------- loading


def preprocess_mask(img: np.ndarray) -> np.ndarray:
    """Binarize an 8-bit mask at 0.5 and fit it to 64x44.

    The height is kept; the width is center-cropped (too wide) or zero-padded
    (too narrow) to the 44:64 aspect ratio before a nearest-neighbour resize.
    """
    binary = (img.astype(np.float32) / 255.0 >= 0.5).astype(np.uint8)
    h, w = binary.shape
    target_w = max(1, int(round(h * SIL_WIDTH / SIL_HEIGHT)))
    if w > target_w:
        left = (w - target_w) // 2
        binary = binary[:, left : left + target_w]
    elif w < target_w:
        left = (target_w - w) // 2
        padded = np.zeros((h, target_w), dtype=np.uint8)
        padded[:, left : left + w] = binary
        binary = padded
    if binary.shape != (SIL_HEIGHT, SIL_WIDTH):
        binary = np.asarray(
            Image.fromarray(binary * 255).resize((SIL_WIDTH, SIL_HEIGHT), Image.NEAREST)
        ) // 255
    return binary.astype(np.float32)


def _frame_paths(path: Path) -> list[Path]:
    return sorted(p for p in path.glob("frame_*.png"))


def load_sequence(
    path: str | os.PathLike,
    identity: int | None = None,
    view: str | None = None,
    covariate: str | None = None,
    seq_id: str | None = None,
    load_gt: bool = True,
) -> tuple[SilhouetteSequence, GroundTruth3D | None]:
    path = Path(path)
    if not path.is_dir():
        raise LoadError(f"{path}: not a directory")
    frames = _frame_paths(path)
    if not frames:
        raise LoadError(f"{path}: no frame_*.png files")
    stack = []
    for fp in frames:
        try:
            with Image.open(fp) as im:
                stack.append(preprocess_mask(np.asarray(im.convert("L"))))
        except OSError as exc:
            raise LoadError(f"{fp}: {exc}") from exc
    arr = np.stack(stack)[:, None]

    # layout fallbacks: .../<identity>/<covariate>/<view>/<seq>
    parts = path.resolve().parts
    if identity is None:
        try:
            identity = int(parts[-4])
        except (IndexError, ValueError):
            identity = 0
    view = view if view is not None else (parts[-2] if len(parts) >= 2 else "000")
    covariate = covariate if covariate is not None else (parts[-3] if len(parts) >= 3 else "nm")
    seq_id = seq_id if seq_id is not None else "/".join(parts[-4:])

    seq = SilhouetteSequence(_readonly(arr), seq_id=seq_id, identity=identity, view=view, covariate=covariate)
    present = [name for name in SIDECARS if (path / f"{name}.mg3d").exists()]
    if not present or not load_gt:
        return seq, None
    if len(present) != len(SIDECARS):
        missing = sorted(set(SIDECARS) - set(present))
        raise FormatError(f"{path}: partial ground truth, missing {missing}")
    tensors = {}
    widths = {"joints": NUM_JOINTS, "markers": NUM_MARKERS, "mesh": None}
    for name in SIDECARS:
        data = mg3d.read(path / f"{name}.mg3d")
        if data.ndim != 3 or data.shape[2] != 3:
            raise FormatError(f"{path}/{name}.mg3d: expected [T,N,3], got {data.shape}")
        if data.shape[0] != len(seq):
            raise FormatError(
                f"{path}/{name}.mg3d: {data.shape[0]} frames but {len(seq)} silhouettes"
            )
        if widths[name] is not None and data.shape[1] != widths[name]:
            raise FormatError(f"{path}/{name}.mg3d: expected {widths[name]} points, got {data.shape[1]}")
        if not np.isfinite(data).all():
            raise FormatError(f"{path}/{name}.mg3d: non-finite coordinates")
        tensors[name] = _readonly(data)
    return seq, GroundTruth3D(**tensors)


def write_sequence(path: str | os.PathLike, seq: SilhouetteSequence, gt: GroundTruth3D | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        img = (frame[0] >= 0.5).astype(np.uint8) * 255
        Image.fromarray(img).save(path / f"frame_{t:04d}.png")
    if gt is not None:
        for name in SIDECARS:
            mg3d.write(path / f"{name}.mg3d", getattr(gt, name))


@dataclass
class GaitDataset:
    sequences: list[SilhouetteSequence]
    ground_truth: list[GroundTruth3D | None]
    identities: list[int] = field(init=False)
    by_identity: dict[int, list[int]] = field(init=False)

    def __post_init__(self):
        if len(self.sequences) != len(self.ground_truth):
            raise ValueError("sequences and ground_truth must align")
        self.by_identity = {}
        for i, seq in enumerate(self.sequences):
            self.by_identity.setdefault(seq.identity, []).append(i)
        self.identities = sorted(self.by_identity)

    def __len__(self) -> int:
        return len(self.sequences)

    @classmethod
    def from_root(cls, root: str | os.PathLike, load_gt: bool = True) -> "GaitDataset":
        root = Path(root)
        if not root.is_dir():
            raise LoadError(f"{root}: dataset root does not exist")
        seqs, gts = [], []
        for frame0 in sorted(root.glob("*/*/*/*/frame_0000.png")):
            seq_dir = frame0.parent
            rel = seq_dir.relative_to(root).parts
            try:
                identity = int(rel[0])
            except ValueError as exc:
                raise FormatError(f"{seq_dir}: identity directory must be an integer") from exc
            seq, gt = load_sequence(
                seq_dir, identity=identity, covariate=rel[1], view=rel[2], seq_id="/".join(rel), load_gt=load_gt
            )
            seqs.append(seq)
            gts.append(gt)
        if not seqs:
            raise LoadError(f"{root}: no sequences found")
        return cls(seqs, gts)

    def subset(self, indices) -> "GaitDataset":
        indices = list(indices)
        return GaitDataset([self.sequences[i] for i in indices], [self.ground_truth[i] for i in indices])

    def split_holdout(self, per_identity: int = 1) -> tuple["GaitDataset", "GaitDataset"]:
        """Hold out the last ``per_identity`` sequences (by seq_id order) of every identity."""
        train, held = [], []
        for ident in self.identities:
            idx = sorted(self.by_identity[ident], key=lambda i: self.sequences[i].seq_id)
            cut = max(len(idx) - per_identity, 0) if len(idx) > per_identity else len(idx)
            train += idx[:cut]
            held += idx[cut:]
        return self.subset(train), self.subset(held)


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    frames: np.ndarray  # [N, T, 1, 64, 44]
    identities: np.ndarray  # [N] raw identity ints
    seq_ids: list[str]
    frame_index: np.ndarray  # [N, T] source frame indices
    joints: np.ndarray  # [N, T, 24, 3] (zeros where gt_mask is False)
    markers: np.ndarray  # [N, T, 64, 3]
    mesh: np.ndarray  # [N, T, 6890, 3]
    gt_mask: np.ndarray  # [N] bool


def crop_indices(length: int, t_fixed: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous window of ``t_fixed`` frames; short clips repeat cyclically from 0."""
    if length < t_fixed:
        return np.arange(t_fixed) % length
    start = int(rng.integers(0, length - t_fixed + 1))
    return np.arange(start, start + t_fixed)


def sample_batch(rng: np.random.Generator, spec: BatchSpec, dataset: GaitDataset) -> Batch:
    if len(dataset.identities) < spec.P:
        raise SamplingError(f"need {spec.P} identities, dataset has {len(dataset.identities)}")
    chosen = rng.choice(len(dataset.identities), size=spec.P, replace=False)
    picks: list[int] = []
    for c in chosen:
        pool = dataset.by_identity[dataset.identities[c]]
        replace = len(pool) < spec.K
        picks.extend(int(i) for i in rng.choice(pool, size=spec.K, replace=replace))

    n, t = len(picks), spec.T_fixed
    frames = np.empty((n, t, 1, SIL_HEIGHT, SIL_WIDTH), dtype=np.float32)
    frame_index = np.empty((n, t), dtype=np.int64)
    joints = np.zeros((n, t, NUM_JOINTS, 3), dtype=np.float32)
    markers = np.zeros((n, t, NUM_MARKERS, 3), dtype=np.float32)
    mesh_width = next((g.mesh.shape[1] for g in dataset.ground_truth if g is not None), NUM_VERTICES)
    mesh = np.zeros((n, t, mesh_width, 3), dtype=np.float32)
    gt_mask = np.zeros(n, dtype=bool)
    for row, i in enumerate(picks):
        seq, gt = dataset.sequences[i], dataset.ground_truth[i]
        idx = crop_indices(len(seq), t, rng)
        frame_index[row] = idx
        frames[row] = seq.frames[idx]
        if gt is not None:
            joints[row] = gt.joints[idx]
            markers[row] = gt.markers[idx]
            mesh[row] = gt.mesh[idx]
            gt_mask[row] = True
    return Batch(
        frames=frames,
        identities=np.array([dataset.sequences[i].identity for i in picks]),
        seq_ids=[dataset.sequences[i].seq_id for i in picks],
        frame_index=frame_index,
        joints=joints,
        markers=markers,
        mesh=mesh,
        gt_mask=gt_mask,
    )


# ---------------------------------------------------------------- synthesis

# SMPL-style 24-joint skeleton
JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
BONES = tuple((p, c) for c, p in enumerate(PARENTS) if p >= 0)

GROUND_ROW = 61.0
PIXELS_PER_METER = 28.0
DEFAULT_VIEWS = ("090", "060")


@dataclass(frozen=True)
class WalkerParams:
    """Per-identity body and gait parameters (constant across sequences)."""

    height: float
    leg: float
    hip_width: float
    shoulder_width: float
    arm: float
    cadence: float  # gait cycles per frame
    hip_swing: float  # radians
    knee_flex: float
    arm_swing: float
    lean: float
    bob: float
    torso_radius: float  # pixels
    limb_radius: float
    head_radius: float


def identity_params(seed: int, identity: int) -> WalkerParams:
    rng = np.random.default_rng([seed, 1, identity])
    height = rng.uniform(1.5, 1.95)
    return WalkerParams(
        height=height,
        leg=height * rng.uniform(0.44, 0.54),
        hip_width=rng.uniform(0.14, 0.24),
        shoulder_width=rng.uniform(0.30, 0.46),
        arm=height * rng.uniform(0.36, 0.46),
        cadence=1.0 / rng.uniform(16.0, 30.0),
        hip_swing=np.deg2rad(rng.uniform(15.0, 35.0)),
        knee_flex=np.deg2rad(rng.uniform(25.0, 65.0)),
        arm_swing=np.deg2rad(rng.uniform(10.0, 45.0)),
        lean=np.deg2rad(rng.uniform(-4.0, 12.0)),
        bob=rng.uniform(0.01, 0.05),
        torso_radius=rng.uniform(2.2, 4.0),
        limb_radius=rng.uniform(1.0, 1.8),
        head_radius=rng.uniform(2.5, 3.6),
    )


def walker_pose(p: WalkerParams, phase: np.ndarray) -> np.ndarray:
    """World-space joints [T, 24, 3]; x forward, y up, z to the walker's left (metres)."""
    t = phase.shape[0]
    j = np.zeros((t, NUM_JOINTS, 3))
    thigh, shin = 0.53 * p.leg, 0.47 * p.leg
    torso = 0.30 * p.height
    pelvis_y = p.leg + 0.08 + p.bob * (np.cos(2 * phase) - 1.0)
    j[:, 0] = np.stack([np.zeros(t), pelvis_y, np.zeros(t)], -1)

    def lean(v):
        c, s = np.cos(p.lean), np.sin(p.lean)
        return np.stack([v[..., 0] * c + v[..., 1] * s, -v[..., 0] * s + v[..., 1] * c, v[..., 2]], -1)

    def up(k):
        return lean(np.broadcast_to(np.array([0.0, k, 0.0]), (t, 3)))

    j[:, 3] = j[:, 0] + up(torso * 0.33)
    j[:, 6] = j[:, 3] + up(torso * 0.33)
    j[:, 9] = j[:, 6] + up(torso * 0.34)
    j[:, 12] = j[:, 9] + up(0.07 * p.height)
    j[:, 15] = j[:, 12] + up(0.08 * p.height)

    for side, sgn, off in ((0, 1.0, 0.0), (1, -1.0, np.pi)):
        hip_i, knee_i, ankle_i, foot_i = (1, 4, 7, 10) if side == 0 else (2, 5, 8, 11)
        swing = p.hip_swing * np.sin(phase + off)
        flex = p.knee_flex * 0.5 * (1.0 + np.sin(phase + off + 2.2))
        j[:, hip_i] = j[:, 0] + np.array([0.0, -0.04, sgn * p.hip_width / 2])
        j[:, knee_i] = j[:, hip_i] + thigh * np.stack([np.sin(swing), -np.cos(swing), np.zeros(t)], -1)
        shin_a = swing - flex
        j[:, ankle_i] = j[:, knee_i] + shin * np.stack([np.sin(shin_a), -np.cos(shin_a), np.zeros(t)], -1)
        j[:, foot_i] = j[:, ankle_i] + np.stack([np.full(t, 0.13), np.full(t, -0.04), np.zeros(t)], -1)

        col_i, sh_i, el_i, wr_i, hd_i = (13, 16, 18, 20, 22) if side == 0 else (14, 17, 19, 21, 23)
        j[:, col_i] = j[:, 9] + np.array([0.0, 0.02, sgn * p.shoulder_width * 0.22])
        j[:, sh_i] = j[:, 9] + up(0.03) + np.array([0.0, 0.0, sgn * p.shoulder_width / 2])
        arm_a = -p.arm_swing * np.sin(phase + off)
        elbow_a = arm_a + np.deg2rad(15.0) + 0.5 * p.arm_swing * (1.0 + np.sin(phase + off))
        upper, fore = 0.55 * p.arm * 0.85, 0.45 * p.arm * 0.85
        j[:, el_i] = j[:, sh_i] + upper * np.stack([np.sin(arm_a), -np.cos(arm_a), np.zeros(t)], -1)
        j[:, wr_i] = j[:, el_i] + fore * np.stack([np.sin(elbow_a), -np.cos(elbow_a), np.zeros(t)], -1)
        j[:, hd_i] = j[:, wr_i] + 0.15 * p.arm * np.stack([np.sin(elbow_a), -np.cos(elbow_a), np.zeros(t)], -1)
    return j


def project_to_image(world: np.ndarray, view_deg: float) -> np.ndarray:
    """World joints -> (col, row, depth) in pixel units for a camera at yaw ``view_deg``.

    View 90 sees the walker side-on, view 0 head-on.
    """
    b = np.deg2rad(view_deg)
    u = world[..., 0] * np.sin(b) + world[..., 2] * np.cos(b)
    d = world[..., 0] * np.cos(b) - world[..., 2] * np.sin(b)
    col = (SIL_WIDTH - 1) / 2 + PIXELS_PER_METER * u
    row = GROUND_ROW - PIXELS_PER_METER * world[..., 1]
    return np.stack([col, row, PIXELS_PER_METER * d], -1)


def image_to_voxel(pix: np.ndarray) -> np.ndarray:
    """Pixel-space (col, row, depth) -> voxel cube (x, y, z) in [0, 15]."""
    top = CUBE_SIZE - 1
    x = pix[..., 0] * top / (SIL_WIDTH - 1)
    y = pix[..., 1] * top / (SIL_HEIGHT - 1)
    z = top / 2 + pix[..., 2] * top / (SIL_WIDTH - 1)
    return np.clip(np.stack([x, y, z], -1), 0.0, top)


def _segment_distance(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-12:
        return np.linalg.norm(pts - a, axis=-1)
    s = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(pts - (a + s[..., None] * ab), axis=-1)


_TORSO_BONES = {(0, 3), (3, 6), (6, 9), (9, 12), (0, 1), (0, 2), (9, 13), (9, 14), (13, 16), (14, 17)}


def render_silhouette(pix: np.ndarray, p: WalkerParams) -> np.ndarray:
    """Rasterize one frame of projected joints [24, 3] to a {0,1} 64x44 mask."""
    rows, cols = np.mgrid[0:SIL_HEIGHT, 0:SIL_WIDTH]
    grid = np.stack([cols, rows], -1).astype(np.float64)
    mask = np.zeros((SIL_HEIGHT, SIL_WIDTH), dtype=bool)
    xy = pix[:, :2]
    for parent, child in BONES:
        radius = p.torso_radius if (parent, child) in _TORSO_BONES else p.limb_radius
        mask |= _segment_distance(grid, xy[parent], xy[child]) <= radius
    mask |= np.linalg.norm(grid - xy[15], axis=-1) <= p.head_radius
    return mask.astype(np.float32)


def marker_weights(seed: int, identity: int) -> np.ndarray:
    """[64, 24] convex weights: a shared bone-anchored layout with per-identity jitter."""
    base = np.random.default_rng([seed, 3])
    bones = base.integers(0, len(BONES), size=NUM_MARKERS)
    frac = base.uniform(0.1, 0.9, size=NUM_MARKERS)
    extra = base.integers(0, NUM_JOINTS, size=NUM_MARKERS)
    own = np.random.default_rng([seed, 4, identity])
    frac = np.clip(frac + own.uniform(-0.08, 0.08, size=NUM_MARKERS), 0.0, 1.0)
    eps = own.uniform(0.0, 0.1, size=NUM_MARKERS)
    w = np.zeros((NUM_MARKERS, NUM_JOINTS))
    for m, (bone, f, e, x) in enumerate(zip(bones, frac, eps, extra)):
        parent, child = BONES[bone]
        w[m, parent] += (1 - e) * (1 - f)
        w[m, child] += (1 - e) * f
        w[m, x] += e
    return w


def make_c_true(seed: int, num_vertices: int = NUM_VERTICES, num_keypoints: int = NUM_JOINTS + NUM_MARKERS) -> np.ndarray:
    """Global [M, J+V] vertex-from-keypoint matrix; each row a sparse convex combination."""
    rng = np.random.default_rng([seed, 5])
    c = np.zeros((num_vertices, num_keypoints))
    cols = np.stack([rng.choice(num_keypoints, size=3, replace=False) for _ in range(num_vertices)])
    w = rng.dirichlet(np.ones(3), size=num_vertices)
    np.put_along_axis(c, cols, w, axis=1)
    return c.astype(np.float32)


def synth_sequence(
    seed: int, identity: int, seq_index: int, T: int, view: str, c_true: np.ndarray
) -> tuple[np.ndarray, GroundTruth3D]:
    p = identity_params(seed, identity)
    rng = np.random.default_rng([seed, 2, identity, seq_index])
    phase0 = rng.uniform(0.0, 2 * np.pi)
    cadence = p.cadence * rng.uniform(0.97, 1.03)
    phase = phase0 + 2 * np.pi * cadence * np.arange(T)
    world = walker_pose(p, phase)
    pix = project_to_image(world, float(view))
    frames = np.stack([render_silhouette(pix[t], p) for t in range(T)])[:, None]
    joints = image_to_voxel(pix).astype(np.float32)
    markers = (marker_weights(seed, identity) @ joints.astype(np.float64)).astype(np.float32)
    kp = np.concatenate([joints, markers], axis=1).astype(np.float64)
    mesh = np.einsum("vk,tkc->tvc", c_true.astype(np.float64), kp).astype(np.float32)
    return frames, GroundTruth3D(joints, markers, mesh)


def synth_generate(
    num_ids: int,
    seqs_per_id: int,
    T: int,
    seed: int,
    out: str | os.PathLike,
    views: tuple[str, ...] = DEFAULT_VIEWS,
) -> dict:
    """Write a deterministic synthetic dataset; returns summary counts."""
    if num_ids < 2:
        raise ConfigError("num_ids must be >= 2 (triplet sampling needs two identities)")
    if seqs_per_id < 1:
        raise ConfigError("seqs_per_id must be >= 1")
    if T < 8:
        raise ConfigError("T must be >= 8")
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise LoadError(f"{out}: output directory is not writable ({exc})") from exc

    c_true = make_c_true(seed)
    mg3d.write(out / "c_true.mg3d", c_true)
    for ident in range(num_ids):
        for s in range(seqs_per_id):
            view = views[s % len(views)]
            frames, gt = synth_sequence(seed, ident, s, T, view, c_true)
            seq_dir = out / f"{ident:04d}" / "nm" / view / f"{s:02d}"
            seq = SilhouetteSequence(frames, seq_id=str(seq_dir.relative_to(out)), identity=ident, view=view)
            write_sequence(seq_dir, seq, gt)
    meta = {"num_ids": num_ids, "seqs_per_id": seqs_per_id, "frames": T, "seed": seed, "views": list(views)}
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    log.info("synthesized %d sequences under %s", num_ids * seqs_per_id, out)
    return {"identities": num_ids, "sequences": num_ids * seqs_per_id, "frames": num_ids * seqs_per_id * T}
