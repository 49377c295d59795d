"""Writers for reconstructed frames: OBJ meshes, keypoint .mg3d files, projection PNGs."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from meshgait import mg3d
from meshgait.dataset import CUBE_SIZE, SIL_HEIGHT, SIL_WIDTH
from meshgait.errors import FormatError, LoadError

PROJECTION_SCALE = 4
JOINT_COLOR = (220, 40, 40)
MARKER_COLOR = (40, 110, 230)


def read_topology(path: str | os.PathLike, num_vertices: int) -> np.ndarray:
    """Triangles from a text file, one ``i j k`` line of 0-based vertex indices each."""
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"{path}: topology file not found")
    faces = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected three vertex indices")
        try:
            tri = [int(p) for p in parts]
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer vertex index") from None
        if min(tri) < 0 or max(tri) >= num_vertices:
            raise FormatError(f"{path}:{lineno}: vertex index out of range [0, {num_vertices})")
        faces.append(tri)
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path: str | os.PathLike, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    vertices = np.asarray(vertices, dtype=np.float64)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise FormatError(f"vertices must be [M, 3], got {vertices.shape}")
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in vertices]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def voxel_to_pixel(coords: np.ndarray) -> np.ndarray:
    """Voxel (x, y) -> silhouette (col, row); depth is dropped."""
    top = CUBE_SIZE - 1
    col = coords[..., 0] * (SIL_WIDTH - 1) / top
    row = coords[..., 1] * (SIL_HEIGHT - 1) / top
    return np.stack([col, row], -1)


def render_projection(silhouette: np.ndarray, keypoints: np.ndarray, num_joints: int, scale: int = PROJECTION_SCALE):
    """Scaled-up silhouette with joints (red) and markers (blue) drawn over it."""
    base = (np.asarray(silhouette).reshape(SIL_HEIGHT, SIL_WIDTH) > 0.5).astype(np.uint8) * 90
    img = Image.fromarray(base).convert("RGB").resize((SIL_WIDTH * scale, SIL_HEIGHT * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    pix = voxel_to_pixel(np.asarray(keypoints)) * scale + scale / 2
    for k, (c, r) in enumerate(pix):
        color = JOINT_COLOR if k < num_joints else MARKER_COLOR
        rad = 2 if k < num_joints else 1
        draw.ellipse([c - rad, r - rad, c + rad, r + rad], fill=color)
    return img


def export_frame(
    out_dir: Path,
    t: int,
    silhouette: np.ndarray,
    keypoints: np.ndarray,
    mesh: np.ndarray | None,
    num_joints: int,
    faces: np.ndarray | None = None,
) -> list[Path]:
    written = []
    kp_path = out_dir / f"keypoints_{t:04d}.mg3d"
    mg3d.write(kp_path, np.asarray(keypoints, dtype=np.float32))
    written.append(kp_path)
    if mesh is not None:
        obj_path = out_dir / f"mesh_{t:04d}.obj"
        write_obj(obj_path, mesh, faces)
        written.append(obj_path)
    png_path = out_dir / f"projection_{t:04d}.png"
    render_projection(silhouette, keypoints, num_joints).save(png_path)
    written.append(png_path)
    return written
