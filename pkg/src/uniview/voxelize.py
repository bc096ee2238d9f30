"""RGB-D frames -> colored point clouds -> occupancy/RGB voxel grids.

Ground truth follows the surface-only labeling convention: a cell is
occupied iff at least one depth pixel unprojects into it. Interior cells
of solid objects are unknowable from depth alone and are labeled empty.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import Frame
from .geometry import CameraRig, WorkspaceGrid, all_cell_centers, unproject_pixels, world_to_cells


@dataclass
class VoxelGrid:
    occ: np.ndarray  # (L, B, P); ground truth in {0, 1}, predictions in [0, 1]
    rgb: np.ndarray  # (L, B, P, 3) in [0, 1]; meaningful where occ is set

    def __post_init__(self):
        if self.occ.shape + (3,) != self.rgb.shape:
            raise ValueError(f"voxel shapes disagree: occ {self.occ.shape} rgb {self.rgb.shape}")


def rgbd_to_points(frame: Frame, rig: CameraRig):
    """One colored point per non-sentinel depth pixel, unprojected to world.

    Returns (points (M, 3) float64, colors (M, 3) float64). Pixel centers
    sit at (i + 0.5, j + 0.5), matching the renderer's ray convention.
    """
    N = frame.rgb.shape[0]
    if N != len(rig):
        raise ValueError(f"frame has {N} cameras but rig has {len(rig)}")
    pts_all, col_all = [], []
    for n, (intr, pose) in enumerate(rig):
        depth = frame.depth[n]
        if depth.shape != (intr.height, intr.width):
            raise ValueError(
                f"camera {n}: depth {depth.shape} vs intrinsics {intr.height}x{intr.width}"
            )
        jj, ii = np.nonzero(depth > 0.0)
        if len(ii) == 0:
            continue
        pix = np.stack([ii + 0.5, jj + 0.5], axis=1)
        pts = unproject_pixels(intr, pose, pix, depth[jj, ii].astype(np.float64))
        pts_all.append(pts)
        col_all.append(frame.rgb[n, jj, ii].astype(np.float64))
    if not pts_all:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.concatenate(pts_all), np.concatenate(col_all)


def voxelize(points, colors, grid: WorkspaceGrid) -> VoxelGrid:
    """Bin points into cells; occ = any point present, rgb = mean color.

    Points outside the workspace are dropped. Mean aggregation keeps the
    result independent of point order (up to float summation tolerance).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(pts) != len(cols):
        raise ValueError(f"{len(pts)} points but {len(cols)} colors")
    L, B, P = grid.dims
    count = np.zeros(L * B * P)
    csum = np.zeros((L * B * P, 3))
    if len(pts):
        idx, inside = world_to_cells(grid, pts)
        flat = (idx[:, 0] * B + idx[:, 1]) * P + idx[:, 2]
        flat = flat[inside]
        np.add.at(count, flat, 1.0)
        np.add.at(csum, flat, cols[inside])
    occ = (count > 0).astype(np.float64)
    rgb = csum / np.maximum(count, 1.0)[:, None]
    return VoxelGrid(occ=occ.reshape(L, B, P), rgb=rgb.reshape(L, B, P, 3))


def frame_to_voxels(frame: Frame, rig: CameraRig, grid: WorkspaceGrid) -> VoxelGrid:
    pts, cols = rgbd_to_points(frame, rig)
    return voxelize(pts, cols, grid)


def occupancy_iou(pred: VoxelGrid, gt: VoxelGrid, threshold: float = 0.5) -> float:
    """Intersection-over-union of binarized occupancy; 1.0 when both empty."""
    if pred.occ.shape != gt.occ.shape:
        raise ValueError(f"dim mismatch: pred {pred.occ.shape} vs gt {gt.occ.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    a = pred.occ > threshold
    b = gt.occ > threshold
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def rgb_mae(pred: VoxelGrid, gt: VoxelGrid) -> float:
    """Mean absolute RGB error over the cells that are truly occupied."""
    mask = gt.occ > 0.5
    if not mask.any():
        return 0.0
    return float(np.abs(pred.rgb[mask] - gt.rgb[mask]).mean())


def write_ply(path, vox: VoxelGrid, grid: WorkspaceGrid, threshold: float = 0.5) -> None:
    """ASCII PLY dump: one colored vertex per occupied cell center."""
    centers = all_cell_centers(grid)
    mask = vox.occ > threshold
    pts = centers[mask]
    cols = np.clip(vox.rgb[mask] * 255.0, 0, 255).astype(np.uint8)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for p, c in zip(pts, cols):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def save_voxels(path, vox: VoxelGrid) -> None:
    """Compact sidecar for ground-truth grids (plumbing, not a viewer format)."""
    np.savez_compressed(path, occ=vox.occ.astype(np.float32), rgb=vox.rgb.astype(np.float32))


def load_voxels(path) -> VoxelGrid:
    data = np.load(path)
    return VoxelGrid(occ=data["occ"].astype(np.float64), rgb=data["rgb"].astype(np.float64))
