"""Pinhole cameras, rigid poses, and the workspace voxel grid.

Conventions (also documented in the README):
  - Poses are world-to-camera: x_cam = R @ x_world + t.
  - Camera frame: +z forward (into the scene), +x right, +y down.
  - Pixel coordinates are continuous; the center of integer pixel (i, j)
    is at (i + 0.5, j + 0.5). A projection is valid when it lands in
    [0, width) x [0, height) and the camera-frame depth exceeds DEPTH_MIN.
  - Grid binning is lower-inclusive / upper-exclusive, so every point
    inside the workspace maps to exactly one cell.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Minimum camera-frame depth for a projection to count as "in front of"
# the camera; avoids division blow-up as z -> 0.
DEPTH_MIN = 1e-6

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )


class CameraPose:
    """World-to-camera rigid transform: x_cam = rotation @ x_world + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(translation, dtype=np.float64).reshape(3)
        err = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (max |R R^T - I| = {err:.3e})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation determinant {det} != +1")
        self.rotation = rotation
        self.rotation.setflags(write=False)
        self.translation = translation
        self.translation.setflags(write=False)

    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in world coordinates (-R^T t)."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraRig:
    """Ordered list of (intrinsics, pose) sharing one world frame."""

    cameras: tuple

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("a rig needs at least one camera")

    def __len__(self):
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)


def rig_to_json(rig: CameraRig) -> str:
    """Serialize a rig as a JSON array of camera objects."""
    out = []
    for intr, pose in rig:
        out.append(
            {
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "width": intr.width,
                "height": intr.height,
                "rotation": [float(v) for v in pose.rotation.reshape(-1)],
                "translation": [float(v) for v in pose.translation],
            }
        )
    return json.dumps(out, indent=2)


def rig_from_json(text: str) -> CameraRig:
    doc = json.loads(text)
    cams = []
    for cam in doc:
        intr = CameraIntrinsics(
            fx=float(cam["fx"]),
            fy=float(cam["fy"]),
            cx=float(cam["cx"]),
            cy=float(cam["cy"]),
            width=int(cam["width"]),
            height=int(cam["height"]),
        )
        pose = CameraPose(np.array(cam["rotation"]).reshape(3, 3), np.array(cam["translation"]))
        cams.append((intr, pose))
    return CameraRig(cameras=tuple(cams))


def save_rig(rig: CameraRig, path) -> None:
    Path(path).write_text(rig_to_json(rig))


def load_rig(path) -> CameraRig:
    return rig_from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Projection / unprojection
# ---------------------------------------------------------------------------

def project_point(K: CameraIntrinsics, pose: CameraPose, p_world):
    """Project one world point. Returns (pixel (2,), depth, valid).

    Invalid points (behind the camera or outside the image) are reported
    through the flag, never as an error; pixel/depth are still returned
    for callers that want the raw values.
    """
    p_cam = pose.rotation @ np.asarray(p_world, dtype=np.float64) + pose.translation
    z = p_cam[2]
    if z > DEPTH_MIN:
        u = K.fx * p_cam[0] / z + K.cx
        v = K.fy * p_cam[1] / z + K.cy
    else:
        u = v = np.nan
    valid = bool(z > DEPTH_MIN and 0.0 <= u < K.width and 0.0 <= v < K.height)
    return np.array([u, v]), float(z), valid


def project_points(K: CameraIntrinsics, pose: CameraPose, pts_world):
    """Vectorized projection of (N, 3) world points -> (pixels (N, 2), depth (N,), valid (N,))."""
    pts = np.asarray(pts_world, dtype=np.float64).reshape(-1, 3)
    p_cam = pts @ pose.rotation.T + pose.translation
    z = p_cam[:, 2]
    front = z > DEPTH_MIN
    safe_z = np.where(front, z, 1.0)
    u = K.fx * p_cam[:, 0] / safe_z + K.cx
    v = K.fy * p_cam[:, 1] / safe_z + K.cy
    inside = (u >= 0.0) & (u < K.width) & (v >= 0.0) & (v < K.height)
    valid = front & inside
    pix = np.stack([np.where(front, u, np.nan), np.where(front, v, np.nan)], axis=1)
    return pix, z, valid


def unproject_pixel(K: CameraIntrinsics, pose: CameraPose, pixel, depth):
    """Inverse of project_point for a known camera-frame depth (> 0)."""
    depth = float(depth)
    if depth <= 0:
        raise ValueError(f"depth must be positive, got {depth}")
    u, v = float(pixel[0]), float(pixel[1])
    p_cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.rotation.T @ (p_cam - pose.translation)


def unproject_pixels(K: CameraIntrinsics, pose: CameraPose, pixels, depths):
    """Vectorized unprojection: (N, 2) pixels + (N,) depths -> (N, 3) world points."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if np.any(depths <= 0):
        raise ValueError("all depths must be positive")
    x = (pixels[:, 0] - K.cx) / K.fx * depths
    y = (pixels[:, 1] - K.cy) / K.fy * depths
    p_cam = np.stack([x, y, depths], axis=1)
    return (p_cam - pose.translation) @ pose.rotation


# ---------------------------------------------------------------------------
# Workspace grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WorkspaceGrid:
    """Axis-aligned cell grid over the workspace.

    origin is the minimum corner (meters); cell_size the per-axis cell
    extent (sx, sy, sz); dims the (L, B, P) cell counts. The defaults,
    20 x 20 x 5 cells of 0.05 x 0.05 x 0.10 m, span a 1.0 x 1.0 x 0.5 m
    desk workspace.
    """

    origin: tuple = (0.0, 0.0, 0.0)
    cell_size: tuple = (0.05, 0.05, 0.10)
    dims: tuple = (20, 20, 5)

    def __post_init__(self):
        if any(s <= 0 for s in self.cell_size):
            raise ValueError(f"cell sizes must be positive, got {self.cell_size}")
        if any(int(d) <= 0 or int(d) != d for d in self.dims):
            raise ValueError(f"dims must be positive integers, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "cell_size", tuple(float(v) for v in self.cell_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the workspace along each axis (meters)."""
        return np.array(self.dims) * np.array(self.cell_size)

    @property
    def max_corner(self) -> np.ndarray:
        return np.array(self.origin) + self.extent

    @property
    def center(self) -> np.ndarray:
        return np.array(self.origin) + 0.5 * self.extent


def cell_center(grid: WorkspaceGrid, idx) -> np.ndarray:
    """World position of the center of cell (l, b, p)."""
    idx = tuple(int(i) for i in idx)
    for i, d in zip(idx, grid.dims):
        if not 0 <= i < d:
            raise IndexError(f"cell index {idx} out of range for dims {grid.dims}")
    return np.array(grid.origin) + (np.array(idx) + 0.5) * np.array(grid.cell_size)


def all_cell_centers(grid: WorkspaceGrid) -> np.ndarray:
    """Centers of every cell as an (L, B, P, 3) array, row-major in (l, b, p)."""
    L, B, P = grid.dims
    l, b, p = np.meshgrid(np.arange(L), np.arange(B), np.arange(P), indexing="ij")
    idx = np.stack([l, b, p], axis=-1).astype(np.float64)
    return np.array(grid.origin) + (idx + 0.5) * np.array(grid.cell_size)


def world_to_cell(grid: WorkspaceGrid, p_world):
    """Bin one world point; returns (l, b, p) or None when outside the grid."""
    rel = (np.asarray(p_world, dtype=np.float64) - np.array(grid.origin)) / np.array(grid.cell_size)
    idx = np.floor(rel).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= np.array(grid.dims)):
        return None
    return tuple(int(i) for i in idx)


def world_to_cells(grid: WorkspaceGrid, pts_world):
    """Vectorized binning: (N, 3) points -> ((N, 3) int indices, (N,) inside mask).

    Indices of outside points are clipped into range and must be ignored
    via the mask.
    """
    pts = np.asarray(pts_world, dtype=np.float64).reshape(-1, 3)
    rel = (pts - np.array(grid.origin)) / np.array(grid.cell_size)
    idx = np.floor(rel).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.array(grid.dims)), axis=1)
    return np.clip(idx, 0, np.array(grid.dims) - 1), inside


# ---------------------------------------------------------------------------
# Pose construction helpers
# ---------------------------------------------------------------------------

def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """World-to-camera pose for a camera at `eye` looking toward `target`.

    Camera +z points at the target; +x is chosen right-handed w.r.t. the
    world `up` hint, +y completes the frame (pointing roughly "down").
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        # Looking straight along `up`: pick an arbitrary horizontal right axis.
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=0)
    # Re-orthonormalize so the pose passes the strict 1e-9 invariant.
    u_svd, _, vt = np.linalg.svd(rot)
    rot = u_svd @ vt
    if np.linalg.det(rot) < 0:
        u_svd[:, -1] *= -1
        rot = u_svd @ vt
    return CameraPose(rot, -rot @ eye)
