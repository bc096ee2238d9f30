"""Synthetic tabletop world: scenes, raycast RGB-D rendering, environment, expert.

The world is deliberately minimal: axis-aligned boxes and spheres resting on
a table plane inside the workspace box, a free-flying gripper (no arm
kinematics), and magnetic grasping. Rendering casts one primary ray per
pixel through the pixel center and reports the nearest hit with flat
shading; depth is distance along the optical axis, with 0 as the
no-hit sentinel.

The gripper is drawn into the camera images as a small gray sphere so a
policy can observe its own position; pre-training scenes include a
similar free-floating gray marker sphere so that object is in-distribution
for the visual encoder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DEPTH_MIN, CameraIntrinsics, CameraPose, WorkspaceGrid

PALETTE = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.15),
    "blue": (0.15, 0.20, 0.90),
    "yellow": (0.90, 0.85, 0.10),
    "magenta": (0.85, 0.10, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.50, 0.15, 0.85),
}
TABLE_RGB = (0.82, 0.78, 0.72)
BACKGROUND_RGB = (0.10, 0.10, 0.12)
GRIPPER_RGB = (0.45, 0.45, 0.45)
DEPTH_SENTINEL = 0.0

MARKER_ID = -1
GRIPPER_ID = -2
GRIPPER_RADIUS = 0.02


@dataclass(frozen=True)
class Primitive:
    shape: str  # "box" or "sphere"
    center: tuple
    size: tuple | float  # full extents (box) or radius (sphere)
    rgb: tuple
    object_id: int
    color_name: str = ""

    def bounding_radius(self) -> float:
        if self.shape == "sphere":
            return float(self.size)
        return 0.5 * float(np.linalg.norm(self.size))

    def rest_half_height(self) -> float:
        return float(self.size) if self.shape == "sphere" else 0.5 * self.size[2]


@dataclass(frozen=True)
class SceneSpec:
    table_height: float
    table_extent: tuple  # ((x0, x1), (y0, y1))
    primitives: tuple


@dataclass(frozen=True)
class SimConfig:
    grid: WorkspaceGrid = field(default_factory=WorkspaceGrid)
    # The visual table plane sits just below the workspace grid so that its
    # surface never enters the occupancy ground truth: the grid covers the
    # manipulable content only. Objects rest on the grid floor.
    table_height: float = -0.005
    object_count: tuple = (3, 5)
    object_size: tuple = (0.06, 0.12)
    palette: tuple = tuple(PALETTE)
    marker_sphere: bool = False
    margin: float = 0.10
    placement_gap: float = 0.01
    max_place_attempts: int = 200
    max_step: float = 0.05
    max_rot_step: float = 0.10
    grasp_radius: float = 0.04
    reach_threshold: float = 0.05
    lift_height: float = 0.22
    max_episode_steps: int = 60
    gripper_start_z: tuple = (0.25, 0.42)
    gripper_min_start_dist: float = 0.15


# ---------------------------------------------------------------------------
# Scene sampling
# ---------------------------------------------------------------------------

def sample_scene(seed, config: SimConfig) -> SceneSpec:
    """Random non-interpenetrating scene; deterministic for a given seed."""
    rng = np.random.default_rng(seed)
    grid = config.grid
    lo = np.array(grid.origin)
    hi = grid.max_corner
    extent = ((lo[0], hi[0]), (lo[1], hi[1]))
    n = int(rng.integers(config.object_count[0], config.object_count[1] + 1))
    colors = list(rng.choice(len(config.palette), size=n, replace=False))

    placed: list[Primitive] = []
    for i, ci in enumerate(colors):
        name = config.palette[ci]
        prim = None
        for _ in range(config.max_place_attempts):
            shape = "box" if rng.uniform() < 0.5 else "sphere"
            if shape == "box":
                size = tuple(rng.uniform(config.object_size[0], config.object_size[1], size=3))
                half_h = 0.5 * size[2]
                br = 0.5 * float(np.linalg.norm(size))
            else:
                size = float(rng.uniform(0.5 * config.object_size[0], 0.5 * config.object_size[1]))
                half_h = size
                br = size
            x = rng.uniform(lo[0] + config.margin + br, hi[0] - config.margin - br)
            y = rng.uniform(lo[1] + config.margin + br, hi[1] - config.margin - br)
            center = (float(x), float(y), float(lo[2]) + half_h)
            cand = Primitive(shape, center, size, PALETTE[name], object_id=i + 1, color_name=name)
            if _placement_ok(cand, placed, config.placement_gap):
                prim = cand
                break
        if prim is None:
            raise RuntimeError(f"could not place object {i} after {config.max_place_attempts} attempts")
        placed.append(prim)

    if config.marker_sphere:
        for _ in range(config.max_place_attempts):
            r = GRIPPER_RADIUS
            x = rng.uniform(lo[0] + config.margin, hi[0] - config.margin)
            y = rng.uniform(lo[1] + config.margin, hi[1] - config.margin)
            z = rng.uniform(0.18, 0.42)
            cand = Primitive("sphere", (float(x), float(y), float(z)), r, GRIPPER_RGB,
                             object_id=MARKER_ID, color_name="gray")
            if _placement_ok(cand, placed, config.placement_gap):
                placed.append(cand)
                break
        else:
            raise RuntimeError("could not place marker sphere")

    return SceneSpec(table_height=config.table_height, table_extent=extent, primitives=tuple(placed))


def _placement_ok(cand: Primitive, placed, gap) -> bool:
    for other in placed:
        d = np.linalg.norm(np.array(cand.center) - np.array(other.center))
        if d < cand.bounding_radius() + other.bounding_radius() + gap:
            return False
    return True


def scene_to_json(scene: SceneSpec) -> str:
    return json.dumps(
        {
            "table_height": scene.table_height,
            "table_extent": scene.table_extent,
            "primitives": [
                {
                    "shape": p.shape,
                    "center": list(p.center),
                    "size": list(p.size) if p.shape == "box" else p.size,
                    "rgb": list(p.rgb),
                    "object_id": p.object_id,
                    "color_name": p.color_name,
                }
                for p in scene.primitives
            ],
        },
        indent=2,
    )


def scene_from_json(text: str) -> SceneSpec:
    doc = json.loads(text)
    prims = tuple(
        Primitive(
            shape=p["shape"],
            center=tuple(p["center"]),
            size=tuple(p["size"]) if p["shape"] == "box" else float(p["size"]),
            rgb=tuple(p["rgb"]),
            object_id=int(p["object_id"]),
            color_name=p.get("color_name", ""),
        )
        for p in doc["primitives"]
    )
    te = doc["table_extent"]
    return SceneSpec(table_height=float(doc["table_height"]),
                     table_extent=((te[0][0], te[0][1]), (te[1][0], te[1][1])),
                     primitives=prims)


# ---------------------------------------------------------------------------
# Raycast renderer
# ---------------------------------------------------------------------------

def render(scene: SceneSpec, K: CameraIntrinsics, pose: CameraPose, extra_primitives=()):
    """Render one camera view -> (rgb (H, W, 3) in [0,1], depth (H, W), 0 = no hit).

    Depth is the distance along the optical axis (camera z), so unprojecting
    a depth pixel lands exactly on the hit surface.
    """
    H, W = K.height, K.width
    jj, ii = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    u = (ii + 0.5 - K.cx) / K.fx
    v = (jj + 0.5 - K.cy) / K.fy
    dirs_cam = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = dirs_cam @ pose.rotation  # R^T applied row-wise
    o = pose.camera_center()

    best = np.full(H * W, np.inf)
    color = np.empty((H * W, 3))
    color[:] = BACKGROUND_RGB

    def consider(s, rgb):
        closer = s < best
        best[closer] = s[closer]
        color[closer] = rgb

    # Table plane, bounded to its extent.
    (x0, x1), (y0, y1) = scene.table_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (scene.table_height - o[2]) / d[:, 2]
    pt = o[None, :] + s[:, None] * d
    ok = (s > DEPTH_MIN) & np.isfinite(s) & (pt[:, 0] >= x0) & (pt[:, 0] <= x1) & (pt[:, 1] >= y0) & (pt[:, 1] <= y1)
    consider(np.where(ok, s, np.inf), TABLE_RGB)

    for prim in tuple(scene.primitives) + tuple(extra_primitives):
        if prim.shape == "sphere":
            s = _ray_sphere(o, d, np.array(prim.center), float(prim.size))
        else:
            s = _ray_box(o, d, np.array(prim.center), 0.5 * np.array(prim.size))
        consider(s, prim.rgb)

    depth = np.where(np.isfinite(best), best, DEPTH_SENTINEL)
    return color.reshape(H, W, 3), depth.reshape(H, W)


def _ray_sphere(o, d, center, radius):
    oc = o - center
    a = (d * d).sum(axis=1)
    b = 2.0 * d @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0.0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    near = (-b - sq) / (2.0 * a)
    far = (-b + sq) / (2.0 * a)
    s = np.where(near > DEPTH_MIN, near, far)
    return np.where(hit & (s > DEPTH_MIN), s, np.inf)


def _ray_box(o, d, center, half):
    lo = center - half
    hi = center + half
    tn = np.full(d.shape[0], -np.inf)
    tf = np.full(d.shape[0], np.inf)
    for ax in range(3):
        da = d[:, ax]
        oa = o[ax]
        nonzero = da != 0.0
        with np.errstate(divide="ignore"):
            t1 = (lo[ax] - oa) / np.where(nonzero, da, 1.0)
            t2 = (hi[ax] - oa) / np.where(nonzero, da, 1.0)
        near, far = np.minimum(t1, t2), np.maximum(t1, t2)
        inside_slab = (oa >= lo[ax]) & (oa <= hi[ax])
        near_ax = np.where(nonzero, near, np.where(inside_slab, -np.inf, np.inf))
        far_ax = np.where(nonzero, far, np.where(inside_slab, np.inf, -np.inf))
        tn = np.maximum(tn, near_ax)
        tf = np.minimum(tf, far_ax)
    hit = (tf >= tn) & (tf > DEPTH_MIN)
    s = np.where(tn > DEPTH_MIN, tn, tf)
    return np.where(hit & (s > DEPTH_MIN), s, np.inf)


def surface_distance(scene: SceneSpec, points, extra_primitives=()):
    """Distance from each point to the nearest primitive/table surface.

    Independent of the renderer: plain closed-form distances, used as the
    oracle for depth-map consistency.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(pts), np.inf)

    (x0, x1), (y0, y1) = scene.table_extent
    dx = np.maximum(np.maximum(x0 - pts[:, 0], pts[:, 0] - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - pts[:, 1], pts[:, 1] - y1), 0.0)
    dz = pts[:, 2] - scene.table_height
    best = np.minimum(best, np.sqrt(dx * dx + dy * dy + dz * dz))

    for prim in tuple(scene.primitives) + tuple(extra_primitives):
        c = np.array(prim.center)
        if prim.shape == "sphere":
            dist = np.abs(np.linalg.norm(pts - c, axis=1) - float(prim.size))
        else:
            q = np.abs(pts - c) - 0.5 * np.array(prim.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            dist = np.abs(outside + inside)
        best = np.minimum(best, dist)
    return best


# ---------------------------------------------------------------------------
# Environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    dpos: tuple
    drot: tuple
    gripper: int  # 1 = close, 0 = open

    def as_vector(self) -> np.ndarray:
        return np.array([*self.dpos, *self.drot, float(self.gripper)], dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    scene: SceneSpec
    gripper_pos: tuple
    gripper_rot: tuple = (0.0, 0.0, 0.0)
    gripper_open: bool = True
    held_object: int | None = None
    step_count: int = 0


def initial_state(scene: SceneSpec, seed, config: SimConfig) -> EnvState:
    """Gripper spawn away from every object so no task starts solved."""
    rng = np.random.default_rng(seed)
    lo = np.array(config.grid.origin)
    hi = config.grid.max_corner
    centers = np.array([p.center for p in scene.primitives]) if scene.primitives else np.zeros((0, 3))
    for _ in range(200):
        pos = np.array(
            [
                rng.uniform(lo[0] + config.margin, hi[0] - config.margin),
                rng.uniform(lo[1] + config.margin, hi[1] - config.margin),
                rng.uniform(*config.gripper_start_z),
            ]
        )
        if len(centers) == 0 or np.linalg.norm(centers - pos, axis=1).min() >= config.gripper_min_start_dist:
            return EnvState(scene=scene, gripper_pos=tuple(pos))
    raise RuntimeError("could not place gripper start")


def _with_center(scene: SceneSpec, object_id: int, center) -> SceneSpec:
    prims = tuple(
        replace(p, center=tuple(float(c) for c in center)) if p.object_id == object_id else p
        for p in scene.primitives
    )
    return replace(scene, primitives=prims)


def step(state: EnvState, action: Action, config: SimConfig) -> EnvState:
    """Apply one action: clamped move, rotation, grasp/release bookkeeping."""
    dpos = np.asarray(action.dpos, dtype=np.float64)
    norm = np.linalg.norm(dpos)
    if norm > config.max_step:
        dpos = dpos * (config.max_step / norm)
    drot = np.clip(np.asarray(action.drot, dtype=np.float64), -config.max_rot_step, config.max_rot_step)

    lo = np.array(config.grid.origin)
    hi = config.grid.max_corner
    pos = np.clip(np.asarray(state.gripper_pos) + dpos, lo, hi)
    rot = tuple(np.asarray(state.gripper_rot) + drot)

    scene = state.scene
    held = state.held_object
    if held is not None:
        scene = _with_center(scene, held, pos)

    gripper_open = state.gripper_open
    if action.gripper == 1:
        if held is None:
            graspable = [p for p in scene.primitives if p.object_id >= 1]
            if graspable:
                dists = [np.linalg.norm(np.array(p.center) - pos) for p in graspable]
                k = int(np.argmin(dists))
                if dists[k] <= config.grasp_radius:
                    held = graspable[k].object_id
                    scene = _with_center(scene, held, pos)
        gripper_open = False
    else:
        if held is not None:
            prim = next(p for p in scene.primitives if p.object_id == held)
            drop = (pos[0], pos[1], float(lo[2]) + prim.rest_half_height())
            scene = _with_center(scene, held, drop)
            held = None
        gripper_open = True

    return EnvState(
        scene=scene,
        gripper_pos=tuple(float(v) for v in pos),
        gripper_rot=rot,
        gripper_open=gripper_open,
        held_object=held,
        step_count=state.step_count + 1,
    )


def gripper_primitive(state: EnvState) -> Primitive:
    return Primitive("sphere", tuple(state.gripper_pos), GRIPPER_RADIUS, GRIPPER_RGB,
                     object_id=GRIPPER_ID, color_name="gray")


def render_env_view(state: EnvState, K: CameraIntrinsics, pose: CameraPose):
    """Scene plus the gripper marker, as the policy sees it."""
    return render(state.scene, K, pose, extra_primitives=(gripper_primitive(state),))


# ---------------------------------------------------------------------------
# Instructions, expert, success predicate
# ---------------------------------------------------------------------------

TASKS = ("reach", "lift")
COLOR_NAMES = tuple(PALETTE)
NUM_INSTRUCTIONS = len(TASKS) * len(COLOR_NAMES)


def instruction_name(instruction_id: int) -> str:
    task, color = instruction_task_color(instruction_id)
    return f"{task} {color}"


def instruction_task_color(instruction_id: int):
    if not 0 <= instruction_id < NUM_INSTRUCTIONS:
        raise ValueError(f"unknown instruction id {instruction_id}")
    return TASKS[instruction_id // len(COLOR_NAMES)], COLOR_NAMES[instruction_id % len(COLOR_NAMES)]


def instruction_id_for(task: str, color: str) -> int:
    return TASKS.index(task) * len(COLOR_NAMES) + COLOR_NAMES.index(color)


def _target_of(state: EnvState, instruction_id: int) -> Primitive:
    _, color = instruction_task_color(instruction_id)
    for p in state.scene.primitives:
        if p.color_name == color:
            return p
    raise ValueError(f"scene has no {color!r} object for instruction {instruction_id}")


def expert_action(state: EnvState, instruction_id: int, config: SimConfig) -> Action:
    """Scripted demonstrator: straight-line approach, grasp, and lift."""
    task, _ = instruction_task_color(instruction_id)
    target = _target_of(state, instruction_id)
    pos = np.asarray(state.gripper_pos)
    to_target = np.array(target.center) - pos
    dist = float(np.linalg.norm(to_target))

    if task == "reach":
        step_len = min(dist, config.max_step)
        dpos = to_target / dist * step_len if dist > 1e-12 else np.zeros(3)
        return Action(tuple(dpos), (0.0, 0.0, 0.0), 0)

    # lift
    if state.held_object != target.object_id:
        if dist <= config.grasp_radius:
            return Action(tuple(to_target), (0.0, 0.0, 0.0), 1)
        step_len = min(dist, config.max_step)
        return Action(tuple(to_target / dist * step_len), (0.0, 0.0, 0.0), 0)
    climb = min(config.max_step, max(config.lift_height + 0.03 - pos[2], 0.0))
    return Action((0.0, 0.0, climb), (0.0, 0.0, 0.0), 1)


def success(state: EnvState, instruction_id: int, config: SimConfig) -> bool:
    task, _ = instruction_task_color(instruction_id)
    target = _target_of(state, instruction_id)
    if task == "reach":
        d = np.linalg.norm(np.array(target.center) - np.asarray(state.gripper_pos))
        return bool(d <= config.reach_threshold)
    if state.held_object != target.object_id:
        return False
    return bool(target.center[2] >= config.lift_height)
