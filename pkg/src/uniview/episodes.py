"""Multi-camera frames, episodes, and the UVDS record format.

UVDS layout (one file per episode, little-endian throughout):

    bytes 0..7   magic "UVDS0001"
    6 x int32    N cameras, H, W, T frames, instruction_id, flags
    uint32 + N   length-prefixed camera-rig JSON (UTF-8)
    T frames     rgb float32 [N][H][W][3], then depth float32 [N][H][W]
    (T-1) x 7    float32 actions: dpos xyz, drot xyz, gripper as float
    (T-1) bytes  uint8 gripper commands (canonical binary state)

Flag bits: bit 0 = demo episode (0 for a static pre-training sample),
bit 1 = episode success.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraRig, rig_from_json, rig_to_json
from .scenesim import Action, EnvState, SceneSpec, render, render_env_view

UVDS_MAGIC = b"UVDS0001"
FLAG_DEMO = 1
FLAG_SUCCESS = 2


@dataclass
class Frame:
    rgb: np.ndarray    # (N, H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (N, H, W) float32, 0 where no hit
    t: int = 0

    def __post_init__(self):
        if self.rgb.shape[:3] != self.depth.shape or self.rgb.shape[3] != 3:
            raise ValueError(f"frame shapes disagree: rgb {self.rgb.shape} depth {self.depth.shape}")


@dataclass
class Episode:
    instruction_id: int
    frames: list
    actions: list
    success: bool
    rig: CameraRig
    flags: int = FLAG_DEMO

    def __post_init__(self):
        if len(self.actions) != len(self.frames) - 1:
            raise ValueError(
                f"episode must have T-1 actions, got {len(self.actions)} for {len(self.frames)} frames"
            )


def render_scene_frame(scene: SceneSpec, rig: CameraRig, t: int = 0) -> Frame:
    rgbs, depths = [], []
    for intr, pose in rig:
        rgb, depth = render(scene, intr, pose)
        rgbs.append(rgb.astype(np.float32))
        depths.append(depth.astype(np.float32))
    return Frame(rgb=np.stack(rgbs), depth=np.stack(depths), t=t)


def render_state_frame(state: EnvState, rig: CameraRig, t: int = 0) -> Frame:
    rgbs, depths = [], []
    for intr, pose in rig:
        rgb, depth = render_env_view(state, intr, pose)
        rgbs.append(rgb.astype(np.float32))
        depths.append(depth.astype(np.float32))
    return Frame(rgb=np.stack(rgbs), depth=np.stack(depths), t=t)


def write_episode(path, episode: Episode) -> None:
    frames = episode.frames
    N, H, W, _ = frames[0].rgb.shape
    T = len(frames)
    flags = episode.flags | (FLAG_SUCCESS if episode.success else 0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(UVDS_MAGIC)
        f.write(struct.pack("<6i", N, H, W, T, episode.instruction_id, flags))
        rig_raw = rig_to_json(episode.rig).encode("utf-8")
        f.write(struct.pack("<I", len(rig_raw)))
        f.write(rig_raw)
        for fr in frames:
            if fr.rgb.shape != (N, H, W, 3):
                raise ValueError("all frames in an episode must share one shape")
            f.write(np.ascontiguousarray(fr.rgb, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(fr.depth, dtype="<f4").tobytes())
        avec = np.array([a.as_vector() for a in episode.actions], dtype="<f4").reshape(-1, 7)
        f.write(avec.tobytes())
        f.write(np.array([a.gripper for a in episode.actions], dtype=np.uint8).tobytes())


def read_episode(path) -> Episode:
    blob = Path(path).read_bytes()
    if blob[:8] != UVDS_MAGIC:
        raise ValueError(f"{path}: bad UVDS magic {blob[:8]!r}")
    N, H, W, T, instruction_id, flags = struct.unpack_from("<6i", blob, 8)
    off = 8 + 24
    (rig_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    rig = rig_from_json(blob[off:off + rig_len].decode("utf-8"))
    off += rig_len
    if len(rig) != N:
        raise ValueError(f"{path}: header says {N} cameras but rig JSON has {len(rig)}")

    frames = []
    rgb_count = N * H * W * 3
    depth_count = N * H * W
    for t in range(T):
        rgb = np.frombuffer(blob, dtype="<f4", count=rgb_count, offset=off).reshape(N, H, W, 3)
        off += rgb_count * 4
        depth = np.frombuffer(blob, dtype="<f4", count=depth_count, offset=off).reshape(N, H, W)
        off += depth_count * 4
        frames.append(Frame(rgb=rgb.copy(), depth=depth.copy(), t=t))

    avec = np.frombuffer(blob, dtype="<f4", count=(T - 1) * 7, offset=off).reshape(T - 1, 7)
    off += (T - 1) * 7 * 4
    gbytes = np.frombuffer(blob, dtype=np.uint8, count=T - 1, offset=off)
    actions = [
        Action(dpos=tuple(float(v) for v in avec[i, :3]),
               drot=tuple(float(v) for v in avec[i, 3:6]),
               gripper=int(gbytes[i]))
        for i in range(T - 1)
    ]
    return Episode(
        instruction_id=instruction_id,
        frames=frames,
        actions=actions,
        success=bool(flags & FLAG_SUCCESS),
        rig=rig,
        flags=flags,
    )


def read_episode_header(path):
    """(N, H, W, T, instruction_id, flags) without loading frame data."""
    with open(path, "rb") as f:
        head = f.read(8 + 24)
    if head[:8] != UVDS_MAGIC:
        raise ValueError(f"{path}: bad UVDS magic")
    return struct.unpack_from("<6i", head, 8)
