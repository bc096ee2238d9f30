"""Dataset generation: randomized camera rigs, pre-training samples, demos.

Rig families for the generalization experiments are fixed here: "seen"
rigs draw camera azimuths from [0, 120) degrees with relative focal
lengths in [0.80, 1.10); "unseen" rigs from [180, 300) degrees with
focals in [1.15, 1.35). The ranges are disjoint on both axes, so an
unseen-family rig is a genuine parameter shift (opposite side of the
table, longer lenses), never an interpolation.

Per-item seeds derive from the master seed and the item index through
numpy's SeedSequence mechanism (default_rng accepts the [master, tag,
index] entropy list), so generation can be sharded or parallelized
per item without changing results.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, sim_config, workspace_grid
from .episodes import FLAG_DEMO, Episode, read_episode, render_scene_frame, render_state_frame, write_episode
from .geometry import CameraIntrinsics, CameraRig, load_rig, look_at_pose, save_rig
from .scenesim import (
    COLOR_NAMES,
    SimConfig,
    expert_action,
    initial_state,
    instruction_id_for,
    sample_scene,
    scene_from_json,
    scene_to_json,
    step,
    success,
)
from .voxelize import VoxelGrid, frame_to_voxels, load_voxels, save_voxels

RIG_FAMILIES = {
    "seen": {"azimuth_deg": (0.0, 120.0), "focal_rel": (0.80, 1.10)},
    "unseen": {"azimuth_deg": (180.0, 300.0), "focal_rel": (1.15, 1.35)},
}


def sample_rig(seed, cfg: RunConfig, family: str | None = None) -> CameraRig:
    """Random rig: cameras on a ring around the workspace, looking inward."""
    family = family or cfg.rig_family
    if family not in RIG_FAMILIES:
        raise ValueError(f"unknown rig family {family!r}")
    fam = RIG_FAMILIES[family]
    rng = np.random.default_rng(seed)
    grid = workspace_grid(cfg)
    center = grid.center
    target_base = np.array([center[0], center[1], grid.origin[2] + 0.25 * grid.extent[2]])

    az_lo, az_hi = np.deg2rad(fam["azimuth_deg"])
    n = cfg.cameras
    cams = []
    for i in range(n):
        az = az_lo + (i + rng.uniform()) * (az_hi - az_lo) / n
        radius = rng.uniform(*cfg.rig_radius)
        height = rng.uniform(*cfg.rig_height)
        eye = np.array([center[0] + radius * np.cos(az), center[1] + radius * np.sin(az), height])
        target = target_base + rng.uniform(-cfg.rig_lookat_jitter, cfg.rig_lookat_jitter, size=3)
        f = rng.uniform(*fam["focal_rel"]) * cfg.image_size
        intr = CameraIntrinsics(fx=f, fy=f, cx=cfg.image_size / 2, cy=cfg.image_size / 2,
                                width=cfg.image_size, height=cfg.image_size)
        cams.append((intr, look_at_pose(eye, target)))
    return CameraRig(cameras=tuple(cams))


# ---------------------------------------------------------------------------
# Pre-training dataset: static multi-view RGB-D + voxel ground truth
# ---------------------------------------------------------------------------

@dataclass
class PretrainItem:
    uvds: Path
    voxels: Path
    scene: Path
    scene_index: int
    rig_index: int


def generate_pretrain_dataset(out_dir, cfg: RunConfig, families=None, progress=None) -> list[PretrainItem]:
    """Render each scene under every rig; write UVDS + voxel + scene sidecars.

    With multiple families the rig slots alternate between them (the
    multi-family training-set construction for the cross-rig experiments).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    families = tuple(families) if families else (cfg.rig_family,)
    sim = sim_config(cfg)
    grid = sim.grid

    rigs = []
    for r in range(cfg.rigs_per_dataset):
        fam = families[r % len(families)]
        rigs.append(sample_rig([cfg.seed, 1000, r], cfg, family=fam))
    (out / "rigs").mkdir(exist_ok=True)
    for r, rig in enumerate(rigs):
        save_rig(rig, out / "rigs" / f"rig_{r}.json")

    items = []
    for s in range(cfg.pretrain_scenes):
        scene = sample_scene([cfg.seed, 2000, s], sim)
        scene_path = out / f"sample_{s:05d}.scene.json"
        scene_path.write_text(scene_to_json(scene))
        for r, rig in enumerate(rigs):
            frame = render_scene_frame(scene, rig)
            vox = frame_to_voxels(frame, rig, grid)
            base = out / f"sample_{s:05d}_{r}"
            ep = Episode(instruction_id=0, frames=[frame], actions=[], success=False, rig=rig, flags=0)
            write_episode(base.with_suffix(".uvds"), ep)
            save_voxels(base.with_suffix(".voxels.npz"), vox)
            items.append(PretrainItem(base.with_suffix(".uvds"), Path(str(base) + ".voxels.npz"),
                                      scene_path, s, r))
        if progress and (s + 1) % progress == 0:
            print(f"  generated scene {s + 1}/{cfg.pretrain_scenes}")

    manifest = {
        "kind": "pretrain",
        "scenes": cfg.pretrain_scenes,
        "rigs": cfg.rigs_per_dataset,
        "families": list(families),
        "items": [
            {"uvds": it.uvds.name, "voxels": it.voxels.name, "scene": it.scene.name,
             "scene_index": it.scene_index, "rig_index": it.rig_index}
            for it in items
        ],
    }
    (out / "dataset.json").write_text(json.dumps(manifest, indent=2))
    return items


def load_pretrain_index(data_dir) -> list[PretrainItem]:
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    if manifest.get("kind") != "pretrain":
        raise ValueError(f"{data_dir} is not a pretrain dataset")
    return [
        PretrainItem(root / d["uvds"], root / d["voxels"], root / d["scene"],
                     d["scene_index"], d["rig_index"])
        for d in manifest["items"]
    ]


def load_pretrain_item(item: PretrainItem):
    """(images (N, H, W, 3) float32, rig, gt VoxelGrid)."""
    ep = read_episode(item.uvds)
    return ep.frames[0].rgb, ep.rig, load_voxels(item.voxels)


def load_scene(item: PretrainItem):
    return scene_from_json(item.scene.read_text())


# ---------------------------------------------------------------------------
# Demonstration dataset: expert episodes
# ---------------------------------------------------------------------------

def run_expert_episode(scene, instruction_id: int, rig: CameraRig, start_seed, sim: SimConfig) -> Episode:
    """Roll the scripted expert to success (or the step cap) and record frames."""
    state = initial_state(scene, start_seed, sim)
    frames = [render_state_frame(state, rig, t=0)]
    actions = []
    done = success(state, instruction_id, sim)
    for t in range(sim.max_episode_steps):
        if done:
            break
        act = expert_action(state, instruction_id, sim)
        state = step(state, act, sim)
        actions.append(act)
        frames.append(render_state_frame(state, rig, t=t + 1))
        done = success(state, instruction_id, sim)
    return Episode(instruction_id=instruction_id, frames=frames, actions=actions,
                   success=bool(done), rig=rig, flags=FLAG_DEMO)


def _pick_instruction(rng, scene, task_mode: str, color_subset=None):
    colors = [p.color_name for p in scene.primitives if p.object_id >= 1]
    if color_subset is not None:
        colors = [c for c in colors if c in color_subset]
        if not colors:
            return None  # scene offers no target from this family's color half
    color = colors[int(rng.integers(len(colors)))]
    if task_mode == "mixed":
        task = "reach" if rng.uniform() < 0.5 else "lift"
    else:
        task = task_mode
    return instruction_id_for(task, color)


def generate_demo_dataset(out_dir, cfg: RunConfig, families=None, cross_task_split=False,
                          progress=None) -> list[Path]:
    """Expert demonstrations as UVDS episodes.

    families: rig families to draw from; episodes alternate between them.
    cross_task_split: with two families, tie each half of the color set to
    one family (the joint cross-task construction), so no family ever sees
    demonstrations for the other half's instructions.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    families = tuple(families) if families else (cfg.rig_family,)
    if cross_task_split and len(families) != 2:
        raise ValueError("cross_task_split requires exactly two families")
    sim = sim_config(cfg)
    sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})

    paths = []
    e = 0
    attempts = 0
    while e < cfg.demo_episodes:
        attempts += 1
        if attempts > cfg.demo_episodes * 3:
            raise RuntimeError("too many failed expert episodes; check the environment config")
        rng = np.random.default_rng([cfg.seed, 3000, attempts])
        scene = sample_scene([cfg.seed, 3100, attempts], sim)
        fam = families[e % len(families)]
        color_subset = None
        if cross_task_split:
            half = len(COLOR_NAMES) // 2
            color_subset = COLOR_NAMES[:half] if fam == families[0] else COLOR_NAMES[half:]
        iid = _pick_instruction(rng, scene, cfg.demo_task, color_subset)
        if iid is None:
            continue
        rig = sample_rig([cfg.seed, 3200, attempts], cfg, family=fam)
        ep = run_expert_episode(scene, instruction_id=iid, rig=rig,
                                start_seed=[cfg.seed, 3300, attempts], sim=sim)
        if not ep.success:
            continue
        path = out / f"demo_{e:05d}.uvds"
        write_episode(path, ep)
        paths.append(path)
        e += 1
        if progress and e % progress == 0:
            print(f"  generated demo {e}/{cfg.demo_episodes}")

    (out / "dataset.json").write_text(json.dumps({
        "kind": "demos",
        "episodes": len(paths),
        "families": list(families),
        "cross_task_split": cross_task_split,
        "task": cfg.demo_task,
        "items": [p.name for p in paths],
    }, indent=2))
    return paths


def load_demo_index(data_dir) -> list[Path]:
    root = Path(data_dir)
    manifest = json.loads((root / "dataset.json").read_text())
    if manifest.get("kind") != "demos":
        raise ValueError(f"{data_dir} is not a demo dataset")
    return [root / name for name in manifest["items"]]
