"""Rig randomization families and dataset generation contracts."""

import json

import numpy as np
import pytest

from conftest import micro_run_config
from uniview.datasets import (
    RIG_FAMILIES,
    generate_demo_dataset,
    generate_pretrain_dataset,
    load_demo_index,
    load_pretrain_index,
    load_pretrain_item,
    load_scene,
    run_expert_episode,
    sample_rig,
)
from uniview.config import sim_config, workspace_grid
from uniview.episodes import FLAG_DEMO, read_episode
from uniview.geometry import project_point
from uniview.scenesim import COLOR_NAMES, SimConfig, instruction_task_color, sample_scene


class TestRigFamilies:
    def test_family_ranges_are_disjoint(self):
        seen, unseen = RIG_FAMILIES["seen"], RIG_FAMILIES["unseen"]
        assert seen["azimuth_deg"][1] <= unseen["azimuth_deg"][0]
        assert seen["focal_rel"][1] <= unseen["focal_rel"][0]

    def azimuth_of(self, pose, center):
        eye = pose.camera_center()
        return np.rad2deg(np.arctan2(eye[1] - center[1], eye[0] - center[0])) % 360.0

    def test_sampled_rigs_respect_their_family(self):
        rc = micro_run_config()
        center = workspace_grid(rc).center
        for fam in ("seen", "unseen"):
            lo, hi = RIG_FAMILIES[fam]["azimuth_deg"]
            flo, fhi = RIG_FAMILIES[fam]["focal_rel"]
            for s in range(20):
                rig = sample_rig([7, s], rc, family=fam)
                for intr, pose in rig:
                    az = self.azimuth_of(pose, center)
                    assert lo - 1e-9 <= az < hi + 1e-9
                    assert flo * rc.image_size <= intr.fx < fhi * rc.image_size

    def test_cameras_see_the_workspace(self):
        rc = micro_run_config()
        center = workspace_grid(rc).center
        for fam in ("seen", "unseen"):
            rig = sample_rig(3, rc, family=fam)
            for intr, pose in rig:
                _, _, valid = project_point(intr, pose, center)
                assert valid

    def test_deterministic(self):
        rc = micro_run_config()
        a = sample_rig(5, rc)
        b = sample_rig(5, rc)
        for (ia, pa), (ib, pb) in zip(a, b):
            assert ia == ib
            assert np.array_equal(pa.rotation, pb.rotation)

    def test_unknown_family_rejected(self):
        with pytest.raises(ValueError):
            sample_rig(0, micro_run_config(), family="sideways")


class TestPretrainGeneration:
    def test_layout_and_ground_truth(self, micro_pretrain_data):
        root, rc = micro_pretrain_data
        items = load_pretrain_index(root)
        assert len(items) == rc.pretrain_scenes * rc.rigs_per_dataset
        img, rig, vox = load_pretrain_item(items[0])
        assert img.shape == (rc.cameras, rc.image_size, rc.image_size, 3)
        assert vox.occ.shape == tuple(rc.grid_dims)
        assert vox.occ.sum() > 0
        scene = load_scene(items[0])
        assert any(p.object_id == -1 for p in scene.primitives)  # marker sphere present

    def test_ground_truth_matches_revoxelization(self, micro_pretrain_data):
        from uniview.episodes import Frame
        from uniview.voxelize import frame_to_voxels

        root, rc = micro_pretrain_data
        item = load_pretrain_index(root)[1]
        ep = read_episode(item.uvds)
        vox = frame_to_voxels(ep.frames[0], ep.rig, workspace_grid(rc))
        from uniview.voxelize import load_voxels
        stored = load_voxels(item.voxels)
        assert np.array_equal(vox.occ, stored.occ)
        np.testing.assert_allclose(vox.rgb, stored.rgb, atol=1e-6)

    def test_multi_family_alternates_rigs(self, tmp_path):
        rc = micro_run_config(pretrain_scenes=1, rigs_per_dataset=2)
        generate_pretrain_dataset(tmp_path, rc, families=("seen", "unseen"))
        manifest = json.loads((tmp_path / "dataset.json").read_text())
        assert manifest["families"] == ["seen", "unseen"]


class TestDemoGeneration:
    def test_all_episodes_succeed_and_flagged(self, micro_demo_data):
        root, rc = micro_demo_data
        for p in load_demo_index(root):
            ep = read_episode(p)
            assert ep.success
            assert ep.flags & FLAG_DEMO
            assert len(ep.actions) == len(ep.frames) - 1
            task, color = instruction_task_color(ep.instruction_id)
            assert task == rc.demo_task

    def test_cross_task_split_separates_colors_by_family(self, tmp_path):
        rc = micro_run_config(demo_episodes=8, demo_task="reach")
        generate_demo_dataset(tmp_path, rc, families=("seen", "unseen"), cross_task_split=True)
        half = len(COLOR_NAMES) // 2
        first_half, second_half = set(COLOR_NAMES[:half]), set(COLOR_NAMES[half:])
        for i, p in enumerate(load_demo_index(tmp_path)):
            ep = read_episode(p)
            _, color = instruction_task_color(ep.instruction_id)
            expected = first_half if i % 2 == 0 else second_half
            assert color in expected

    def test_expert_episode_runs_to_success(self):
        rc = micro_run_config()
        sim = sim_config(rc)
        sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
        scene = sample_scene(2, sim)
        rig = sample_rig(2, rc)
        from uniview.scenesim import instruction_id_for
        ep = run_expert_episode(scene, instruction_id_for("lift", scene.primitives[0].color_name),
                                rig, start_seed=0, sim=sim)
        assert ep.success
        assert len(ep.frames) >= 2
