"""Fusion decoder, policy head, imitation loss, fine-tuning, rollouts."""

import json

import numpy as np
import pytest

import uniview.tensor as T
from conftest import micro_run_config
from uniview.config import model_config, sim_config
from uniview.datasets import sample_rig
from uniview.episodes import read_episode
from uniview.optim import load_checkpoint
from uniview.policy import (
    FinetuneSettings,
    finetune_run,
    fusion_decode,
    imitation_loss,
    init_policy_model,
    init_policy_params,
    load_policy_store,
    policy_step,
    rollout,
    rollout_chain,
)
from uniview.scenesim import SimConfig, expert_action, instruction_id_for, sample_scene
from uniview.tensor import Tensor, const, grad_check
from uniview.optim import ParamStore


def micro_cfg():
    return model_config(micro_run_config(channels=8, instruction_tokens=2, lstm_hidden=8, mlp_hidden=6))


def policy_store(seed=0, scale=0.05):
    cfg = micro_cfg()
    store = init_policy_params(ParamStore(), cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for _, p in store.items():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    return store, cfg


class TestFusionDecode:
    def test_token_count_preserved(self):
        store, cfg = policy_store()
        rng = np.random.default_rng(2)
        uf = const(rng.standard_normal((1, cfg.num_pillars, cfg.channels)))
        tokens = const(rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)))
        out = fusion_decode(uf, None, tokens, store, cfg)
        assert out.shape == tokens.shape

    def test_zeroed_cross_projection_severs_visual_stream(self):
        store, cfg = policy_store(seed=3)
        for j in range(cfg.fusion_layers):
            store[f"fusion.layer{j}.cross.out_w"].data[:] = 0.0
        rng = np.random.default_rng(4)
        tokens = const(rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)))
        uf_a = const(rng.standard_normal((1, cfg.num_pillars, cfg.channels)))
        uf_b = const(rng.standard_normal((1, cfg.num_pillars, cfg.channels)))
        out_a = fusion_decode(uf_a, None, tokens, store, cfg).data
        out_b = fusion_decode(uf_b, None, tokens, store, cfg).data
        np.testing.assert_array_equal(out_a, out_b)

    def test_wrist_features_join_kv(self):
        store, cfg = policy_store(seed=5)
        rng = np.random.default_rng(6)
        tokens = const(rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)))
        uf = const(rng.standard_normal((1, cfg.num_pillars, cfg.channels)))
        wrist_a = const(rng.standard_normal((1, 9, cfg.channels)))
        wrist_b = const(rng.standard_normal((1, 9, cfg.channels)))
        out_a = fusion_decode(uf, wrist_a, tokens, store, cfg).data
        out_b = fusion_decode(uf, wrist_b, tokens, store, cfg).data
        assert not np.array_equal(out_a, out_b)

    def test_gradcheck_micro(self):
        store, cfg = policy_store(seed=7, scale=0.1)
        rng = np.random.default_rng(8)
        uf = Tensor(rng.standard_normal((1, cfg.num_pillars, cfg.channels)), requires_grad=True)
        tokens = Tensor(rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)), requires_grad=True)
        ps = [store["fusion.layer0.cross.q_w"], store["fusion.layer0.cross.out_w"],
              store["fusion.layer1.ffn.w1"], store["fusion.layer0.self.v_w"]]

        def fn(uf_, tok_, *rest):
            return fusion_decode(uf_, None, tok_, store, cfg)

        assert grad_check(fn, [uf, tokens], eps=1e-5) <= 1e-4
        assert grad_check(fn, [uf, tokens] + ps, eps=1e-5) <= 1e-4


class TestPolicyStep:
    def test_single_token_pools_to_itself(self):
        store, cfg = policy_store(seed=9)
        rng = np.random.default_rng(10)
        vl1 = rng.standard_normal((1, 1, cfg.channels))
        pooled = T.max_pool_set(const(vl1))
        np.testing.assert_array_equal(pooled.data, vl1[:, 0])

    def test_zero_mlp_weights_constant_output(self):
        store, cfg = policy_store(seed=11)
        store["policy.mlp.w2"].data[:] = 0.0
        b = np.arange(7.0) * 0.1
        store["policy.mlp.b2"].data[:] = b
        rng = np.random.default_rng(12)
        dh = cfg.lstm_hidden
        h = const(np.zeros((1, dh)))
        c = const(np.zeros((1, dh)))
        for _ in range(3):
            vl = const(rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)))
            pose, logit, h, c = policy_step(vl, h, c, store)
            np.testing.assert_allclose(pose.data[0], b[:6], atol=1e-12)
            assert logit.data[0] == pytest.approx(b[6], abs=1e-12)

    def test_two_calls_equal_manual_unroll(self):
        store, cfg = policy_store(seed=13)
        rng = np.random.default_rng(14)
        dh = cfg.lstm_hidden
        vls = [rng.standard_normal((1, cfg.instruction_tokens, cfg.channels)) for _ in range(2)]
        h = const(np.zeros((1, dh)))
        c = const(np.zeros((1, dh)))
        outs = []
        for vl in vls:
            pose, logit, h, c = policy_step(const(vl), h, c, store)
            outs.append((pose.data.copy(), float(logit.data[0])))

        def sig(x):
            return 1.0 / (1.0 + np.exp(-x))

        hv = np.zeros((1, dh))
        cv = np.zeros((1, dh))
        w, b = store["policy.lstm.w"].data, store["policy.lstm.b"].data
        for k, vl in enumerate(vls):
            pooled = vl.max(axis=1)
            z = np.concatenate([pooled, hv], axis=-1) @ w + b
            i, f, g, o = np.split(z, 4, axis=-1)
            cv = sig(f) * cv + sig(i) * np.tanh(g)
            hv = sig(o) * np.tanh(cv)
            zz = np.maximum(hv @ store["policy.mlp.w1"].data + store["policy.mlp.b1"].data, 0.0)
            out = zz @ store["policy.mlp.w2"].data + store["policy.mlp.b2"].data
            np.testing.assert_allclose(outs[k][0], out[:, :6], atol=1e-12)
            assert outs[k][1] == pytest.approx(out[0, 6], abs=1e-12)


class TestImitationLoss:
    def test_zero_at_demonstration(self):
        rng = np.random.default_rng(15)
        demo_pose = rng.standard_normal((4, 6))
        pose = Tensor(demo_pose.copy(), requires_grad=True)
        logit = Tensor(rng.standard_normal(4), requires_grad=True)
        total, mse_t, _ = imitation_loss(pose, logit, demo_pose, (rng.uniform(size=4) < 0.5).astype(float), 0.0)
        assert total.item() == 0.0 and mse_t.item() == 0.0

    def test_saturated_gripper_logits_negligible_bce(self):
        # log(1 + e^-10) = 4.54e-5 per step; two steps stay under 1e-4
        demo_grip = np.array([1.0, 0.0])
        logit = Tensor(np.array([10.0, -10.0]), requires_grad=True)
        pose = Tensor(np.zeros((2, 6)), requires_grad=True)
        total, _, bce_t = imitation_loss(pose, logit, np.zeros((2, 6)), demo_grip, 1.0)
        assert bce_t.item() < 1e-4

    def test_matches_hand_recomputation(self):
        rng = np.random.default_rng(16)
        Tn = 3
        pose = Tensor(rng.standard_normal((Tn, 6)), requires_grad=True)
        logit = Tensor(rng.standard_normal(Tn), requires_grad=True)
        demo_pose = rng.standard_normal((Tn, 6))
        demo_grip = (rng.uniform(size=Tn) < 0.5).astype(float)
        lam = 0.37
        total, _, _ = imitation_loss(pose, logit, demo_pose, demo_grip, lam)

        hand = 0.0
        for t in range(Tn):
            hand += np.mean((pose.data[t] - demo_pose[t]) ** 2)
            z, y = logit.data[t], demo_grip[t]
            hand += lam * (max(z, 0) - z * y + np.log1p(np.exp(-abs(z))))
        assert total.item() == pytest.approx(hand, rel=1e-12)

    def test_length_mismatch_rejected(self):
        pose = Tensor(np.zeros((3, 6)))
        logit = Tensor(np.zeros(3))
        with pytest.raises(ValueError):
            imitation_loss(pose, logit, np.zeros((2, 6)), np.zeros(3), 1.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(17)
        pose = Tensor(rng.standard_normal((3, 6)), requires_grad=True)
        logit = Tensor(rng.standard_normal(3), requires_grad=True)
        demo_pose = rng.standard_normal((3, 6))
        demo_grip = np.array([1.0, 0.0, 1.0])
        fn = lambda p, l: imitation_loss(p, l, demo_pose, demo_grip, 0.5)[0]
        assert grad_check(fn, [pose, logit], eps=1e-5) <= 1e-6


class TestFinetune:
    def test_frozen_groups_bit_identical(self, micro_demo_data, tmp_path):
        # Real pipeline: the init checkpoint holds float32-trained values
        # (exactly representable in the float64 file format), so frozen
        # parameters must round-trip bit-exactly through fine-tuning.
        root, rc = micro_demo_data
        rc = micro_run_config(finetune_epochs=1)
        init_store = init_policy_model(model_config(rc), seed=rc.seed)
        init_store.astype(np.float32)
        from uniview.optim import save_checkpoint
        init_path = tmp_path / "init.uvck"
        save_checkpoint(init_path, init_store)
        init_ckpt = load_checkpoint(init_path)

        out = tmp_path / "frozen"
        finetune_run(root, rc, out, init_checkpoint=init_path,
                     settings=FinetuneSettings(freeze_encoder=True),
                     log=lambda *_: None)
        ckpt = load_checkpoint(out / "policy.uvck")
        for name, arr in init_ckpt.items():
            if name.startswith(("uvformer.", "backbone.", "queries.")):
                assert np.array_equal(ckpt[name], arr), f"{name} changed while frozen"
        changed = [n for n in init_ckpt
                   if n.startswith("policy.") and not np.array_equal(ckpt[n], init_ckpt[n])]
        assert changed, "policy parameters should have trained"

    def test_overfit_few_episodes(self, micro_demo_data, tmp_path):
        root, rc = micro_demo_data
        rc = micro_run_config(finetune_epochs=60, lr_finetune=3e-3)
        out = tmp_path / "overfit"
        finetune_run(root, rc, out, init_checkpoint=None,
                     settings=FinetuneSettings(freeze_encoder=True, from_scratch=True),
                     log=lambda *_: None)
        rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        assert rows[-1]["loss"] < 0.1 * rows[0]["loss"]

    def test_seeded_determinism(self, micro_demo_data, tmp_path):
        root, rc = micro_demo_data
        rc = micro_run_config(finetune_epochs=2)
        metrics = []
        for d in ("a", "b"):
            out = tmp_path / d
            finetune_run(root, rc, out, init_checkpoint=None,
                         settings=FinetuneSettings(freeze_encoder=True, from_scratch=True),
                         log=lambda *_: None)
            rows = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
            for r in rows:
                r.pop("wall_s")
            metrics.append(rows)
        assert metrics[0] == metrics[1]

    def test_empty_demos_rejected(self, tmp_path):
        (tmp_path / "dataset.json").write_text(json.dumps({"kind": "demos", "items": []}))
        with pytest.raises(ValueError):
            finetune_run(tmp_path, micro_run_config(), tmp_path / "out")


class TestRollout:
    def test_zero_budget_fails_with_zero_steps(self):
        rc = micro_run_config()
        store = init_policy_model(model_config(rc), seed=0)
        store.astype(np.float32)
        sim = sim_config(rc)
        sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
        scene = sample_scene([11, 0], sim)
        iid = instruction_id_for("reach", scene.primitives[0].color_name)
        rig = sample_rig(0, rc)
        res = rollout(store, 11, iid, rig, rc, max_steps=0)
        assert res == {"success": False, "steps": 0, "trajectory": res["trajectory"]}
        assert len(res["trajectory"]) == 1

    def test_expert_policy_fn_succeeds(self):
        rc = micro_run_config()
        store = init_policy_model(model_config(rc), seed=0)
        sim = sim_config(rc)
        sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
        scene = sample_scene([21, 0], sim)
        iid = instruction_id_for("lift", scene.primitives[0].color_name)
        rig = sample_rig(1, rc)
        fn = lambda frame, i, state: expert_action(state, i, sim)
        res = rollout(store, 21, iid, rig, rc, policy_fn=fn)
        assert res["success"]
        assert res["steps"] > 0

    def test_chain_reports_per_position(self):
        rc = micro_run_config()
        store = init_policy_model(model_config(rc), seed=0)
        sim = sim_config(rc)
        sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
        scene = sample_scene([31, 0], sim)
        colors = [p.color_name for p in scene.primitives[:2]]
        iids = [instruction_id_for("reach", c) for c in colors]
        rig = sample_rig(2, rc)
        fn = lambda frame, i, state: expert_action(state, i, sim)
        flags = rollout_chain(store, 31, iids, rig, rc, policy_fn=fn)
        assert flags == [True] * len(iids)
        # Zero budget: first fails, rest are padded False.
        flags0 = rollout_chain(store, 31, iids, rig, rc, max_steps_per_task=0, policy_fn=fn)
        assert flags0 == [False] * len(iids)
