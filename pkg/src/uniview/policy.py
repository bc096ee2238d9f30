"""Instruction-conditioned policy on top of the unified grid features.

A small table of learned instruction tokens cross-attends into the
flattened grid features (plus optional wrist-camera features) through a
two-layer decoder; the tokens are max-pooled, passed through an LSTM that
carries state across timesteps, and a two-layer MLP emits six pose deltas
and one gripper logit.

Fine-tuning is imitation: per-step MSE on the pose deltas plus weighted
BCE on the gripper bit, summed over timesteps, trained with truncated
backpropagation through time. When the encoder groups are all frozen
(the headline configuration) the grid features of every demo frame are
precomputed once, which makes fine-tuning dramatically cheaper; the
frozen parameters are bit-identical either way.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, model_config, sim_config
from .datasets import load_demo_index, sample_rig
from .episodes import read_episode, render_state_frame
from .geometry import CameraRig
from .optim import AdamState, ParamStore, adam_step, load_checkpoint, save_checkpoint
from .scenesim import (
    NUM_INSTRUCTIONS,
    Action,
    SimConfig,
    initial_state,
    instruction_task_color,
    sample_scene,
    step,
    success,
)
from .tensor import Tensor, const, no_grad
from .uvformer import ENCODER_GROUPS, ModelConfig, encode_unified_view, init_encoder_params, project_queries, stack_projections, vision_backbone


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def init_policy_params(store: ParamStore, cfg: ModelConfig, seed: int = 0,
                       num_instructions: int = NUM_INSTRUCTIONS):
    rng = np.random.default_rng(seed)
    c = cfg.channels
    store.add("vocab.emb", rng.normal(0.0, 0.02, (num_instructions, cfg.instruction_tokens, c)))
    for j in range(cfg.fusion_layers):
        p = f"fusion.layer{j}."
        for blk in ("cross", "self"):
            store.add(p + blk + ".norm_g", np.ones(c))
            store.add(p + blk + ".norm_b", np.zeros(c))
            for nm in ("q", "k", "v", "out"):
                store.add(p + f"{blk}.{nm}_w", rng.normal(0.0, 0.02, (c, c)))
        store.add(p + "ffn.norm_g", np.ones(c))
        store.add(p + "ffn.norm_b", np.zeros(c))
        store.add(p + "ffn.w1", rng.normal(0.0, np.sqrt(2.0 / c), (c, cfg.ffn_mult * c)))
        store.add(p + "ffn.b1", np.zeros(cfg.ffn_mult * c))
        store.add(p + "ffn.w2", rng.normal(0.0, 0.02, (cfg.ffn_mult * c, c)))
        store.add(p + "ffn.b2", np.zeros(c))
    dh = cfg.lstm_hidden
    store.add("policy.lstm.w", rng.normal(0.0, 1.0 / np.sqrt(c + dh), (c + dh, 4 * dh)))
    store.add("policy.lstm.b", np.zeros(4 * dh))
    store.add("policy.mlp.w1", rng.normal(0.0, np.sqrt(2.0 / dh), (dh, cfg.mlp_hidden)))
    store.add("policy.mlp.b1", np.zeros(cfg.mlp_hidden))
    store.add("policy.mlp.w2", rng.normal(0.0, 0.01, (cfg.mlp_hidden, 7)))
    store.add("policy.mlp.b2", np.zeros(7))
    return store


POLICY_GROUPS = ("vocab.", "fusion.", "policy.")


# ---------------------------------------------------------------------------
# Fusion decoder and policy head
# ---------------------------------------------------------------------------

def _mha(q_src: Tensor, kv_src: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    """Standard softmax multi-head attention; bias-free projections."""
    S, I, C = q_src.shape
    M = kv_src.shape[-2]
    Ch = C // heads
    q = T.transpose(T.reshape(T.matmul(q_src, store[prefix + "q_w"]), (S, I, heads, Ch)), (0, 2, 1, 3))
    k = T.transpose(T.reshape(T.matmul(kv_src, store[prefix + "k_w"]), (S, M, heads, Ch)), (0, 2, 1, 3))
    v = T.transpose(T.reshape(T.matmul(kv_src, store[prefix + "v_w"]), (S, M, heads, Ch)), (0, 2, 1, 3))
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(Ch))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)                     # (S, heads, I, Ch)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (S, I, C))
    return T.matmul(ctx, store[prefix + "out_w"])


def _ln(x, store, prefix):
    return T.layer_norm(x, store[prefix + "norm_g"], store[prefix + "norm_b"])


def fusion_decode(uf_flat: Tensor, wrist: Tensor | None, tokens: Tensor,
                  store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Tokens (S, I, C) query the flattened grid (S, LB, C) [+ wrist (S, M, C)]."""
    kv = uf_flat if wrist is None else T.concat([uf_flat, wrist], axis=-2)
    x = tokens
    for j in range(cfg.fusion_layers):
        p = f"fusion.layer{j}."
        x = T.add(x, _mha(_ln(x, store, p + "cross."), kv, store, p + "cross.", cfg.heads))
        xl = _ln(x, store, p + "self.")
        x = T.add(x, _mha(xl, xl, store, p + "self.", cfg.heads))
        h = T.relu(T.affine(_ln(x, store, p + "ffn."), store[p + "ffn.w1"], store[p + "ffn.b1"]))
        x = T.add(x, T.affine(h, store[p + "ffn.w2"], store[p + "ffn.b2"]))
    return x


def policy_step(vl: Tensor, h_prev: Tensor, c_prev: Tensor, store: ParamStore):
    """(S, I, C) fused tokens -> (pose (S, 6), gripper logit (S,), h, c)."""
    pooled = T.max_pool_set(vl)
    h, c = T.lstm_cell(pooled, h_prev, c_prev, store["policy.lstm.w"], store["policy.lstm.b"])
    z = T.relu(T.affine(h, store["policy.mlp.w1"], store["policy.mlp.b1"]))
    out = T.affine(z, store["policy.mlp.w2"], store["policy.mlp.b2"])
    return out[:, :6], out[:, 6], h, c


# ---------------------------------------------------------------------------
# Imitation loss
# ---------------------------------------------------------------------------

def imitation_loss(pose_pred: Tensor, grip_logit: Tensor, demo_pose, demo_grip, lambda_gripper: float):
    """Sum over timesteps of MSE(pose) + lambda * BCE(gripper).

    pose_pred (T, 6), grip_logit (T,). Per-step MSE is the mean over the six
    components; summing T of those equals T times the all-element mean.
    """
    Tn = pose_pred.shape[0]
    if np.shape(demo_pose) != pose_pred.shape or np.shape(demo_grip) != grip_logit.shape:
        raise ValueError(
            f"demo/prediction length mismatch: {pose_pred.shape} vs {np.shape(demo_pose)}"
        )
    dt = pose_pred.dtype
    mse_term = T.mul(T.mse(pose_pred, np.asarray(demo_pose, dtype=dt)), float(Tn))
    bce_term = T.mul(T.bce_logits(grip_logit, np.asarray(demo_grip, dtype=dt)), float(Tn))
    total = T.add(mse_term, T.mul(bce_term, float(lambda_gripper)))
    return total, mse_term, bce_term


# ---------------------------------------------------------------------------
# Full-model forward helpers
# ---------------------------------------------------------------------------

def init_policy_model(cfg: ModelConfig, seed: int, num_instructions: int = NUM_INSTRUCTIONS) -> ParamStore:
    store = ParamStore()
    init_encoder_params(store, cfg, seed=seed)
    init_policy_params(store, cfg, seed=seed + 10, num_instructions=num_instructions)
    return store


def _grid_kv(images, proj, store, cfg, wrist_camera: int):
    """Encode one frame batch into the fusion key/value matrix (S, M, C)."""
    uf = encode_unified_view(images, proj, store, cfg)
    S = uf.shape[0]
    kv = T.reshape(uf, (S, cfg.num_pillars, cfg.channels))
    if wrist_camera >= 0:
        dt = store["queries.emb"].dtype
        feats = vision_backbone(const(np.ascontiguousarray(images, dtype=dt)), store, cfg)
        w = feats[:, wrist_camera]
        Hf, Wf = w.shape[1], w.shape[2]
        kv = T.concat([kv, T.reshape(w, (S, Hf * Wf, cfg.channels))], axis=-2)
    return kv


def policy_forward_step(kv: Tensor, instruction_id: int, h, c, store: ParamStore, cfg: ModelConfig):
    tokens = store["vocab.emb"][instruction_id][None]  # (1, I, C) slice keeps gradients
    vl = fusion_decode(kv, None, tokens, store, cfg)
    return policy_step(vl, h, c, store)


# ---------------------------------------------------------------------------
# Fine-tuning (TBPTT over episodes)
# ---------------------------------------------------------------------------

@dataclass
class FinetuneSettings:
    freeze_encoder: bool = False
    from_scratch: bool = False  # ignore any init checkpoint (train everything)
    wrist_camera: int = -1


def finetune_run(demo_dir, rc: RunConfig, out_dir, init_checkpoint=None,
                 settings: FinetuneSettings = FinetuneSettings(), log=None):
    """Imitation fine-tuning; writes checkpoint + JSONL metrics, returns summary."""
    if log is None:
        log = lambda msg: print(msg, flush=True)
    t_start = time.monotonic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = load_demo_index(demo_dir)
    if not paths:
        raise ValueError(f"no demo episodes in {demo_dir}")
    cfg = model_config(rc)
    dtype = np.float32 if rc.dtype == "float32" else np.float64

    store = init_policy_model(cfg, seed=rc.seed)
    store.astype(dtype)
    if init_checkpoint is not None and not settings.from_scratch:
        store.load_state_dict(load_checkpoint(init_checkpoint), strict=False)
    if settings.freeze_encoder:
        for g in ENCODER_GROUPS:
            store.freeze_group(g)
    adam = AdamState(store, lr=rc.lr_finetune, beta1=rc.adam_beta1, beta2=rc.adam_beta2, eps=rc.adam_eps)

    frozen_vision = settings.freeze_encoder
    episodes = [read_episode(p) for p in paths]
    proj_by_ep = [project_queries(ep.rig, cfg.grid) for ep in episodes]

    kv_cache = None
    if frozen_vision:
        kv_cache = []
        for ep, proj in zip(episodes, proj_by_ep):
            per_frame = []
            batch = stack_projections([proj])
            for fr in ep.frames[:-1]:  # the last frame has no action to predict
                with no_grad():
                    kv = _grid_kv(fr.rgb[None].astype(dtype), batch, store, cfg, settings.wrist_camera)
                per_frame.append(kv.data.astype(np.float32))
            kv_cache.append(per_frame)

    dh = cfg.lstm_hidden
    rng = np.random.default_rng([rc.seed, 88])
    lines = []
    for epoch in range(rc.finetune_epochs):
        order = rng.permutation(len(episodes))
        ep_loss = ep_mse = ep_bce = 0.0
        steps = 0
        for ei in order:
            ep = episodes[ei]
            Tn = len(ep.actions)
            if Tn == 0:
                continue
            demo_pose = np.array([[*a.dpos, *a.drot] for a in ep.actions], dtype=dtype)
            demo_grip = np.array([a.gripper for a in ep.actions], dtype=dtype)
            h = const(np.zeros((1, dh), dtype=dtype))
            c = const(np.zeros((1, dh), dtype=dtype))
            proj = stack_projections([proj_by_ep[ei]])
            for lo in range(0, Tn, rc.tbptt_window):
                hi = min(lo + rc.tbptt_window, Tn)
                poses, logits = [], []
                for t in range(lo, hi):
                    if frozen_vision:
                        kv = const(kv_cache[ei][t].astype(dtype))
                    else:
                        kv = _grid_kv(ep.frames[t].rgb[None].astype(dtype), proj, store, cfg,
                                      settings.wrist_camera)
                    pose, logit, h, c = policy_forward_step(kv, ep.instruction_id, h, c, store, cfg)
                    poses.append(pose)
                    logits.append(T.reshape(logit, (1,)))
                pose_seq = T.concat(poses, axis=0)
                logit_seq = T.concat(logits, axis=0)
                loss, mse_t, bce_t = imitation_loss(pose_seq, logit_seq,
                                                    demo_pose[lo:hi], demo_grip[lo:hi], rc.lambda_gripper)
                loss.backward()
                ep_loss += loss.item()
                ep_mse += mse_t.item()
                ep_bce += bce_t.item()
                steps += hi - lo
                # Truncate: next window restarts from detached state.
                h = const(h.data.copy())
                c = const(c.data.copy())
            adam_step(store, adam)
        row = {"epoch": epoch, "loss": ep_loss / steps, "mse": ep_mse / steps,
               "bce": ep_bce / steps, "wall_s": round(time.monotonic() - t_start, 3)}
        lines.append(json.dumps(row))
        log(f"epoch {epoch}: per-step loss={row['loss']:.6f} mse={row['mse']:.6f}")
    (out / "metrics.jsonl").write_text("\n".join(lines) + "\n")

    ckpt = out / "policy.uvck"
    save_checkpoint(ckpt, store)
    summary = {"checkpoint": str(ckpt), "episodes": len(episodes),
               "frozen": settings.freeze_encoder, "wall_s": time.monotonic() - t_start}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_policy_store(ckpt_path, rc: RunConfig) -> ParamStore:
    cfg = model_config(rc)
    store = init_policy_model(cfg, seed=rc.seed)
    store.astype(np.float32 if rc.dtype == "float32" else np.float64)
    store.load_state_dict(load_checkpoint(ckpt_path), strict=False)
    return store


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def rollout(store: ParamStore, env_seed, instruction_id: int, rig: CameraRig, rc: RunConfig,
            max_steps: int | None = None, scene=None, policy_fn=None):
    """Closed loop: render -> policy -> env step. Returns a result dict.

    scene defaults to a fresh sample from env_seed (demo-free scenes).
    policy_fn(frame, instruction_id, state) can replace the network, which
    keeps rollout bookkeeping testable without a trained checkpoint.
    """
    cfg = model_config(rc)
    sim = sim_config(rc)
    sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
    if scene is None:
        scene = sample_scene([env_seed, 0], sim)
    state = initial_state(scene, [env_seed, 1], sim)
    dtype = np.float32 if rc.dtype == "float32" else np.float64
    proj = stack_projections([project_queries(rig, cfg.grid)])
    dh = cfg.lstm_hidden
    h = const(np.zeros((1, dh), dtype=dtype))
    c = const(np.zeros((1, dh), dtype=dtype))
    if max_steps is None:
        max_steps = rc.max_episode_steps

    trajectory = [state.gripper_pos]
    steps = 0
    ok = success(state, instruction_id, sim)
    for _ in range(max_steps):
        if ok:
            break
        frame = render_state_frame(state, rig)
        if policy_fn is not None:
            action = policy_fn(frame, instruction_id, state)
        else:
            with no_grad():
                kv = _grid_kv(frame.rgb[None].astype(dtype), proj, store, cfg, -1)
                pose, logit, h, c = policy_forward_step(kv, instruction_id, h, c, store, cfg)
            p = pose.data[0].astype(np.float64)
            action = Action(dpos=tuple(p[:3]), drot=tuple(p[3:6]), gripper=int(logit.data[0] > 0.0))
        state = step(state, action, sim)
        trajectory.append(state.gripper_pos)
        steps += 1
        ok = success(state, instruction_id, sim)
    return {"success": bool(ok), "steps": steps, "trajectory": trajectory}


def rollout_chain(store: ParamStore, env_seed, instruction_ids, rig: CameraRig, rc: RunConfig,
                  max_steps_per_task: int | None = None, policy_fn=None):
    """Sequential tasks in one environment; advance only on success.

    Returns per-position success flags (False-padded after the first failure)
    mirroring the consecutive-task evaluation protocol.
    """
    cfg = model_config(rc)
    sim = sim_config(rc)
    sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
    scene = sample_scene([env_seed, 0], sim)
    state = initial_state(scene, [env_seed, 1], sim)
    dtype = np.float32 if rc.dtype == "float32" else np.float64
    proj = stack_projections([project_queries(rig, cfg.grid)])
    dh = cfg.lstm_hidden
    if max_steps_per_task is None:
        max_steps_per_task = rc.max_episode_steps

    flags = []
    for iid in instruction_ids:
        h = const(np.zeros((1, dh), dtype=dtype))
        c = const(np.zeros((1, dh), dtype=dtype))
        ok = success(state, iid, sim)
        for _ in range(max_steps_per_task):
            if ok:
                break
            frame = render_state_frame(state, rig)
            if policy_fn is not None:
                action = policy_fn(frame, iid, state)
            else:
                with no_grad():
                    kv = _grid_kv(frame.rgb[None].astype(dtype), proj, store, cfg, -1)
                    pose, logit, h, c = policy_forward_step(kv, iid, h, c, store, cfg)
                p = pose.data[0].astype(np.float64)
                action = Action(dpos=tuple(p[:3]), drot=tuple(p[3:6]), gripper=int(logit.data[0] > 0.0))
            state = step(state, action, sim)
            ok = success(state, iid, sim)
        flags.append(bool(ok))
        if not ok:
            break
    flags.extend([False] * (len(instruction_ids) - len(flags)))
    return flags


def evaluate_policy(store: ParamStore, rc: RunConfig, n_episodes: int, rig_family: str | None = None,
                    rig: CameraRig | None = None, task: str = "reach", seed_base: int = 500000,
                    out_path=None, chain: int = 0):
    """Success rate over fresh scenes; one JSONL row per episode plus a summary."""
    sim = sim_config(rc)
    sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
    rows = []
    successes = 0
    from .scenesim import instruction_id_for
    for e in range(n_episodes):
        env_seed = seed_base + e
        ep_rig = rig if rig is not None else sample_rig([rc.seed, 4000, e], rc, family=rig_family)
        scene = sample_scene([env_seed, 0], sim)
        rng = np.random.default_rng([env_seed, 2])
        colors = [p.color_name for p in scene.primitives if p.object_id >= 1]
        if chain > 1:
            k = min(chain, len(colors))
            picks = list(rng.choice(len(colors), size=k, replace=False))
            iids = [instruction_id_for(task, colors[i]) for i in picks]
            flags = rollout_chain(store, env_seed, iids, ep_rig, rc)
            successes += flags[0]
            rows.append({"instruction_id": iids[0], "env_seed": env_seed, "rig_id": e,
                         "success": bool(flags[0]), "steps": -1, "chain": flags})
        else:
            iid = instruction_id_for(task, colors[int(rng.integers(len(colors)))])
            res = rollout(store, env_seed, iid, ep_rig, rc, scene=scene)
            successes += res["success"]
            rows.append({"instruction_id": iid, "env_seed": env_seed, "rig_id": e,
                         "success": res["success"], "steps": res["steps"]})
    summary = {"episodes": n_episodes, "success_rate": successes / n_episodes}
    if chain > 1:
        max_len = max(len(r["chain"]) for r in rows)
        summary["chain_successes_per_position"] = [
            int(sum(r["chain"][k] if k < len(r["chain"]) else False for r in rows))
            for k in range(max_len)
        ]
    if out_path is not None:
        with open(out_path, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
            f.write(json.dumps({"summary": summary}) + "\n")
    return summary, rows
