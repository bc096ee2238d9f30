"""Occupancy + RGB reconstruction pre-training on top of the grid features.

A two-layer 3x3 convolution over the (L, B) plane decodes each pillar
feature into P occupancy logits and P RGB triples. The loss is mean binary
cross-entropy over all cells plus a weighted L1 on the RGB of cells that
are truly occupied (empty cells have no defined color and contribute no
RGB gradient).

The module also carries the geometry-free baseline used by the
generalization comparison: camera features mean-pooled over views and
resampled onto the grid with no knowledge of the rig.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, model_config, workspace_grid
from .datasets import PretrainItem, load_pretrain_index, load_pretrain_item, load_scene, sample_rig
from .episodes import render_scene_frame
from .geometry import CameraRig
from .optim import AdamState, ParamStore, adam_step, load_checkpoint, save_checkpoint
from .tensor import Tensor, const, no_grad
from .uvformer import (
    ENCODER_GROUPS,
    ModelConfig,
    QueryProjection,
    encode_unified_view,
    init_encoder_params,
    project_queries,
    stack_projections,
    vision_backbone,
)
from .voxelize import VoxelGrid, frame_to_voxels, occupancy_iou, rgb_mae


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

def init_occ_decoder_params(store: ParamStore, cfg: ModelConfig, seed: int = 0, prefix: str = "occ."):
    rng = np.random.default_rng(seed)
    c, P = cfg.channels, cfg.pillar_points
    store.add(prefix + "conv0.w", rng.normal(0.0, np.sqrt(2.0 / (9 * c)), (3, 3, c, c)))
    store.add(prefix + "conv0.b", np.zeros(c))
    store.add(prefix + "conv1.w", rng.normal(0.0, np.sqrt(2.0 / (9 * c)), (3, 3, c, 4 * P)))
    store.add(prefix + "conv1.b", np.zeros(4 * P))
    return store


def occ_decode(uf: Tensor, store: ParamStore, cfg: ModelConfig, prefix: str = "occ."):
    """(S, L, B, C) grid features -> occupancy logits (S, L, B, P) and RGB (S, L, B, P, 3)."""
    S, L, B, _ = uf.shape
    P = cfg.pillar_points
    h = T.relu(T.conv2d(uf, store[prefix + "conv0.w"], store[prefix + "conv0.b"], stride=1, pad=1))
    out = T.conv2d(h, store[prefix + "conv1.w"], store[prefix + "conv1.b"], stride=1, pad=1)
    occ_logits = out[..., :P]
    rgb = T.sigmoid(T.reshape(out[..., P:], (S, L, B, P, 3)))
    return occ_logits, rgb


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def pretrain_loss(occ_logits: Tensor, rgb_pred: Tensor, gt_occ, gt_rgb, lambda_rgb: float):
    """(total, ce, l1) tensors. gt arrays broadcast against the predictions."""
    if occ_logits.shape != np.shape(gt_occ):
        raise ValueError(f"occupancy shape mismatch: {occ_logits.shape} vs {np.shape(gt_occ)}")
    if rgb_pred.shape != np.shape(gt_rgb):
        raise ValueError(f"rgb shape mismatch: {rgb_pred.shape} vs {np.shape(gt_rgb)}")
    dt = occ_logits.dtype
    ce = T.bce_logits(occ_logits, np.asarray(gt_occ, dtype=dt))
    l1 = T.masked_l1(rgb_pred, np.asarray(gt_rgb, dtype=dt),
                     (np.asarray(gt_occ) > 0.5)[..., None])
    total = T.add(ce, T.mul(l1, float(lambda_rgb)))
    return total, ce, l1


# ---------------------------------------------------------------------------
# Models: grid features from the encoder or from the pooled baseline
# ---------------------------------------------------------------------------

POOLED_KIND = "pooled"
ENCODER_KIND = "uvformer"


def init_pretrain_model(store: ParamStore, cfg: ModelConfig, seed: int, kind: str = ENCODER_KIND,
                        cameras: int = 3):
    if kind == ENCODER_KIND:
        init_encoder_params(store, cfg, seed=seed)
    elif kind == POOLED_KIND:
        # Geometry-free baseline: per-camera backbone features resampled onto
        # the grid by a fixed map and concatenated in camera order (it may
        # exploit camera identity, never camera parameters), then mixed down.
        full = init_encoder_params(ParamStore(), cfg, seed=seed)
        for name, t in full.items():
            if name.startswith("backbone."):
                store.add(name, t.data)
        rng = np.random.default_rng(seed + 2)
        c = cfg.channels
        store.add("pooled.mix_w", rng.normal(0.0, np.sqrt(2.0 / (cameras * c)), (cameras * c, c)))
        store.add("pooled.mix_b", np.zeros(c))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    init_occ_decoder_params(store, cfg, seed=seed + 1)
    return store


def _pooled_grid_uv(cfg: ModelConfig) -> np.ndarray:
    L, B, _ = cfg.grid.dims
    l, b = np.meshgrid(np.arange(L), np.arange(B), indexing="ij")
    return np.stack([(b + 0.5) / B, (l + 0.5) / L], axis=-1).reshape(L * B, 2)


def grid_features(images, projs, store: ParamStore, cfg: ModelConfig, kind: str) -> Tensor:
    """(S, N, H, W, 3) images -> (S, L, B, C) grid features for either model."""
    if kind == ENCODER_KIND:
        return encode_unified_view(images, projs, store, cfg)
    S, N = images.shape[0], images.shape[1]
    if store["pooled.mix_w"].shape[0] != N * cfg.channels:
        raise ValueError(
            f"pooled baseline was built for {store['pooled.mix_w'].shape[0] // cfg.channels} "
            f"cameras but got {N}"
        )
    dt = store["backbone.conv0.w"].dtype
    feats = vision_backbone(const(np.ascontiguousarray(images, dtype=dt)), store, cfg)
    Hf, Wf = feats.shape[2], feats.shape[3]
    per_cam = T.reshape(feats, (S * N, Hf, Wf, cfg.channels))
    uv = np.broadcast_to(_pooled_grid_uv(cfg).astype(dt), (S * N, cfg.num_pillars, 2))
    resampled = T.reshape(T.bilinear_sample(per_cam, const(np.ascontiguousarray(uv))),
                          (S, N, cfg.num_pillars, cfg.channels))
    stacked = T.reshape(T.transpose(resampled, (0, 2, 1, 3)), (S, cfg.num_pillars, N * cfg.channels))
    mixed = T.relu(T.affine(stacked, store["pooled.mix_w"], store["pooled.mix_b"]))
    L, B, _ = cfg.grid.dims
    return T.reshape(mixed, (S, L, B, cfg.channels))


def model_forward(images, projs, store, cfg, kind):
    uf = grid_features(images, projs, store, cfg, kind)
    return occ_decode(uf, store, cfg)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def split_by_scene(items: list[PretrainItem], holdout_fraction: float):
    scenes = sorted({it.scene_index for it in items})
    n_hold = max(1, int(round(len(scenes) * holdout_fraction)))
    holdout_scenes = set(scenes[-n_hold:])
    train = [it for it in items if it.scene_index not in holdout_scenes]
    hold = [it for it in items if it.scene_index in holdout_scenes]
    return train, hold


class _ProjectionCache:
    def __init__(self, grid):
        self.grid = grid
        self._cache = {}

    def get(self, rig: CameraRig, key=None) -> QueryProjection:
        if key is None:
            key = id(rig)
        if key not in self._cache:
            self._cache[key] = project_queries(rig, self.grid)
        return self._cache[key]


def _load_batch(items, dtype, proj_cache):
    images, projs, occs, rgbs = [], [], [], []
    for it in items:
        img, rig, vox = load_pretrain_item(it)
        images.append(img)
        projs.append(proj_cache.get(rig, key=("rig", it.rig_index)))
        occs.append(vox.occ)
        rgbs.append(vox.rgb)
    return (
        np.stack(images).astype(dtype),
        stack_projections(projs),
        np.stack(occs),
        np.stack(rgbs),
    )


def evaluate_occupancy(store, items, rc: RunConfig, kind: str = ENCODER_KIND,
                       rig_override: CameraRig | None = None, batch: int = 16):
    """Mean IoU@0.5 and RGB MAE over a sample list.

    With rig_override, inputs and ground truth are re-rendered for the same
    scenes under the override rig (its camera count may differ from the
    training rigs; the encoder does not care).
    """
    cfg = model_config(rc)
    grid = cfg.grid
    proj_cache = _ProjectionCache(grid)
    dt = np.float32 if rc.dtype == "float32" else np.float64
    ious, maes = [], []
    for lo in range(0, len(items), batch):
        chunk = items[lo:lo + batch]
        if rig_override is None:
            images, projs, occs, rgbs = _load_batch(chunk, dt, proj_cache)
        else:
            images, projs, occs, rgbs = [], [], [], []
            for it in chunk:
                scene = load_scene(it)
                frame = render_scene_frame(scene, rig_override)
                vox = frame_to_voxels(frame, rig_override, grid)
                images.append(frame.rgb)
                projs.append(proj_cache.get(rig_override, key="override"))
                occs.append(vox.occ)
                rgbs.append(vox.rgb)
            images = np.stack(images).astype(dt)
            projs = stack_projections(projs)
            occs, rgbs = np.stack(occs), np.stack(rgbs)
        with no_grad():
            logits, rgb_pred = model_forward(images, projs, store, cfg, kind)
        for i in range(len(chunk)):
            pred = VoxelGrid(occ=(logits.data[i] > 0.0).astype(np.float64),
                             rgb=rgb_pred.data[i].astype(np.float64))
            gt = VoxelGrid(occ=occs[i], rgb=rgbs[i])
            ious.append(occupancy_iou(pred, gt))
            maes.append(rgb_mae(pred, gt))
    return {"iou": float(np.mean(ious)), "rgb_mae": float(np.mean(maes))}


def pretrain_run(data_dir, rc: RunConfig, out_dir, kind: str = ENCODER_KIND, log=None):
    """Train encoder (or baseline) + decoder; write checkpoint + JSONL metrics."""
    if log is None:
        log = lambda msg: print(msg, flush=True)
    t_start = time.monotonic()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items = load_pretrain_index(data_dir)
    if not items:
        raise ValueError(f"dataset at {data_dir} is empty")
    train, hold = split_by_scene(items, rc.holdout_fraction)

    cfg = model_config(rc)
    store = init_pretrain_model(ParamStore(), cfg, seed=rc.seed, kind=kind, cameras=rc.cameras)
    dtype = np.float32 if rc.dtype == "float32" else np.float64
    store.astype(dtype)
    adam = AdamState(store, lr=rc.lr_pretrain, beta1=rc.adam_beta1, beta2=rc.adam_beta2, eps=rc.adam_eps)
    proj_cache = _ProjectionCache(cfg.grid)
    rng = np.random.default_rng([rc.seed, 77])

    metrics_path = out / "metrics.jsonl"
    lines = []
    for epoch in range(rc.pretrain_epochs):
        order = rng.permutation(len(train))
        ep_loss = ep_ce = ep_l1 = 0.0
        nb = 0
        for lo in range(0, len(order), rc.pretrain_batch):
            chunk = [train[i] for i in order[lo:lo + rc.pretrain_batch]]
            images, projs, occs, rgbs = _load_batch(chunk, dtype, proj_cache)
            logits, rgb_pred = model_forward(images, projs, store, cfg, kind)
            loss, ce, l1 = pretrain_loss(logits, rgb_pred, occs, rgbs, rc.lambda_rgb)
            loss.backward()
            adam_step(store, adam)
            ep_loss += loss.item()
            ep_ce += ce.item()
            ep_l1 += l1.item()
            nb += 1
        ev = evaluate_occupancy(store, hold, rc, kind=kind)
        row = {
            "epoch": epoch,
            "loss": ep_loss / nb,
            "ce": ep_ce / nb,
            "l1": ep_l1 / nb,
            "iou": ev["iou"],
            "rgb_mae": ev["rgb_mae"],
            "wall_s": round(time.monotonic() - t_start, 3),
        }
        lines.append(json.dumps(row))
        log(f"epoch {epoch}: loss={row['loss']:.4f} iou={row['iou']:.4f} rgb_mae={row['rgb_mae']:.4f}")
    metrics_path.write_text("\n".join(lines) + "\n")

    ckpt = out / "model.uvck"
    save_checkpoint(ckpt, store)
    summary = {"checkpoint": str(ckpt), "metrics": str(metrics_path), "kind": kind,
               "holdout_iou": json.loads(lines[-1])["iou"],
               "wall_s": time.monotonic() - t_start}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_pretrained_store(ckpt_path, rc: RunConfig, kind: str = ENCODER_KIND) -> ParamStore:
    cfg = model_config(rc)
    store = init_pretrain_model(ParamStore(), cfg, seed=rc.seed, kind=kind, cameras=rc.cameras)
    dtype = np.float32 if rc.dtype == "float32" else np.float64
    store.astype(dtype)
    store.load_state_dict(load_checkpoint(ckpt_path), strict=False)
    return store
