"""Lift multi-camera image features onto the workspace pillar grid.

Each ground-plane pillar owns a learnable query embedding and P fixed 3-D
reference points (the cell centers along its vertical). Spatial
cross-attention projects those points into every camera, samples the
camera feature maps at a few learned offsets around each projection,
softmax-combines the samples per head over the valid points, and averages
the result over the cameras that actually see the pillar. Pillars seen by
no camera pass their query through unchanged. Two encoder layers, each
[cross-attention, FFN, self-attention, FFN] with pre-norm residuals; the
grid self-attention uses raw scaled dot-product scores with no softmax.

All geometry (projections, validity) is precomputed per rig as constants;
gradients flow through embeddings, feature maps, and the learned offsets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .geometry import CameraRig, WorkspaceGrid, all_cell_centers, project_points
from .optim import ParamStore
from .tensor import Tensor, const

BACKBONE_STRIDE = 8


@dataclass(frozen=True)
class ModelConfig:
    grid: WorkspaceGrid = field(default_factory=WorkspaceGrid)
    channels: int = 64          # C, must be divisible by heads
    heads: int = 2
    offsets_per_point: int = 2  # K sampling offsets per reference point
    encoder_layers: int = 2
    ffn_mult: int = 4
    fusion_layers: int = 2      # instruction-token decoder depth
    instruction_tokens: int = 8
    lstm_hidden: int = 128
    mlp_hidden: int = 64

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")

    @property
    def pillar_points(self) -> int:
        return self.grid.dims[2]

    @property
    def num_pillars(self) -> int:
        return self.grid.dims[0] * self.grid.dims[1]


# ---------------------------------------------------------------------------
# Queries and projection geometry
# ---------------------------------------------------------------------------

@dataclass
class UniViewQueries:
    pos: np.ndarray  # (L, B, 3P): P stacked (x, y, z) reference points per pillar
    emb: np.ndarray  # (L, B, C) initial learnable features


def build_queries(grid: WorkspaceGrid, channels: int, init_seed: int = 0) -> UniViewQueries:
    L, B, P = grid.dims
    centers = all_cell_centers(grid)  # (L, B, P, 3)
    pos = centers.reshape(L, B, 3 * P)
    rng = np.random.default_rng(init_seed)
    emb = rng.normal(0.0, 0.02, size=(L, B, channels))
    return UniViewQueries(pos=pos, emb=emb)


@dataclass
class QueryProjection:
    """Per-rig constants: where each pillar reference point lands in each image."""

    uv: np.ndarray     # (N, LB, P, 2) normalized image coords; invalid entries sanitized to 0.5
    valid: np.ndarray  # (N, LB, P) bool


def project_queries(rig: CameraRig, grid: WorkspaceGrid) -> QueryProjection:
    L, B, P = grid.dims
    pts = all_cell_centers(grid).reshape(-1, 3)  # (LB*P, 3)
    uvs, valids = [], []
    for intr, pose in rig:
        pix, _, valid = project_points(intr, pose, pts)
        uv = np.stack([pix[:, 0] / intr.width, pix[:, 1] / intr.height], axis=1)
        uv = np.where(valid[:, None], uv, 0.5)
        uvs.append(uv.reshape(L * B, P, 2))
        valids.append(valid.reshape(L * B, P))
    return QueryProjection(uv=np.stack(uvs), valid=np.stack(valids))


def stack_projections(projs) -> QueryProjection:
    """Batch per-sample projections; all samples must share a camera count."""
    ns = {p.uv.shape[0] for p in projs}
    if len(ns) != 1:
        raise ValueError(f"cannot batch rigs with differing camera counts: {sorted(ns)}")
    return QueryProjection(uv=np.stack([p.uv for p in projs]), valid=np.stack([p.valid for p in projs]))


# ---------------------------------------------------------------------------
# Parameter initialization
# ---------------------------------------------------------------------------

def _add_ffn(store: ParamStore, prefix: str, c: int, hidden: int, rng):
    store.add(prefix + "norm_g", np.ones(c))
    store.add(prefix + "norm_b", np.zeros(c))
    store.add(prefix + "w1", rng.normal(0.0, np.sqrt(2.0 / c), (c, hidden)))
    store.add(prefix + "b1", np.zeros(hidden))
    store.add(prefix + "w2", rng.normal(0.0, 0.02, (hidden, c)))
    store.add(prefix + "b2", np.zeros(c))


def init_encoder_params(store: ParamStore, cfg: ModelConfig, seed: int = 0):
    """Backbone + queries + encoder parameters, grouped by name prefix."""
    rng = np.random.default_rng(seed)
    c = cfg.channels
    chans = [3, max(c // 4, 4), max(c // 2, 4), c]
    for i in range(3):
        cin, cout = chans[i], chans[i + 1]
        store.add(f"backbone.conv{i}.w", rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout)))
        store.add(f"backbone.conv{i}.b", np.zeros(cout))

    store.add("queries.emb", build_queries(cfg.grid, c, init_seed=seed).emb)

    P, K, H = cfg.pillar_points, cfg.offsets_per_point, cfg.heads
    for j in range(cfg.encoder_layers):
        p = f"uvformer.layer{j}."
        store.add(p + "sca.norm_g", np.ones(c))
        store.add(p + "sca.norm_b", np.zeros(c))
        # Offsets start at zero: sampling begins at the exact projections.
        store.add(p + "sca.offset_w", np.zeros((c, H * P * K * 2)))
        store.add(p + "sca.offset_b", np.zeros(H * P * K * 2))
        store.add(p + "sca.weight_w", np.zeros((c, H * P * K)))
        store.add(p + "sca.weight_b", np.zeros(H * P * K))
        store.add(p + "sca.value_w", rng.normal(0.0, 0.02, (c, c)))
        store.add(p + "sca.value_b", np.zeros(c))
        store.add(p + "sca.out_w", rng.normal(0.0, 0.02, (c, c)))
        store.add(p + "sca.out_b", np.zeros(c))
        _add_ffn(store, p + "ffn1.", c, cfg.ffn_mult * c, rng)
        store.add(p + "attn.norm_g", np.ones(c))
        store.add(p + "attn.norm_b", np.zeros(c))
        # Bias-free projections: zero tokens produce an exactly-zero attention term.
        for nm in ("q", "k", "v", "out"):
            store.add(p + f"attn.{nm}_w", rng.normal(0.0, 0.02, (c, c)))
        _add_ffn(store, p + "ffn2.", c, cfg.ffn_mult * c, rng)
    return store


ENCODER_GROUPS = ("backbone.", "queries.", "uvformer.")


# ---------------------------------------------------------------------------
# Forward pieces
# ---------------------------------------------------------------------------

def vision_backbone(images: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Shared-weight conv encoder: (S, N, H, W, 3) -> (S, N, H/8, W/8, C)."""
    S, N, H, W, _ = images.shape
    if H % BACKBONE_STRIDE or W % BACKBONE_STRIDE:
        raise ValueError(f"image size {H}x{W} not divisible by backbone stride {BACKBONE_STRIDE}")
    x = T.reshape(images, (S * N, H, W, 3))
    for i in range(3):
        x = T.relu(T.conv2d(x, store[f"backbone.conv{i}.w"], store[f"backbone.conv{i}.b"], stride=2, pad=1))
    return T.reshape(x, (S, N, H // BACKBONE_STRIDE, W // BACKBONE_STRIDE, cfg.channels))


def _layer_norm(x, store, prefix):
    return T.layer_norm(x, store[prefix + "norm_g"], store[prefix + "norm_b"])


def _ffn(x, store, prefix):
    h = T.relu(T.affine(x, store[prefix + "w1"], store[prefix + "b1"]))
    return T.affine(h, store[prefix + "w2"], store[prefix + "b2"])


def spatial_cross_attention(emb: Tensor, featmaps: Tensor, proj: QueryProjection,
                            store: ParamStore, prefix: str, cfg: ModelConfig) -> Tensor:
    """Deformable projection-guided attention, averaged over seeing cameras.

    emb (S, LB, C), featmaps (S, N, Hf, Wf, C), proj batched per sample.
    Returns (S, LB, C); pillars with no valid camera return their input row.
    """
    S, LB, C = emb.shape
    _, N, Hf, Wf, _ = featmaps.shape
    Hh, P, K = cfg.heads, cfg.pillar_points, cfg.offsets_per_point
    Ch = C // Hh
    dt = emb.dtype

    offsets = T.reshape(T.affine(emb, store[prefix + "offset_w"], store[prefix + "offset_b"]),
                        (S, LB, Hh, P, K, 2))
    logits = T.reshape(T.affine(emb, store[prefix + "weight_w"], store[prefix + "weight_b"]),
                       (S, LB, Hh, P, K))
    values = T.affine(featmaps, store[prefix + "value_w"], store[prefix + "value_b"])

    # (S, N, LB, 1, P, 1, 2) + (S, 1, LB, Hh, P, K, 2)
    base = const(proj.uv[:, :, :, None, :, None, :].astype(dt))
    uv = T.add(base, T.reshape(offsets, (S, 1, LB, Hh, P, K, 2)))

    # Valid (point x K) set per camera; weights renormalize inside each camera.
    vmask = np.broadcast_to(proj.valid[:, :, :, None, :, None], (S, N, LB, Hh, P, K))
    vmask = vmask.reshape(S, N, LB, Hh, P * K)
    logits_b = T.add(T.reshape(logits, (S, 1, LB, Hh, P * K)), const(np.zeros((S, N, LB, Hh, P * K), dtype=dt)))
    weights = T.masked_softmax(logits_b, vmask, axis=-1)

    att = T.deform_attend(
        T.reshape(values, (S * N, Hf, Wf, C)),
        T.reshape(uv, (S * N, LB, Hh, P * K, 2)),
        T.reshape(weights, (S * N, LB, Hh, P * K)),
        heads=Hh,
    )
    cam_out = T.reshape(att, (S, N, LB, C))

    cam_seen = proj.valid.any(axis=-1)                            # (S, N, LB)
    counts = cam_seen.sum(axis=1).astype(dt)                      # (S, LB)
    cam_w = (cam_seen.astype(dt) / np.maximum(counts, 1.0)[:, None, :])[..., None]
    avg = T.sum_(T.mul(cam_out, const(cam_w)), axis=1)            # (S, LB, C)
    out = T.affine(avg, store[prefix + "out_w"], store[prefix + "out_b"])

    seen = (counts > 0).astype(dt)[..., None]                     # (S, LB, 1)
    return T.add(T.mul(out, const(seen)), T.mul(emb, const(1.0 - seen)))


def _self_attention_core(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Scaled dot-product token mixing with no softmax: scores = QK^T / (sqrt(C) * M)."""
    S, M, C = x.shape
    q = T.matmul(x, store[prefix + "q_w"])
    k = T.matmul(x, store[prefix + "k_w"])
    v = T.matmul(x, store[prefix + "v_w"])
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / (np.sqrt(C) * M))
    return T.matmul(T.matmul(scores, v), store[prefix + "out_w"])


def softmax_free_self_attention(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    """Standalone op form: residual included, out = x + core(x)."""
    return T.add(x, _self_attention_core(x, store, prefix))


def uvformer_forward(emb: Tensor, featmaps: Tensor, proj: QueryProjection,
                     store: ParamStore, cfg: ModelConfig) -> Tensor:
    """(S, LB, C) queries + camera features -> (S, L, B, C) unified grid features."""
    S = emb.shape[0]
    L, B, _ = cfg.grid.dims
    x = emb
    for j in range(cfg.encoder_layers):
        p = f"uvformer.layer{j}."
        x = T.add(x, spatial_cross_attention(_layer_norm(x, store, p + "sca."), featmaps, proj, store, p + "sca.", cfg))
        x = T.add(x, _ffn(_layer_norm(x, store, p + "ffn1."), store, p + "ffn1."))
        x = T.add(x, _self_attention_core(_layer_norm(x, store, p + "attn."), store, p + "attn."))
        x = T.add(x, _ffn(_layer_norm(x, store, p + "ffn2."), store, p + "ffn2."))
    return T.reshape(x, (S, L, B, cfg.channels))


def encode_unified_view(images, proj: QueryProjection, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Full encoder: raw images (S, N, H, W, 3 array) -> (S, L, B, C) features."""
    S = images.shape[0]
    dt = store["queries.emb"].dtype
    feats = vision_backbone(const(np.ascontiguousarray(images, dtype=dt)), store, cfg)
    emb0 = T.reshape(store["queries.emb"], (1, cfg.num_pillars, cfg.channels))
    emb0 = T.add(emb0, const(np.zeros((S, cfg.num_pillars, cfg.channels), dtype=dt)))
    return uvformer_forward(emb0, feats, proj, store, cfg)
