"""Finite-difference verification suite for every differentiable operation.

Each check builds a micro instance (well away from relu/bilinear kinks),
runs central differences through `grad_check`, and compares the worst
relative error against its tolerance: 1e-6 for smooth ops, 1e-4 where
kinks or deep composition legitimately cost precision. The final check
drives the full micro pipeline, images through the encoder into both the
occupancy loss and the unrolled policy loss, and differentiates every
parameter; it uses eps = 1e-4 because through a graph this deep the
float64 rounding noise in (f+ - f-) dominates smaller steps for
coordinates whose gradients are near the 1e-8 denominator floor, while
the parameter seed keeps every relu/bilinear input more than 1e-3 from
its kink so the larger step is still safe.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import tensor as T
from .geometry import CameraIntrinsics, CameraRig, WorkspaceGrid, look_at_pose
from .occupancy import init_occ_decoder_params, occ_decode, pretrain_loss
from .optim import ParamStore
from .policy import fusion_decode, imitation_loss, init_policy_params, policy_step
from .tensor import Tensor, grad_check
from .uvformer import (
    ModelConfig,
    init_encoder_params,
    project_queries,
    softmax_free_self_attention,
    spatial_cross_attention,
    stack_projections,
    uvformer_forward,
    vision_backbone,
)

SMOOTH_TOL = 1e-6
KINKED_TOL = 1e-4

MICRO_GRID = WorkspaceGrid(dims=(2, 2, 2), cell_size=(0.5, 0.5, 0.25))


def _micro_cfg(channels=8):
    return ModelConfig(grid=MICRO_GRID, channels=channels, heads=2,
                       instruction_tokens=2, lstm_hidden=8, mlp_hidden=6)


def _micro_rig(n=1, w=16, h=16):
    K = CameraIntrinsics(fx=float(w), fy=float(w), cx=w / 2, cy=h / 2, width=w, height=h)
    eyes = [[0.5, -1.2, 0.8], [1.6, 0.5, 0.9]]
    return CameraRig(cameras=tuple((K, look_at_pose(eyes[i], [0.5, 0.5, 0.2])) for i in range(n)))


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _interior_uv(rng, n, w, h):
    gx = rng.integers(0, w - 1, size=n) + rng.uniform(0.2, 0.8, size=n)
    gy = rng.integers(0, h - 1, size=n) + rng.uniform(0.2, 0.8, size=n)
    return np.stack([gx / (w - 1), gy / (h - 1)], axis=-1)


def _perturbed(store: ParamStore, seed, scale=0.1):
    rng = np.random.default_rng(seed)
    for _, p in store.items():
        p.data = p.data + rng.normal(0.0, scale, p.shape)
    return store


# -- individual op checks ----------------------------------------------------

def _check_affine(rng):
    return grad_check(T.affine, [_t(rng, 5, 3), _t(rng, 3, 4), _t(rng, 4)]), SMOOTH_TOL


def _check_relu(rng):
    x = rng.standard_normal(24)
    x = np.where(np.abs(x) < 0.1, x + 0.3 * np.sign(x) + 0.01, x)
    return grad_check(T.relu, [Tensor(x, requires_grad=True)]), SMOOTH_TOL


def _check_sigmoid(rng):
    return grad_check(T.sigmoid, [_t(rng, 16)]), SMOOTH_TOL


def _check_tanh(rng):
    return grad_check(T.tanh, [_t(rng, 16)]), SMOOTH_TOL


def _check_layer_norm(rng):
    args = [_t(rng, 4, 6), Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True), _t(rng, 6)]
    return grad_check(T.layer_norm, args), SMOOTH_TOL


def _check_matmul(rng):
    return grad_check(T.matmul, [_t(rng, 2, 4, 3), _t(rng, 2, 3, 5)]), SMOOTH_TOL


def _check_softmax(rng):
    return grad_check(T.softmax, [_t(rng, 3, 6)]), SMOOTH_TOL


def _check_masked_softmax(rng):
    mask = rng.uniform(size=(3, 6)) < 0.7
    mask[:, 0] = True
    return grad_check(lambda x: T.masked_softmax(x, mask), [_t(rng, 3, 6)]), SMOOTH_TOL


def _check_bilinear(rng):
    fm = _t(rng, 6, 7, 3)
    uv = Tensor(_interior_uv(rng, 60, 7, 6), requires_grad=True)
    return grad_check(T.bilinear_sample, [fm, uv]), SMOOTH_TOL


def _check_deform_attend(rng):
    S, H, W, C, Q, Hh, P = 2, 5, 6, 8, 3, 2, 4
    values = _t(rng, S, H, W, C)
    uv = Tensor(_interior_uv(rng, S * Q * Hh * P, W, H).reshape(S, Q, Hh, P, 2), requires_grad=True)
    wts = _t(rng, S, Q, Hh, P)
    mask = np.ones((S, Q, Hh, P), bool)
    fn = lambda v, u, w: T.deform_attend(v, u, T.masked_softmax(w, mask), heads=Hh)
    return grad_check(fn, [values, uv, wts]), SMOOTH_TOL


def _check_conv2d(rng):
    x, w, b = _t(rng, 2, 5, 5, 3), _t(rng, 3, 3, 3, 4, scale=0.3), _t(rng, 4)
    e1 = grad_check(lambda *a: T.conv2d(*a, stride=1, pad=1), [x, w, b])
    x2, w2, b2 = _t(rng, 1, 6, 6, 2), _t(rng, 3, 3, 2, 3, scale=0.3), _t(rng, 3)
    e2 = grad_check(lambda *a: T.conv2d(*a, stride=2, pad=1), [x2, w2, b2])
    return max(e1, e2), SMOOTH_TOL


def _check_losses(rng):
    gt = rng.standard_normal(15)
    labels = (rng.uniform(size=15) < 0.5).astype(np.float64)
    mask = rng.uniform(size=15) < 0.6
    ce_labels = rng.integers(0, 4, size=6)
    errs = [
        grad_check(lambda p: T.mse(p, gt), [_t(rng, 15)]),
        grad_check(lambda p: T.l1(p, gt), [Tensor(gt + rng.uniform(0.2, 1.0, 15) * np.sign(rng.standard_normal(15)), requires_grad=True)]),
        grad_check(lambda z: T.bce_logits(z, labels), [_t(rng, 15)]),
        grad_check(lambda p: T.masked_l1(p, gt, mask), [Tensor(gt + 0.5, requires_grad=True)]),
        grad_check(lambda z: T.cross_entropy_logits(z, ce_labels), [_t(rng, 6, 4)]),
    ]
    return max(errs), SMOOTH_TOL


def _check_lstm(rng):
    din, dh = 3, 4
    args = [_t(rng, 2, din), _t(rng, 2, dh), _t(rng, 2, dh),
            _t(rng, din + dh, 4 * dh, scale=0.4), _t(rng, 4 * dh, scale=0.1)]
    fn = lambda x, h, c, w, b: T.concat(list(T.lstm_cell(x, h, c, w, b)), axis=-1)
    return grad_check(fn, args), SMOOTH_TOL


def _check_max_pool(rng):
    return grad_check(T.max_pool_set, [_t(rng, 5, 4)]), SMOOTH_TOL


# -- module-level checks -----------------------------------------------------

def _check_backbone(rng):
    cfg = _micro_cfg(channels=16)
    store = _perturbed(init_encoder_params(ParamStore(), cfg, seed=0), 1, scale=0.05)
    imgs = Tensor(rng.uniform(size=(1, 1, 16, 16, 3)), requires_grad=True)
    params = [store["backbone.conv0.w"], store["backbone.conv1.w"],
              store["backbone.conv2.w"], store["backbone.conv2.b"]]
    fn = lambda im, *ps: vision_backbone(im, store, cfg)
    return grad_check(fn, [imgs] + params), KINKED_TOL


def _check_spatial_cross_attention(rng):
    cfg = _micro_cfg()
    store = _perturbed(init_encoder_params(ParamStore(), cfg, seed=2), 3, scale=0.05)
    pre = "uvformer.layer0.sca."
    emb = _t(rng, 1, cfg.num_pillars, cfg.channels)
    fm = _t(rng, 1, 1, 4, 4, cfg.channels)
    proj = stack_projections([project_queries(_micro_rig(1, 32, 32), cfg.grid)])
    params = [store[pre + n] for n in ("offset_w", "offset_b", "weight_w", "weight_b", "value_w", "out_w")]
    fn = lambda e, f, *ps: spatial_cross_attention(e, f, proj, store, pre, cfg)
    return grad_check(fn, [emb, fm] + params), KINKED_TOL


def _check_self_attention(rng):
    cfg = _micro_cfg()
    store = _perturbed(init_encoder_params(ParamStore(), cfg, seed=4), 5, scale=0.3)
    x = _t(rng, 1, 4, cfg.channels)
    ps = [store["uvformer.layer0.attn." + n] for n in ("q_w", "k_w", "v_w", "out_w")]
    fn = lambda x_, *rest: softmax_free_self_attention(x_, store, "uvformer.layer0.attn.")
    return grad_check(fn, [x] + ps), SMOOTH_TOL


def _check_occ_decoder(rng):
    cfg = _micro_cfg()
    store = init_occ_decoder_params(ParamStore(), cfg, seed=6)
    uf = _t(rng, 1, 2, 2, cfg.channels)
    params = [store["occ.conv0.w"], store["occ.conv1.w"]]

    def fn(uf_, *ps):
        logits, rgb = occ_decode(uf_, store, cfg)
        return T.concat([T.reshape(logits, (1, -1)), T.reshape(rgb, (1, -1))], axis=1)

    return grad_check(fn, [uf] + params), SMOOTH_TOL


def _check_fusion(rng):
    cfg = _micro_cfg()
    store = _perturbed(init_policy_params(ParamStore(), cfg, seed=7), 8, scale=0.1)
    uf = _t(rng, 1, cfg.num_pillars, cfg.channels)
    tokens = _t(rng, 1, cfg.instruction_tokens, cfg.channels)
    ps = [store["fusion.layer0.cross.q_w"], store["fusion.layer0.cross.out_w"],
          store["fusion.layer1.ffn.w1"]]
    fn = lambda u, t_, *rest: fusion_decode(u, None, t_, store, cfg)
    return grad_check(fn, [uf, tokens] + ps), KINKED_TOL


def _check_policy_head(rng):
    cfg = _micro_cfg()
    store = _perturbed(init_policy_params(ParamStore(), cfg, seed=9), 10, scale=0.1)
    vl = _t(rng, 1, cfg.instruction_tokens, cfg.channels)
    h = _t(rng, 1, cfg.lstm_hidden)
    c = _t(rng, 1, cfg.lstm_hidden)
    ps = [store["policy.lstm.w"], store["policy.mlp.w1"], store["policy.mlp.w2"]]

    def fn(vl_, h_, c_, *rest):
        pose, logit, h2, c2 = policy_step(vl_, h_, c_, store)
        return T.concat([pose, T.reshape(logit, (1, 1)), h2, c2], axis=1)

    return grad_check(fn, [vl, h, c] + ps), SMOOTH_TOL


def _check_end_to_end(rng):
    """Micro pipeline: images -> encoder -> occupancy loss + 2-step policy loss.

    Differentiates every parameter of the combined model at once.
    """
    cfg = _micro_cfg()
    store = ParamStore()
    init_encoder_params(store, cfg, seed=11)
    init_occ_decoder_params(store, cfg, seed=12)
    init_policy_params(store, cfg, seed=13, num_instructions=2)
    # Perturbation scale 0.1 keeps layer-norm row variances (hence curvature)
    # moderate and every relu/bilinear input >1e-3 from its kink.
    _perturbed(store, 15, scale=0.1)

    rig = _micro_rig(1, 32, 32)
    proj = stack_projections([project_queries(rig, cfg.grid)])
    images = [rng.uniform(size=(1, 1, 32, 32, 3)) for _ in range(2)]
    gt_occ = (rng.uniform(size=(1, 2, 2, 2)) < 0.5).astype(np.float64)
    gt_rgb = rng.uniform(size=(1, 2, 2, 2, 3))
    demo_pose = rng.standard_normal((2, 6)) * 0.02
    demo_grip = np.array([0.0, 1.0])

    from .policy import policy_forward_step
    from .uvformer import encode_unified_view

    names = store.names()
    params = [store[n] for n in names]

    def fn(*ps):
        h = Tensor(np.zeros((1, cfg.lstm_hidden)))
        c = Tensor(np.zeros((1, cfg.lstm_hidden)))
        total = None
        poses, logits = [], []
        for t in range(2):
            uf = encode_unified_view(images[t], proj, store, cfg)
            occ_logits, rgb_pred = occ_decode(uf, store, cfg)
            ploss, _, _ = pretrain_loss(occ_logits, rgb_pred, gt_occ, gt_rgb, 0.5)
            total = ploss if total is None else T.add(total, ploss)
            kv = T.reshape(uf, (1, cfg.num_pillars, cfg.channels))
            pose, logit, h, c = policy_forward_step(kv, t % 2, h, c, store, cfg)
            poses.append(pose)
            logits.append(T.reshape(logit, (1,)))
        iloss, _, _ = imitation_loss(T.concat(poses, axis=0), T.concat(logits, axis=0),
                                     demo_pose, demo_grip, 0.01)
        return T.add(total, iloss)

    return grad_check(fn, params, eps=1e-4), KINKED_TOL


NUMERICS_CHECKS = [
    ("affine", _check_affine),
    ("relu", _check_relu),
    ("sigmoid", _check_sigmoid),
    ("tanh", _check_tanh),
    ("layer_norm", _check_layer_norm),
    ("matmul", _check_matmul),
    ("softmax", _check_softmax),
    ("masked_softmax", _check_masked_softmax),
    ("bilinear_sample", _check_bilinear),
    ("deform_attend", _check_deform_attend),
    ("conv2d", _check_conv2d),
    ("losses", _check_losses),
    ("lstm_cell", _check_lstm),
    ("max_pool_set", _check_max_pool),
]

UVFORMER_CHECKS = [
    ("vision_backbone", _check_backbone),
    ("spatial_cross_attention", _check_spatial_cross_attention),
    ("softmax_free_self_attention", _check_self_attention),
    ("occ_decoder", _check_occ_decoder),
]

POLICY_CHECKS = [
    ("fusion_decode", _check_fusion),
    ("policy_head", _check_policy_head),
    ("end_to_end_micro", _check_end_to_end),
]

MODULES = {
    "numerics": NUMERICS_CHECKS,
    "uvformer": UVFORMER_CHECKS,
    "policy": POLICY_CHECKS,
}


def run_gradient_checks(module: str = "all", log=print):
    """Run the suite; returns (all_passed, results list)."""
    if module == "all":
        checks = NUMERICS_CHECKS + UVFORMER_CHECKS + POLICY_CHECKS
    elif module in MODULES:
        checks = MODULES[module]
    else:
        raise ValueError(f"unknown module {module!r} (expected all|numerics|uvformer|policy)")
    results = []
    ok = True
    for name, fn in checks:
        rng = np.random.default_rng(zlib.crc32(name.encode()))  # stable across processes
        err, tol = fn(rng)
        passed = err <= tol
        ok &= passed
        results.append({"check": name, "max_rel_err": float(err), "tol": tol, "pass": passed})
        log(f"[{'PASS' if passed else 'FAIL'}] {name}: max rel err {err:.3e} (tol {tol:.0e})")
    return ok, results
