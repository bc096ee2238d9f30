"""Operator command surface.

Exit codes: 0 success; 1 check/evaluation failure; 2 missing file;
3 malformed configuration; 4 data or shape mismatch.

Every command takes --config (key = value file, defaults applied for
missing keys) and --seed (overrides the config seed); seeded commands are
bit-reproducible on the single-worker reference path, except for the
wall_s timing field in metrics logs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, write_config

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_DATA = 4


def _load_rc(args) -> RunConfig:
    if getattr(args, "config", None):
        rc = load_config(args.config)
    else:
        rc = RunConfig()
    if getattr(args, "seed", None) is not None:
        rc.seed = args.seed
    return rc


def cmd_gen_data(args):
    rc = _load_rc(args)
    out = Path(args.out)
    families = None
    if args.family == "both":
        families = ("seen", "unseen")
    elif args.family:
        families = (args.family,)
    if args.kind == "pretrain":
        from .datasets import generate_pretrain_dataset
        items = generate_pretrain_dataset(out, rc, families=families, progress=args.progress)
        print(f"wrote {len(items)} pretrain samples to {out}")
    else:
        from .datasets import generate_demo_dataset
        paths = generate_demo_dataset(out, rc, families=families,
                                      cross_task_split=args.cross_task_split, progress=args.progress)
        print(f"wrote {len(paths)} demo episodes to {out}")
    write_config(out / "config.txt", rc)
    return EXIT_OK


def cmd_pretrain(args):
    rc = _load_rc(args)
    from .occupancy import pretrain_run
    out = Path(args.out)
    summary = pretrain_run(args.data, rc, out, kind=args.model)
    write_config(out / "config.txt", rc)
    print(json.dumps({"holdout_iou": summary["holdout_iou"], "checkpoint": summary["checkpoint"]}))
    return EXIT_OK


def cmd_finetune(args):
    rc = _load_rc(args)
    from .policy import FinetuneSettings, finetune_run
    out = Path(args.out)
    settings = FinetuneSettings(freeze_encoder=args.freeze_uvformer,
                                from_scratch=args.no_pretrain,
                                wrist_camera=args.wrist_camera)
    init = None if args.no_pretrain else args.init
    if init is not None and not Path(init).exists():
        raise FileNotFoundError(init)
    summary = finetune_run(args.data, rc, out, init_checkpoint=init, settings=settings)
    write_config(out / "config.txt", rc)
    print(json.dumps({"checkpoint": summary["checkpoint"], "frozen": summary["frozen"]}))
    return EXIT_OK


def cmd_eval_occ(args):
    rc = _load_rc(args)
    from .datasets import load_pretrain_index
    from .geometry import load_rig
    from .occupancy import evaluate_occupancy, load_pretrained_store, split_by_scene
    store = load_pretrained_store(args.ckpt, rc, kind=args.model)
    items = load_pretrain_index(args.data)
    if args.holdout_only:
        _, items = split_by_scene(items, rc.holdout_fraction)
    rig = load_rig(args.rig) if args.rig else None
    metrics = evaluate_occupancy(store, items, rc, kind=args.model, rig_override=rig)
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval_policy(args):
    rc = _load_rc(args)
    from .geometry import load_rig
    from .policy import evaluate_policy, load_policy_store
    store = load_policy_store(args.ckpt, rc)
    rig = load_rig(args.rig) if args.rig else None
    summary, _ = evaluate_policy(store, rc, n_episodes=args.episodes or rc.eval_rollouts,
                                 rig_family=args.family, rig=rig, task=args.task,
                                 out_path=args.out, chain=args.chain)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_gradcheck(args):
    from .checks import run_gradient_checks
    ok, _ = run_gradient_checks(args.module)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_dump_voxels(args):
    rc = _load_rc(args)
    import numpy as np

    from .episodes import read_episode
    from .occupancy import load_pretrained_store, model_forward
    from .config import model_config, workspace_grid
    from .tensor import no_grad
    from .uvformer import project_queries, stack_projections
    from .voxelize import VoxelGrid, load_voxels, write_ply

    store = load_pretrained_store(args.ckpt, rc, kind=args.model)
    cfg = model_config(rc)
    ep = read_episode(args.sample)
    proj = stack_projections([project_queries(ep.rig, cfg.grid)])
    dtype = np.float32 if rc.dtype == "float32" else np.float64
    with no_grad():
        logits, rgb = model_forward(ep.frames[0].rgb[None].astype(dtype), proj, store, cfg, args.model)
    pred = VoxelGrid(occ=(logits.data[0] > 0).astype(np.float64), rgb=rgb.data[0].astype(np.float64))
    out = Path(args.out)
    write_ply(out, pred, cfg.grid)
    vox_path = Path(str(args.sample).replace(".uvds", ".voxels.npz"))
    if vox_path.exists():
        gt_out = out.with_name(out.stem + "_gt.ply")
        write_ply(gt_out, load_voxels(vox_path), cfg.grid)
        print(f"wrote {out} and {gt_out}")
    else:
        print(f"wrote {out} (no ground-truth sidecar found)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="uniview",
        description="Multi-camera workspace representation: data, training, evaluation.",
        epilog="exit codes: 0 ok | 1 check/eval failure | 2 missing file | 3 bad config | 4 data mismatch",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("gen-data", help="generate pretrain samples or expert demos")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["pretrain", "demos"], required=True)
    p.add_argument("--family", choices=["seen", "unseen", "both"], default=None)
    p.add_argument("--cross-task-split", action="store_true",
                   help="tie each instruction half to one rig family (needs --family both)")
    p.add_argument("--progress", type=int, default=None, help="print every N items")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="occupancy + RGB reconstruction pre-training")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=["uvformer", "pooled"], default="uvformer",
                   help="pooled = geometry-free baseline for the generalization comparison")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="imitation fine-tuning on demo episodes")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="pre-training checkpoint to start from")
    p.add_argument("--out", required=True)
    p.add_argument("--freeze-uvformer", action="store_true",
                   help="freeze backbone + queries + uvformer groups")
    p.add_argument("--no-pretrain", action="store_true", help="train everything from scratch")
    p.add_argument("--wrist-camera", type=int, default=-1,
                   help="rig camera index whose features join the fusion keys (-1 = off)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval-occ", help="occupancy IoU / RGB MAE of a checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--rig", help="rig JSON override: re-render the same scenes under this rig")
    p.add_argument("--model", choices=["uvformer", "pooled"], default="uvformer")
    p.add_argument("--holdout-only", action="store_true", help="restrict to the held-out scene split")
    p.set_defaults(fn=cmd_eval_occ)

    p = sub.add_parser("eval-policy", help="closed-loop rollout success rate")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rig", help="fixed rig JSON (default: sample rigs per episode)")
    p.add_argument("--family", choices=["seen", "unseen"], default=None)
    p.add_argument("--task", choices=["reach", "lift"], default="reach")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--chain", type=int, default=0, help="evaluate k-instruction chains")
    p.add_argument("--out", help="write per-episode JSONL report here")
    p.set_defaults(fn=cmd_eval_policy)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--module", choices=["all", "numerics", "uvformer", "policy"], default="all")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-voxels", help="prediction and ground truth as ASCII PLY")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sample", required=True, help="a pretrain .uvds sample file")
    p.add_argument("--out", required=True, help="output .ply path (gt written alongside)")
    p.add_argument("--model", choices=["uvformer", "pooled"], default="uvformer")
    p.set_defaults(fn=cmd_dump_voxels)

    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing file: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
