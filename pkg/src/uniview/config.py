"""Plain-text run configuration: `key = value` lines, typed defaults.

Every key has a documented default below; unknown keys are rejected so a
typo cannot silently fall back to a default. Tuples are comma-separated.
The effective (merged) config is echoed into each output directory so any
run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .geometry import WorkspaceGrid
from .scenesim import SimConfig
from .uvformer import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # workspace grid
    grid_origin: tuple = (0.0, 0.0, 0.0)
    grid_cell: tuple = (0.05, 0.05, 0.10)
    grid_dims: tuple = (20, 20, 5)
    # scene sampling
    table_height: float = -0.005
    object_count: tuple = (3, 5)
    object_size: tuple = (0.06, 0.12)
    marker_sphere: bool = True
    margin: float = 0.10
    # camera rig randomization
    cameras: int = 3
    image_size: int = 128
    rig_family: str = "seen"  # seen | unseen
    rig_radius: tuple = (0.9, 1.3)
    rig_height: tuple = (0.55, 0.95)
    rig_lookat_jitter: float = 0.06
    # environment
    max_step: float = 0.05
    max_rot_step: float = 0.10
    grasp_radius: float = 0.04
    reach_threshold: float = 0.05
    lift_height: float = 0.22
    max_episode_steps: int = 60
    # model dimensions
    channels: int = 64
    heads: int = 2
    offsets_per_point: int = 2
    encoder_layers: int = 2
    ffn_mult: int = 4
    fusion_layers: int = 2
    instruction_tokens: int = 8
    lstm_hidden: int = 128
    mlp_hidden: int = 64
    # loss weights
    lambda_rgb: float = 1.0
    lambda_gripper: float = 0.01
    # optimizer
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # training
    seed: int = 0
    dtype: str = "float32"  # float32 for speed; float64 for verification work
    pretrain_epochs: int = 5
    pretrain_batch: int = 8
    finetune_epochs: int = 6
    finetune_lookahead: int = 0  # reserved; kept for config stability
    tbptt_window: int = 8
    holdout_fraction: float = 0.1
    # dataset generation
    pretrain_scenes: int = 500
    rigs_per_dataset: int = 4
    demo_episodes: int = 500
    demo_task: str = "reach"  # reach | lift | mixed
    # evaluation
    eval_rollouts: int = 100


_TUPLE_KINDS = {
    "grid_origin": float,
    "grid_cell": float,
    "grid_dims": int,
    "object_count": int,
    "object_size": float,
    "rig_radius": float,
    "rig_height": float,
}


def _parse_value(key: str, text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(default, tuple):
        kind = _TUPLE_KINDS.get(key, float)
        try:
            return tuple(kind(v.strip()) for v in text.split(","))
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from e
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as e:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from e
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as e:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from e
    return text


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        setattr(cfg, key, _parse_value(key, value, known[key]))
    _validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _validate(cfg: RunConfig):
    if cfg.rig_family not in ("seen", "unseen"):
        raise ConfigError(f"rig_family must be 'seen' or 'unseen', got {cfg.rig_family!r}")
    if cfg.demo_task not in ("reach", "lift", "mixed"):
        raise ConfigError(f"demo_task must be reach|lift|mixed, got {cfg.demo_task!r}")
    if cfg.dtype not in ("float32", "float64"):
        raise ConfigError(f"dtype must be float32 or float64, got {cfg.dtype!r}")
    if len(cfg.grid_dims) != 3:
        raise ConfigError("grid_dims needs exactly three entries")
    if cfg.lambda_rgb < 0 or cfg.lambda_gripper < 0:
        raise ConfigError("loss weights must be non-negative")


def config_text(cfg: RunConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_config(path, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(config_text(cfg))


# -- typed sub-configs -------------------------------------------------------

def workspace_grid(cfg: RunConfig) -> WorkspaceGrid:
    return WorkspaceGrid(origin=cfg.grid_origin, cell_size=cfg.grid_cell, dims=cfg.grid_dims)


def sim_config(cfg: RunConfig) -> SimConfig:
    return SimConfig(
        grid=workspace_grid(cfg),
        table_height=cfg.table_height,
        object_count=cfg.object_count,
        object_size=cfg.object_size,
        marker_sphere=cfg.marker_sphere,
        margin=cfg.margin,
        max_step=cfg.max_step,
        max_rot_step=cfg.max_rot_step,
        grasp_radius=cfg.grasp_radius,
        reach_threshold=cfg.reach_threshold,
        lift_height=cfg.lift_height,
        max_episode_steps=cfg.max_episode_steps,
    )


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        grid=workspace_grid(cfg),
        channels=cfg.channels,
        heads=cfg.heads,
        offsets_per_point=cfg.offsets_per_point,
        encoder_layers=cfg.encoder_layers,
        ffn_mult=cfg.ffn_mult,
        fusion_layers=cfg.fusion_layers,
        instruction_tokens=cfg.instruction_tokens,
        lstm_hidden=cfg.lstm_hidden,
        mlp_hidden=cfg.mlp_hidden,
    )
