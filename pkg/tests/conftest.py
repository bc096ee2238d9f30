"""Shared helpers: micro-scale run configs keep training tests fast."""

import numpy as np
import pytest

from uniview.config import RunConfig


def micro_run_config(**overrides) -> RunConfig:
    """Tiny grid / tiny model / tiny images; same 1 x 1 x 0.5 m workspace."""
    rc = RunConfig()
    rc.grid_dims = (4, 4, 2)
    rc.grid_cell = (0.25, 0.25, 0.25)
    rc.image_size = 32
    rc.channels = 16
    rc.heads = 2
    rc.lstm_hidden = 16
    rc.mlp_hidden = 8
    rc.instruction_tokens = 2
    rc.pretrain_scenes = 6
    rc.rigs_per_dataset = 2
    rc.pretrain_epochs = 2
    rc.pretrain_batch = 4
    rc.demo_episodes = 4
    rc.finetune_epochs = 2
    rc.eval_rollouts = 4
    rc.holdout_fraction = 0.34
    for k, v in overrides.items():
        setattr(rc, k, v)
    return rc


@pytest.fixture(scope="session")
def micro_pretrain_data(tmp_path_factory):
    from uniview.datasets import generate_pretrain_dataset

    rc = micro_run_config()
    root = tmp_path_factory.mktemp("micro_pretrain")
    generate_pretrain_dataset(root, rc)
    return root, rc


@pytest.fixture(scope="session")
def micro_demo_data(tmp_path_factory):
    from uniview.datasets import generate_demo_dataset

    rc = micro_run_config()
    root = tmp_path_factory.mktemp("micro_demos")
    generate_demo_dataset(root, rc)
    return root, rc
