"""Imitation fine-tuning and a closed-loop rollout at demo scale.

Uses the scripted expert to produce a handful of demonstrations, trains
the instruction-conditioned policy head on frozen random grid features,
and rolls the result out in the environment. At this scale the policy
only overfits its few demos; the full experiment lives in the acceptance
suite.
"""

import tempfile
from pathlib import Path

import numpy as np

from uniview.config import RunConfig, sim_config
from uniview.datasets import generate_demo_dataset, sample_rig
from uniview.policy import FinetuneSettings, evaluate_policy, finetune_run, load_policy_store
from uniview.scenesim import SimConfig, expert_action

rc = RunConfig()
rc.grid_dims = (8, 8, 4)
rc.grid_cell = (0.125, 0.125, 0.125)
rc.image_size = 64
rc.channels = 32
rc.lstm_hidden = 32
rc.demo_episodes = 8
rc.demo_task = "reach"
rc.finetune_epochs = 10
rc.lr_finetune = 1e-3
rc.eval_rollouts = 5

root = Path(tempfile.mkdtemp(prefix="uniview_demo_"))
print(f"recording {rc.demo_episodes} expert demonstrations under {root} ...")
generate_demo_dataset(root / "demos", rc)

print("fine-tuning the policy head (frozen vision):")
summary = finetune_run(root / "demos", rc, root / "ft",
                       settings=FinetuneSettings(freeze_encoder=True, from_scratch=True))

print("rolling out the trained policy on fresh scenes:")
store = load_policy_store(summary["checkpoint"], rc)
res, rows = evaluate_policy(store, rc, n_episodes=rc.eval_rollouts, rig_family="seen")
for r in rows:
    print(f"  seed {r['env_seed']}: success={r['success']} steps={r['steps']}")
print(f"success rate: {res['success_rate']:.2f} (small-scale demo; see tests/test_acceptance.py "
      f"for the calibrated experiment)")

print("for reference, the scripted expert on the same protocol:")
sim = sim_config(rc)
sim = SimConfig(**{**sim.__dict__, "marker_sphere": False})
from uniview.policy import rollout
from uniview.scenesim import instruction_id_for, sample_scene

ok = 0
for e in range(rc.eval_rollouts):
    scene = sample_scene([500000 + e, 0], sim)
    rig = sample_rig([rc.seed, 4000, e], rc, family="seen")
    iid = instruction_id_for("reach", scene.primitives[0].color_name)
    fn = lambda frame, i, state: expert_action(state, i, sim)
    ok += rollout(None, 500000 + e, iid, rig, rc, scene=scene, policy_fn=fn)["success"]
print(f"expert success rate: {ok / rc.eval_rollouts:.2f}")
