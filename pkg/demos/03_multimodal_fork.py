"""An unconditional model on a fork keeps both branches.

Run with ``python3 demos/03_multimodal_fork.py``. Takes about five seconds.
"""

import dataclasses

import numpy as np

from cfmplan import dataset, flow, net, sampler, traj
from cfmplan.constrain import ConstraintConfig
from cfmplan.sampler import SamplerConfig, ScenarioContext
from cfmplan.traj import Box, from_unit

box = Box()
recipes = dataset.random_recipes(400, 11, generators=("fork",), width=(6.0, 6.0), obstacles=(0, 0))
recipes = [dataclasses.replace(r, fork_at=5.0) for r in recipes]
samples = dataset.generate_samples(recipes, 11, profile=dataset.MotionProfile(speed=(9.0, 11.0), accel=(0.0, 0.5)))
gts, commands = np.array([s.gt for s in samples]), np.array([s.command for s in samples])
print("training split:", {c: int((commands == c).sum()) for c in ("left", "right")})

data = dataset.build_training_set(samples, None, box, unconditional=True)
params, _, _ = flow.train_stage1(data, flow.TrainConfig(epochs=100, lr=1e-3, seed=0), arch=net.Architecture(hidden=128))

x0 = np.random.default_rng(5).standard_normal((500, 16))
cfg = SamplerConfig(constraint=ConstraintConfig.disabled())
x1, *_ = sampler.integrate(params, x0, [net.NULL_CONDITION] * 500, ScenarioContext(), cfg)
branches = [gts[commands == c].mean(axis=0) for c in ("left", "right")]
nearest = [np.argmin([traj.dtw_distance(t, b) for b in branches]) for t in from_unit(x1.reshape(500, -1, 2), box)]
left, right = np.bincount(nearest, minlength=2) / 500
print(f"generated split: left {left:.2f}, right {right:.2f}")
