"""Train a small planner from scratch and sample candidates for one scene.

Run with ``python3 demos/01_library_walkthrough.py``. Takes under a minute.
"""

import numpy as np

from cfmplan import constrain, dataset, flow, geom, net, sampler, score, traj
from cfmplan.constrain import ConstraintConfig
from cfmplan.net import ConditionSet
from cfmplan.sampler import SamplerConfig, ScenarioContext
from cfmplan.traj import Box

# Synthetic scenes: straight roads, curves, intersections, with a few obstacles.
samples = dataset.generate_samples(dataset.random_recipes(1000, 1), 1)
print(f"{len(samples)} training scenes, commands: {sorted({s.command for s in samples})}")

# A 128-anchor vocabulary chosen by farthest-point sampling under DTW.
vocab = traj.fps_vocabulary(np.array([s.gt for s in samples]), 128, seed=0)
data = dataset.build_training_set(samples, vocab, Box())

# Stage 1 learns the flow; stage 2 adds the off-road hinge on the one-step endpoint.
params, _, log = flow.train_stage1(data, flow.TrainConfig(epochs=100, seed=0))
print(f"stage 1 loss: {log[0]['mean_loss']:.3f} -> {log[-1]['mean_loss']:.3f}")
params2, _, _ = constrain.train_stage2(params, data, flow.TrainConfig(epochs=5, seed=1), energy_weight=1.0)

# Ten held-out scenes, 8 candidates each, conditioned on the best-scoring anchors.
scenes = dataset.generate_samples(dataset.random_recipes(10, 999), 999)
for label, p, cc in [("no constraints", params, ConstraintConfig.disabled()), ("constrained", params2, ConstraintConfig())]:
    on_road, picked = [], []
    for i, scene in enumerate(scenes):
        ctx = ScenarioContext.from_scenario(scene.scenario, vocab)
        anchors = score.top_k_anchors(vocab, scene.scenario, ctx.field, 8)
        shared = ConditionSet(command=net.command_one_hot(scene.command))
        cands = sampler.sample_candidates(p, anchors, shared, ctx, SamplerConfig(candidates=8, constraint=cc), stream=i)
        trajs = np.array([c.trajectory for c in cands])
        best, table = score.rank_and_select(trajs, vocab, scene.scenario, ctx.field)
        on_road.append(geom.dac_compliant_many(trajs, ctx.field).mean())
        picked.append(table[0].source)
    print(
        f"{label:>15}: {np.mean(on_road):.2f} of candidates on the road, "
        f"{picked.count('generated')} of 10 selections are generated rather than vocabulary anchors"
    )
