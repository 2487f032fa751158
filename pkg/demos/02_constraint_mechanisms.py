"""The three inference-time constraint mechanisms on a hand-made road.

Run with ``python3 demos/02_constraint_mechanisms.py``. Takes a few seconds.
"""

import numpy as np

from cfmplan import constrain, geom, net, sampler, traj
from cfmplan.constrain import ConstraintConfig
from cfmplan.sampler import SamplerConfig, ScenarioContext
from cfmplan.traj import Box, to_unit

box = Box()
scene = geom.build_scenario(geom.ScenarioRecipe("straight", width=6.0, length=60.0, seed=0))
field = geom.compute_esdf(geom.rasterize_road(scene))
xs = np.linspace(2, 40, 8)
vocab = traj.TrajectoryVocabulary(np.array([np.stack([xs, np.full(8, y)], 1) for y in (0.0, 1.0, 7.0)]), np.arange(3))

# Velocity correction: with lambda = -0.1 the component along the anchor direction shrinks by 20 %.
vc = np.array([1.0, 0.0])
print("CVF on a parallel velocity:", constrain.cvf_correct(vc, vc, -0.1)[0])
print("CVF on an orthogonal velocity:", constrain.cvf_correct(np.array([0.0, 1.0]), vc, -0.1)[0])

# Compliant initialisation: with a zero network the sample is exactly the chosen anchor.
arch = net.Architecture()
ctx = ScenarioContext(field, vocab, box)
cfg = SamplerConfig(steps=20, constraint=ConstraintConfig.disabled(civ_enabled=True))
out, diag = sampler.sample_trajectory(net.zero_params(arch), net.NULL_CONDITION, ctx, cfg, np.random.default_rng(0))
print(f"CIV picked anchor {diag.civ_anchor} of the compliant set {ctx.compliant}; on road: {geom.dac_compliant(out, field)}")

# Energy guidance: ascend the tanh-saturated clearance energy over the last 30 % of steps.
edge = to_unit(np.stack([xs, np.full(8, 3.6)], 1), box).reshape(1, -1)
guided = SamplerConfig(steps=100, constraint=ConstraintConfig.disabled(energy_weight=0.05))
x1, energies, _, _ = sampler.integrate(net.zero_params(arch), edge, [net.NULL_CONDITION], ScenarioContext(field, None, box), guided)
before = constrain.constraint_energy(edge[0], field, box)[0]
print(f"energy of a trajectory hugging the road edge: {before:.3f} -> {energies[0, -1]:.3f}")
