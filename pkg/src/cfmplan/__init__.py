"""Constrained flow-matching trajectory planner.

Modules:

- ``geom``: scenarios, road masks, signed distance fields and compliance metrics.
- ``traj``: coordinate normalisation, DTW and farthest-point anchor vocabularies.
- ``net``: the conditional vector-field MLP with manual backpropagation and Adam.
- ``flow``: rectified-flow training with classifier-free condition dropout.
- ``constrain``: velocity correction, compliant initialisation, energy guidance and
  constraint-aware fine-tuning.
- ``sampler``: Euler integration and candidate-set generation.
- ``score``: candidate scoring and ranking.
- ``dataset`` and ``report``: synthetic data and evaluation output.
- ``cli``: the ``cfmplan`` command.
"""

__version__ = "0.1.0"

__all__ = ["cli", "config", "constrain", "dataset", "errors", "flow", "geom", "net", "report", "sampler", "score", "traj"]
