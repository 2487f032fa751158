"""Synthetic driving samples: scenes, ground-truth trajectories and condition records."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import geom, net
from .errors import ConfigError
from .flow import TrainingSet
from .net import ConditionSet
from .traj import Box, TrajectoryVocabulary, dtw_one_to_many, to_unit

DT = 0.5  # seconds between waypoints
DRIVING_GENERATORS = ("straight", "curve-left", "curve-right", "intersection")


@dataclass(frozen=True)
class MotionProfile:
    speed: tuple = (3.0, 12.0)  # m/s at t=0
    accel: tuple = (-1.0, 1.0)  # m/s^2
    edge_margin: float = 1.0  # minimum lateral gap kept to the road edge
    min_clearance: float = 0.25


@dataclass(eq=False)
class Sample:
    scenario: geom.Scenario
    recipe: geom.ScenarioRecipe
    gt: np.ndarray  # (T, 2) metric
    command: str
    ep: float


def random_recipes(n, seed, generators=DRIVING_GENERATORS, width=(5.0, 8.0), radius=(25.0, 60.0), length=60.0, obstacles=(0, 2)):
    """``n`` seeded recipes drawn uniformly over ``generators``."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        g = generators[int(rng.integers(len(generators)))]
        out.append(
            geom.ScenarioRecipe(
                generator=g,
                width=round(float(rng.uniform(*width)), 2),
                length=float(length),
                radius=round(float(rng.uniform(*radius)), 2),
                seed=int(rng.integers(2**31 - 1)),
                n_obstacles=int(rng.integers(obstacles[0], obstacles[1] + 1)),
            )
        )
    return out


def sample_gt(scenario, field, rng, horizon=8, profile=MotionProfile(), max_tries=50) -> np.ndarray:
    """Centreline-following trajectory with seeded speed and lateral perturbation.

    Retries until the trajectory is DAC-compliant with ``min_clearance`` metres
    to spare and clear of obstacles; the last resort is the unperturbed
    centreline at the drawn speed.
    """
    line = scenario.centerline
    half_w = geom.esdf_at(field, geom.point_at_arclength(line, 1.0)[0])[0]
    lat = max(half_w - profile.edge_margin, 0.0)
    tau = DT * np.arange(1, horizon + 1)
    for attempt in range(max_tries + 1):
        v0 = rng.uniform(*profile.speed)
        a = rng.uniform(*profile.accel)
        s = np.maximum.accumulate(np.maximum(v0 * tau + 0.5 * a * tau**2, 0.0))
        if attempt < max_tries:
            d0, d1 = rng.uniform(-lat, lat), rng.uniform(-lat / 2, lat / 2)
        else:
            d0 = d1 = 0.0
        d = np.clip(d0 + d1 * tau / tau[-1], -lat, lat)
        pos, normal = geom.point_at_arclength(line, s)
        traj = pos + d[:, None] * normal
        val, clamped = geom.esdf_lookup(field, traj)
        if np.all(val >= profile.min_clearance) and not clamped.any() and geom.obstacle_clearance(traj, scenario) > 0:
            return traj
    raise ConfigError(f"could not place a compliant trajectory in scenario {scenario.id}")


def generate_samples(recipes, seed, horizon=8, profile=MotionProfile(), max_progress=geom.DEFAULT_MAX_PROGRESS):
    """One :class:`Sample` per recipe; fully determined by ``recipes`` and ``seed``."""
    out = []
    for i, r in enumerate(recipes):
        sc = geom.build_scenario(r)
        field = geom.compute_esdf(geom.rasterize_road(sc))
        rng = np.random.default_rng([int(seed), i])
        gt = sample_gt(sc, field, rng, horizon, profile)
        out.append(Sample(sc, r, gt, sc.command, geom.ep_score(gt, sc, max_progress)))
    return out


def nearest_anchors(gts, vocab: TrajectoryVocabulary) -> np.ndarray:
    """Nearest vocabulary anchor (DTW) of every trajectory; ties to the lowest index."""
    return np.array([int(np.argmin(dtw_one_to_many(g, vocab.anchors))) for g in gts], dtype=np.int64)


def condition_for(sample: Sample, anchor, bounds: Box) -> ConditionSet:
    """Training condition: nearest anchor, GT endpoint as goal, command, EP score."""
    return ConditionSet(
        anchor=np.clip(to_unit(anchor, bounds), -1, 1),
        goal=np.clip(to_unit(sample.gt[-1], bounds), -1, 1),
        command=net.command_one_hot(sample.command),
        reward=sample.ep,
    )


def build_training_set(samples, vocab: TrajectoryVocabulary | None, bounds: Box, anchor_ids=None, unconditional=False) -> TrainingSet:
    """Normalised targets plus condition records for :func:`flow.train_stage1`.

    With ``unconditional=True`` every record is empty (all signals absent).
    """
    gts = np.array([s.gt for s in samples])
    if np.any(gts < bounds.low) or np.any(gts > bounds.high):
        raise ConfigError("ground-truth trajectories exceed the normalisation box")
    x1 = to_unit(gts, bounds).reshape(len(gts), -1)
    if unconditional:
        conds = [net.NULL_CONDITION] * len(samples)
    else:
        if vocab is None:
            raise ConfigError("conditional training set needs a vocabulary")
        if anchor_ids is None:
            anchor_ids = nearest_anchors(gts, vocab)
        conds = [condition_for(s, vocab.anchors[k], bounds) for s, k in zip(samples, anchor_ids)]
    return TrainingSet(x1, conds, np.arange(len(samples)), [s.scenario for s in samples])


def condition_record(sample: Sample, anchor_id, bounds: Box) -> dict:
    """JSON-ready condition record stored in the dataset manifest."""
    return {
        "anchor_id": None if anchor_id is None else int(anchor_id),
        "goal": np.clip(to_unit(sample.gt[-1], bounds), -1, 1).tolist(),
        "command": sample.command,
        "ep": sample.ep,
    }


def recipe_dict(r: geom.ScenarioRecipe) -> dict:
    return asdict(r)
