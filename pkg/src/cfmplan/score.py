"""Rule-based trajectory scorer: anchor pre-selection and final ranking.

Scores are lexicographic: trajectories that keep every waypoint on the road
and clear of obstacles always outrank those that do not; within each group the
weighted sum of progress, clearance and smoothness decides.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import geom

# weighted part is clipped to +-GATE_BONUS/2, so the gate always dominates
GATE_BONUS = 1000.0


@dataclass(frozen=True)
class ScoreWeights:
    progress: float = 1.0
    clearance: float = 0.3
    smoothness: float = 0.2
    clearance_cap: float = 2.0  # metres of clearance worth the full bonus
    max_progress: float = geom.DEFAULT_MAX_PROGRESS


@dataclass(frozen=True)
class ScoreBreakdown:
    dac: int
    collision: bool
    progress: float
    clearance: float
    smoothness: float
    total: float

    @property
    def feasible(self):
        return self.dac == 1 and not self.collision


def smoothness(trajs) -> np.ndarray:
    """Mean squared second difference of the waypoints (zero for uniform lines)."""
    trajs = np.asarray(trajs, dtype=float)
    dd = trajs[..., 2:, :] - 2.0 * trajs[..., 1:-1, :] + trajs[..., :-2, :]
    if dd.shape[-2] == 0:
        return np.zeros(trajs.shape[:-2])
    return np.mean(np.sum(dd * dd, axis=-1), axis=-1)


def _score_arrays(trajs, scenario, field, weights: ScoreWeights):
    trajs = np.asarray(trajs, dtype=float)
    val, clamped = geom.esdf_lookup(field, trajs)
    dac = np.all((val >= 0) & ~clamped, axis=-1)
    clearance = val.min(axis=-1)
    progress = geom.ep_score_many(trajs, scenario, weights.max_progress)
    smooth = smoothness(trajs)
    if scenario.obstacles:
        c = np.array([o.center for o in scenario.obstacles])
        r = np.array([o.radius for o in scenario.obstacles])
        surf = np.linalg.norm(trajs[..., :, None, :] - c, axis=-1) - r
        collision = surf.min(axis=(-1, -2)) < 0
    else:
        collision = np.zeros(len(trajs), dtype=bool)
    weighted = (
        weights.progress * progress
        + weights.clearance * np.minimum(clearance / weights.clearance_cap, 1.0)
        - weights.smoothness * smooth
    )
    weighted = np.clip(weighted, -GATE_BONUS / 2, GATE_BONUS / 2)
    gate = dac & ~collision
    total = weighted + GATE_BONUS * gate
    return dac, collision, progress, clearance, smooth, total


def score_many(trajs, scenario, field, weights=ScoreWeights()) -> list:
    cols = _score_arrays(trajs, scenario, field, weights)
    return [
        ScoreBreakdown(int(d), bool(c), float(p), float(cl), float(s), float(t))
        for d, c, p, cl, s, t in zip(*cols)
    ]


def score_candidate(traj, scenario, field, weights=ScoreWeights()) -> ScoreBreakdown:
    return score_many(np.asarray(traj, dtype=float)[None], scenario, field, weights)[0]


def _order(breakdowns):
    keys = [(-int(b.feasible), -b.total, i) for i, b in enumerate(breakdowns)]
    return [k[2] for k in sorted(keys)]


def top_k_anchors(vocab, scenario, field, k, weights=ScoreWeights()) -> list:
    """The ``k`` best-scoring anchor indices, best first; ties go to the lower index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = score_many(vocab.anchors, scenario, field, weights)
    return _order(scores)[:k]


class RankedEntry(NamedTuple):
    rank: int
    source: str  # "generated" or "vocab"
    id: int
    score: ScoreBreakdown
    trajectory: np.ndarray


def rank_and_select(candidates, vocab, scenario, field, weights=ScoreWeights()):
    """Rank generated candidates together with the vocabulary anchors.

    Returns ``(best_trajectory, table)`` where ``table`` lists every pool item
    as a :class:`RankedEntry`, best first.
    """
    cands = [np.asarray(c, dtype=float) for c in candidates]
    if not cands:
        raise ValueError("rank_and_select needs at least one candidate")
    pool = [("generated", i, c) for i, c in enumerate(cands)]
    if vocab is not None:
        pool += [("vocab", k, a) for k, a in enumerate(vocab.anchors)]
    scores = score_many(np.stack([p[2] for p in pool]), scenario, field, weights)
    table = [
        RankedEntry(r, pool[i][0], pool[i][1], scores[i], pool[i][2])
        for r, i in enumerate(_order(scores))
    ]
    return table[0].trajectory, table


def write_ranked_table(path, table) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["rank", "source", "id", "dac", "progress", "clearance", "smoothness", "total"])
        for e in table:
            s = e.score
            wr.writerow([e.rank, e.source, e.id, s.dac, repr(s.progress), repr(s.clearance), repr(s.smoothness), repr(s.total)])
