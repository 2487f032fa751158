"""Trajectories, normalisation, DTW, farthest-point vocabularies and anchor selection.

A trajectory is a ``(T, 2)`` float array of metric waypoints. The flow works
on normalised values in [-1, 1], flattened to ``2T`` numbers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom
from .errors import ConfigError, OutOfBoundsError

DEFAULT_HORIZON = 8
DEFAULT_VOCAB_SIZE = 256
FULL_SCALE_VOCAB_SIZE = 8192  # the desk default above is far smaller


@dataclass(frozen=True)
class Box:
    """Axis-aligned normalisation box in metres."""

    x_min: float = geom.DEFAULT_EXTENT[0]
    x_max: float = geom.DEFAULT_EXTENT[1]
    y_min: float = geom.DEFAULT_EXTENT[2]
    y_max: float = geom.DEFAULT_EXTENT[3]

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ConfigError("normalisation box needs positive extent on both axes")

    @property
    def low(self):
        return np.array([self.x_min, self.y_min])

    @property
    def high(self):
        return np.array([self.x_max, self.y_max])

    @property
    def half_size(self):
        return (self.high - self.low) / 2

    def as_list(self):
        return [self.x_min, self.x_max, self.y_min, self.y_max]


@dataclass(frozen=True, eq=False)
class NormalizedTrajectory:
    values: np.ndarray
    bounds: Box

    def flat(self):
        return self.values.reshape(-1)


def as_trajectory(points, horizon=None) -> np.ndarray:
    traj = np.asarray(points, dtype=float)
    if traj.ndim == 1:
        traj = traj.reshape(-1, 2)
    if traj.ndim != 2 or traj.shape[1] != 2 or len(traj) < 2:
        raise ConfigError(f"trajectory must be (T>=2, 2), got {traj.shape}")
    if horizon is not None and len(traj) != horizon:
        raise ConfigError(f"trajectory has {len(traj)} waypoints, expected {horizon}")
    if not np.all(np.isfinite(traj)):
        raise ConfigError("trajectory has non-finite coordinates")
    return traj


def to_unit(points, bounds: Box) -> np.ndarray:
    """Affine map of metric points (..., 2) onto [-1, 1]^2, no range check."""
    low, high = bounds.low, bounds.high
    return (np.asarray(points, dtype=float) - low) / (high - low) * 2.0 - 1.0


def from_unit(values, bounds: Box) -> np.ndarray:
    low, high = bounds.low, bounds.high
    return (np.asarray(values, dtype=float) + 1.0) / 2.0 * (high - low) + low


def normalize(traj, bounds: Box) -> NormalizedTrajectory:
    traj = as_trajectory(traj)
    outside = np.any((traj < bounds.low) | (traj > bounds.high), axis=1)
    if outside.any():
        k = int(np.argmax(outside))
        raise OutOfBoundsError(f"waypoint {k} {traj[k].tolist()} lies outside {bounds}", k)
    vals = np.clip(to_unit(traj, bounds), -1.0, 1.0)
    return NormalizedTrajectory(vals, bounds)


def denormalize(norm: NormalizedTrajectory) -> np.ndarray:
    return from_unit(np.asarray(norm.values).reshape(-1, 2), norm.bounds)


# ---------------------------------------------------------------------------
# dynamic time warping


def dtw_distance(a, b) -> float:
    """Classic DTW with Euclidean point cost and match/insert/delete steps."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    n, m = len(a), len(b)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return float(acc[n, m])


def dtw_one_to_many(a, others) -> np.ndarray:
    """DTW from ``a`` (T, 2) to each of ``others`` (N, U, 2), vectorised over N.

    Same recursion and summation order as :func:`dtw_distance`, so the two agree
    bit for bit.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    others = np.asarray(others, dtype=float)
    n, m = len(a), others.shape[1]
    cost = np.linalg.norm(a[None, :, None, :] - others[:, None, :, :], axis=-1)
    acc = np.full((others.shape[0], n + 1, m + 1), np.inf)
    acc[:, 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            best = np.minimum(np.minimum(acc[:, i - 1, j - 1], acc[:, i - 1, j]), acc[:, i, j - 1])
            acc[:, i, j] = cost[:, i - 1, j - 1] + best
    return acc[:, n, m]


# ---------------------------------------------------------------------------
# vocabulary


@dataclass(frozen=True, eq=False)
class TrajectoryVocabulary:
    anchors: np.ndarray
    source_indices: np.ndarray
    dataset_id: str = ""
    seed: int = 0

    def __post_init__(self):
        anchors = np.array(self.anchors, dtype=float)
        if anchors.ndim != 3 or anchors.shape[2] != 2 or len(anchors) < 1:
            raise ConfigError(f"vocabulary anchors must be (K>=1, T, 2), got {anchors.shape}")
        if not np.all(np.isfinite(anchors)):
            raise ConfigError("vocabulary anchors must be finite")
        idx = np.array(self.source_indices, dtype=np.int64)
        if idx.shape != (len(anchors),) or len(np.unique(idx)) != len(idx):
            raise ConfigError("vocabulary source indices must be distinct, one per anchor")
        anchors.setflags(write=False)
        idx.setflags(write=False)
        object.__setattr__(self, "anchors", anchors)
        object.__setattr__(self, "source_indices", idx)

    def __len__(self):
        return len(self.anchors)

    @property
    def horizon(self):
        return self.anchors.shape[1]


def fps_vocabulary(dataset, k, seed=0, dataset_id="") -> TrajectoryVocabulary:
    """Greedy farthest-point selection of ``k`` trajectories under DTW.

    The first pick is the element at a seeded random index; each next pick
    maximises the DTW distance to the nearest already-selected trajectory,
    breaking ties by the lowest dataset index.
    """
    data = np.asarray(dataset, dtype=float)
    if data.ndim != 3:
        raise ConfigError("dataset must be an (N, T, 2) array")
    n = len(data)
    if not 1 <= k <= n:
        raise ConfigError(f"vocabulary size {k} must be in [1, {n}]")
    first = int(np.random.default_rng(seed).integers(n))
    picks = [first]
    mind = dtw_one_to_many(data[first], data)
    mind[first] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(mind))  # argmax returns the lowest index on ties
        picks.append(nxt)
        mind = np.minimum(mind, dtw_one_to_many(data[nxt], data))
        mind[picks] = -np.inf
    return TrajectoryVocabulary(data[picks], np.array(picks), dataset_id, seed)


def fps_min_distances(vocab: TrajectoryVocabulary) -> np.ndarray:
    """Distance of each pick (after the first) to the picks before it."""
    out = []
    for r in range(1, len(vocab)):
        d = [dtw_distance(vocab.anchors[r], vocab.anchors[q]) for q in range(r)]
        out.append(min(d))
    return np.array(out)


def nearest_anchor(gt, vocab: TrajectoryVocabulary) -> int:
    """Index of the anchor closest to ``gt`` under DTW; ties resolve to the lowest."""
    return int(np.argmin(dtw_one_to_many(gt, vocab.anchors)))


def select_compliant_anchors(vocab: TrajectoryVocabulary, field, max_n=None) -> list:
    """DAC-compliant anchor indices by descending minimum ESDF clearance.

    Returns at most ``max_n`` indices; an empty list when nothing complies.
    """
    val, clamped = geom.esdf_lookup(field, vocab.anchors)
    ok = np.all((val >= 0) & ~clamped, axis=1)
    clearance = val.min(axis=1)
    idx = np.flatnonzero(ok)
    order = idx[np.lexsort((idx, -clearance[idx]))]
    if max_n is not None:
        order = order[:max_n]
    return [int(i) for i in order]


def save_vocabulary(vocab: TrajectoryVocabulary, path, extra=None) -> None:
    meta = {"K": len(vocab), "T": vocab.horizon, "seed": vocab.seed, "dataset_id": vocab.dataset_id}
    meta.update(extra or {})
    np.savez(
        path,
        meta=np.array(json.dumps(meta, sort_keys=True)),
        anchors=vocab.anchors,
        source_indices=vocab.source_indices,
    )


def load_vocabulary(path):
    """Load a vocabulary file; returns ``(vocab, meta)``."""
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        anchors = z["anchors"]
        idx = z["source_indices"]
    if anchors.shape[:2] != (meta["K"], meta["T"]):
        raise ConfigError(f"{path}: anchor array {anchors.shape} disagrees with K/T header")
    vocab = TrajectoryVocabulary(anchors, idx, meta.get("dataset_id", ""), int(meta["seed"]))
    return vocab, meta
