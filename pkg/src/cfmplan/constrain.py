"""Constraint mechanisms for sampling and training.

* velocity correction toward a road-compliant anchor (CVF),
* starting the flow from a road-compliant anchor instead of noise (CIV),
* a drivable-area energy built on the ESDF, used for fine-tuning and for
  energy-ascent guidance at the end of sampling (CAT).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from . import flow, geom
from .errors import ConfigError
from .traj import Box, TrajectoryVocabulary, from_unit, select_compliant_anchors, to_unit

DEFAULT_LAMBDA = -0.1
DEGENERATE_EPS = 1e-8


@dataclass(frozen=True)
class ConstraintConfig:
    lam: float = DEFAULT_LAMBDA
    cvf_enabled: bool = True
    civ_enabled: bool = True
    # CIV draws uniformly among this many highest-clearance compliant anchors (None: all)
    civ_pool: int | None = 16
    energy_weight: float = 0.05
    energy_tau: float = 1.0
    energy_window: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.energy_window <= 1.0:
            raise ConfigError("energy_window must lie in [0, 1]")
        if not self.energy_tau > 0:
            raise ConfigError("energy_tau must be positive")
        if self.energy_weight < 0:
            raise ConfigError("energy_weight must be >= 0")
        if self.civ_pool is not None and self.civ_pool < 1:
            raise ConfigError("civ_pool must be >= 1")

    @classmethod
    def disabled(cls, **kw):
        """Every mechanism switched off (plain guided sampling)."""
        base = dict(cvf_enabled=False, civ_enabled=False, energy_weight=0.0)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# velocity correction


def precompute_vc(x0, anchor_x1c):
    """Constant velocity carrying ``x0`` to the compliant anchor in unit time."""
    x0 = np.asarray(x0, dtype=float)
    a = np.asarray(anchor_x1c, dtype=float)
    if x0.shape != a.shape:
        raise ConfigError(f"x0 {x0.shape} and anchor {a.shape} differ in shape")
    return a - x0


def cvf_correct(v, v_c, lam=DEFAULT_LAMBDA, eps=DEGENERATE_EPS):
    """``v + (2 lam (v . v_c) / |v_c|^2) v_c`` row-wise.

    Returns ``(v_corrected, degenerate)``. Rows whose ``|v_c| <= eps`` are
    returned unchanged and flagged in ``degenerate``.
    """
    v = np.asarray(v, dtype=float)
    v_c = np.asarray(v_c, dtype=float)
    nrm2 = np.sum(v_c * v_c, axis=-1)
    degenerate = np.sqrt(nrm2) <= eps
    dot = np.sum(v * v_c, axis=-1)
    coef = np.where(degenerate, 0.0, 2.0 * lam * dot / np.where(degenerate, 1.0, nrm2))
    out = np.where(degenerate[..., None], v, v + coef[..., None] * v_c)
    if out.ndim == 1:
        return out, bool(degenerate)
    return out, degenerate


# ---------------------------------------------------------------------------
# anchor initialisation


class CivChoice(NamedTuple):
    x0: np.ndarray
    anchor_index: int | None
    fallback: bool


def civ_init(vocab: TrajectoryVocabulary, field, bounds: Box, rng, fallback_rng, max_n=None, compliant=None) -> CivChoice:
    """Normalised compliant anchor drawn uniformly among the compliant ones.

    When no anchor is DAC-compliant the result is a standard normal draw from
    ``fallback_rng`` with ``fallback=True``. ``compliant`` may carry a
    precomputed :func:`select_compliant_anchors` result.
    """
    if len(vocab) == 0:
        raise ConfigError("empty vocabulary")
    if compliant is None:
        compliant = select_compliant_anchors(vocab, field, max_n)
    elif max_n is not None:
        compliant = compliant[:max_n]
    if not compliant:
        return CivChoice(fallback_rng.standard_normal(2 * vocab.horizon), None, True)
    k = compliant[int(rng.integers(len(compliant)))]
    return CivChoice(to_unit(vocab.anchors[k], bounds).reshape(-1), k, False)


# ---------------------------------------------------------------------------
# drivable-area energy


def _waypoint_energy(pts, field, tau):
    d, clamped = geom.esdf_lookup(field, pts)
    return np.tanh(d / tau), clamped


def constraint_energy(x, field, bounds: Box, tau=1.0):
    """Sum over waypoints of ``tanh(esdf / tau)``; larger means deeper on the road.

    ``x`` holds normalised values, (2T,) or batched (B, 2T). Returns
    ``(energy, clamped)`` where ``clamped`` flags rows with a waypoint outside
    the ESDF grid.
    """
    x = np.asarray(x, dtype=float)
    pts = from_unit(x.reshape(x.shape[:-1] + (-1, 2)), bounds)
    e, clamped = _waypoint_energy(pts, field, tau)
    return e.sum(axis=-1), clamped.any(axis=-1)


def energy_step(field, bounds: Box):
    """Finite-difference step per normalised axis: half a cell."""
    return 0.5 * field.resolution / bounds.half_size


def energy_gradient(x, field, bounds: Box, tau=1.0, step=None):
    """Central-difference gradient of :func:`constraint_energy` w.r.t. ``x``.

    Each waypoint only affects its own term, so every coordinate needs just two
    ESDF queries. ``step`` is in normalised units per axis (default: half a
    cell). Returns ``(gradient, clamped)``.
    """
    x = np.asarray(x, dtype=float)
    pts_shape = x.shape[:-1] + (-1, 2)
    w = x.reshape(pts_shape)
    h = energy_step(field, bounds) if step is None else np.broadcast_to(np.asarray(step, dtype=float), (2,))
    grad = np.empty_like(w)
    clamped = np.zeros(w.shape[:-1], dtype=bool)
    for axis in range(2):
        shift = np.zeros(2)
        shift[axis] = h[axis]
        ep, cp = _waypoint_energy(from_unit(w + shift, bounds), field, tau)
        em, cm = _waypoint_energy(from_unit(w - shift, bounds), field, tau)
        grad[..., axis] = (ep - em) / (2.0 * h[axis])
        clamped |= cp | cm
    return grad.reshape(x.shape), clamped.any(axis=-1)


# ---------------------------------------------------------------------------
# constraint-aware fine-tuning


def endpoint_hinge(fs, out, fields, bounds: Box, tau, weight):
    """Hinge on negative energy of the one-step endpoint ``x_t + (1 - t) v``.

    Returns ``(loss, d loss / d out)`` averaged over the batch.
    """
    b = out.shape[0]
    one_minus_t = (1.0 - np.asarray(fs.t, dtype=float)).reshape(b, 1)
    xhat = fs.x_t + one_minus_t * out
    loss = 0.0
    grad = np.zeros_like(out)
    for i in range(b):
        e, _ = constraint_energy(xhat[i], fields[i], bounds, tau)
        if e < 0:
            loss += -float(e)
            g, _ = energy_gradient(xhat[i], fields[i], bounds, tau)
            grad[i] = -g * one_minus_t[i]
    return weight * loss / b, grad * (weight / b)


def scenario_field_cache(scenarios, resolution=geom.DEFAULT_RESOLUTION, extent=geom.DEFAULT_EXTENT, maxsize=None):
    """Callable ``index -> SignedDistanceField`` with an LRU cache (unbounded by default).

    Training revisits every scene once per epoch, so a bounded cache smaller
    than the dataset would rebuild every field on each pass.
    """

    @lru_cache(maxsize=maxsize)
    def field_for(i):
        return geom.compute_esdf(geom.rasterize_road(scenarios[i], resolution, extent))

    return field_for


def train_stage2(params, data: flow.TrainingSet, cfg: flow.TrainConfig, energy_weight, tau=1.0, field_for=None, step_hook=None):
    """Fine-tune with flow-matching loss plus ``energy_weight`` times the endpoint hinge.

    ``field_for`` maps a scenario index to its ESDF; by default fields are
    rasterised lazily from ``data.scenarios``. With ``energy_weight == 0`` the
    run reproduces continued stage-1 training exactly. Returns
    ``(params, optimizer_state, log)``.
    """
    if params is None:
        raise ConfigError("stage-2 fine-tuning needs stage-1 parameters")
    if len(data) == 0:
        raise ConfigError("training set is empty")
    if data.scenario_index is None:
        raise ConfigError("stage-2 training set needs per-sample scenario indices")
    if field_for is None:
        if data.scenarios is None:
            raise ConfigError("stage-2 training set needs scenarios or a field provider")
        field_for = scenario_field_cache(data.scenarios)
    bounds = cfg.bounds

    def aux_for_batch(idx):
        fields = [field_for(int(data.scenario_index[i])) for i in idx]

        def aux(fs):
            return lambda out: endpoint_hinge(fs, out, fields, bounds, tau, energy_weight)

        return aux

    _, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    opt = flow.OptimizerState.for_params(params, lr=cfg.lr)
    return flow.train_loop(params, opt, data, cfg, rng, aux_for_batch=aux_for_batch, step_hook=step_hook)
