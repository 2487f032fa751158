"""Euler integration of the learned flow with guidance and constraint hooks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from functools import cached_property
from typing import NamedTuple

import numpy as np

from . import geom, net
from .constrain import ConstraintConfig, civ_init, constraint_energy, cvf_correct, energy_gradient, precompute_vc
from .errors import ConfigError, NumericalError
from .net import ConditionSet, VectorFieldParams
from .traj import Box, TrajectoryVocabulary, from_unit, select_compliant_anchors, to_unit

DEFAULT_STEPS = 100
DEFAULT_CANDIDATES = 100


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    guidance_scale: float = 2.0
    candidates: int = DEFAULT_CANDIDATES
    constraint: ConstraintConfig = dc_field(default_factory=ConstraintConfig)
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if self.guidance_scale < 0:
            raise ConfigError("guidance scale must be >= 0")
        if self.candidates < 1:
            raise ConfigError("candidate count must be >= 1")


@dataclass(frozen=True, eq=False)
class ScenarioContext:
    """Everything the constraint hooks need to know about one scene."""

    field: geom.SignedDistanceField | None = None
    vocab: TrajectoryVocabulary | None = None
    bounds: Box = dc_field(default_factory=Box)

    @classmethod
    def from_scenario(cls, scenario, vocab=None, bounds=None, resolution=geom.DEFAULT_RESOLUTION, extent=geom.DEFAULT_EXTENT):
        field = geom.compute_esdf(geom.rasterize_road(scenario, resolution, extent))
        return cls(field, vocab, bounds or Box())

    @cached_property
    def compliant(self) -> list:
        if self.field is None or self.vocab is None:
            return []
        return select_compliant_anchors(self.vocab, self.field)


@dataclass(eq=False)
class Diagnostics:
    steps: int
    energies: np.ndarray
    anchor_index: int | None = None
    civ_anchor: int | None = None
    civ_fallback: bool = False
    cvf_anchor: int | None = None
    cvf_degenerate: bool = False
    clamped: bool = False

    @property
    def final_energy(self):
        return float(self.energies[-1]) if len(self.energies) else math.nan


class Candidate(NamedTuple):
    trajectory: np.ndarray
    anchor_index: int
    diagnostics: Diagnostics


def euler_step(x_t, v, dt):
    """Explicit Euler update ``x + v dt``."""
    if not dt > 0:
        raise ConfigError("Euler step needs dt > 0")
    return np.asarray(x_t, dtype=float) + np.asarray(v, dtype=float) * dt


def cfg_combine(v_cond, v_uncond, s):
    """Classifier-free guidance ``v_uncond + s (v_cond - v_uncond)``.

    Written as ``(1 - s) v_uncond + s v_cond`` so that s = 0 and s = 1 return
    the respective branch exactly.
    """
    v_cond = np.asarray(v_cond, dtype=float)
    v_uncond = np.asarray(v_uncond, dtype=float)
    if v_cond.shape != v_uncond.shape:
        raise ConfigError("guidance branches differ in shape")
    return (1.0 - s) * v_uncond + s * v_cond


def guided_steps(cfg: SamplerConfig) -> int:
    return int(round(cfg.constraint.energy_window * cfg.steps))


def integrate(params: VectorFieldParams, x0, conds, ctx: ScenarioContext, cfg: SamplerConfig, v_c=None):
    """Integrate rows of ``x0`` (B, 2T) from t = 0 to 1.

    Per step: conditional and unconditional velocities, guidance, optional
    velocity correction toward ``v_c``, energy ascent in the final window, Euler
    update. Returns ``(x1, energies (B, steps), clamped (B,), degenerate (B,))``.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    b = x.shape[0]
    arch = params.arch
    cb = net.stack_conditions(conds, arch)
    ub = net.unconditional_batch(b, arch)
    any_cond = bool(cb.present.any())
    cc = cfg.constraint
    n = cfg.steps
    dt = 1.0 / n
    first_guided = n - guided_steps(cfg)
    use_energy = ctx.field is not None and cc.energy_weight > 0
    energies = np.zeros((b, n))
    clamped = np.zeros(b, dtype=bool)
    degenerate = np.zeros(b, dtype=bool)
    for i in range(n):
        t = np.full(b, i * dt)
        if ctx.field is not None:
            e, cl = constraint_energy(x, ctx.field, ctx.bounds, cc.energy_tau)
            energies[:, i] = e
            clamped |= cl
        v = net._forward(params, x, t, cb).out
        if any_cond and cfg.guidance_scale != 1.0:
            v = cfg_combine(v, net._forward(params, x, t, ub).out, cfg.guidance_scale)
        if v_c is not None:
            v, deg = cvf_correct(v, v_c, cc.lam)
            degenerate |= deg
        if use_energy and i >= first_guided:
            g, _ = energy_gradient(x, ctx.field, ctx.bounds, cc.energy_tau)
            v = v + cc.energy_weight * g
        x = euler_step(x, v, dt)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"non-finite sampler state at step {i}", i)
    return x, energies, clamped, degenerate


def _initial_state(ctx, cfg, rng, dim):
    """x0 for one sample: a compliant anchor under CIV, otherwise N(0, I)."""
    cc = cfg.constraint
    if cc.civ_enabled and ctx.field is not None and ctx.vocab is not None:
        choice = civ_init(ctx.vocab, ctx.field, ctx.bounds, rng, rng, cc.civ_pool, compliant=ctx.compliant)
        return choice.x0, choice.anchor_index, choice.fallback
    return rng.standard_normal(dim), None, False


def _cvf_anchor(ctx, cfg, preferred=None):
    """Compliant anchor the velocity correction aims at, or None."""
    if not cfg.constraint.cvf_enabled or not ctx.compliant:
        return None
    if preferred is not None and preferred in set(ctx.compliant):
        return preferred
    return ctx.compliant[0]


def _run(params, conds, rngs, ctx, cfg, preferred_anchors):
    dim = params.arch.state_dim
    x0s, info, vcs = [], [], []
    for rng, pref in zip(rngs, preferred_anchors):
        x0, civ_idx, fallback = _initial_state(ctx, cfg, rng, dim)
        target = _cvf_anchor(ctx, cfg, pref)
        x0s.append(x0)
        info.append((civ_idx, fallback, target))
        if target is not None:
            vcs.append(precompute_vc(x0, to_unit(ctx.vocab.anchors[target], ctx.bounds).reshape(-1)))
        else:
            vcs.append(np.zeros(dim))
    # the correction target depends only on the scene, so it is set for every row or none
    v_c = np.array(vcs) if info[0][2] is not None else None
    x1, energies, clamped, degenerate = integrate(params, np.array(x0s), conds, ctx, cfg, v_c)
    trajs = from_unit(x1.reshape(len(x1), -1, 2), ctx.bounds)
    diags = []
    for k, (civ_idx, fallback, target) in enumerate(info):
        diags.append(
            Diagnostics(
                cfg.steps, energies[k], None, civ_idx, fallback, target, bool(degenerate[k]), bool(clamped[k])
            )
        )
    return trajs, diags


def sample_trajectory(params: VectorFieldParams, cond: ConditionSet, ctx: ScenarioContext, cfg: SamplerConfig, rng):
    """Draw one trajectory (metric, (T, 2)) and its :class:`Diagnostics`."""
    trajs, diags = _run(params, [cond], [rng], ctx, cfg, [None])
    return trajs[0], diags[0]


def candidate_rng(seed, stream, anchor_index):
    """Noise stream of one candidate, keyed by the anchor it is conditioned on."""
    return np.random.default_rng([int(seed), int(stream), int(anchor_index)])


def sample_candidates(params: VectorFieldParams, anchor_set, shared_cond: ConditionSet, ctx: ScenarioContext, cfg: SamplerConfig, stream=0):
    """One candidate per anchor index in ``anchor_set``, in the same order.

    Each candidate is conditioned on its anchor and the anchor's endpoint as
    goal, on top of the signals in ``shared_cond``. Noise comes from
    :func:`candidate_rng`, so a candidate does not depend on the rest of the
    set.
    """
    anchor_set = [int(a) for a in anchor_set]
    if not anchor_set:
        raise ConfigError("anchor set is empty")
    if ctx.vocab is None:
        raise ConfigError("candidate sampling needs a vocabulary")
    conds, rngs = [], []
    for a in anchor_set:
        nt = to_unit(ctx.vocab.anchors[a], ctx.bounds)
        conds.append(shared_cond.replace(anchor=np.clip(nt, -1, 1), goal=np.clip(nt[-1], -1, 1)))
        rngs.append(candidate_rng(cfg.seed, stream, a))
    trajs, diags = _run(params, conds, rngs, ctx, cfg, anchor_set)
    out = []
    for a, traj, d in zip(anchor_set, trajs, diags):
        d.anchor_index = a
        out.append(Candidate(traj, a, d))
    return out


def write_candidates(path, groups, config_hash=""):
    """Candidate dump over scenes.

    ``groups`` yields ``(scenario_id, candidates, field)``; one row per
    candidate with its anchor id, waypoint coordinates, DAC flag and final
    energy.
    """
    groups = list(groups)
    horizon = next((len(c.trajectory) for _, cs, _ in groups for c in cs), 0)
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        wr = csv.writer(fh)
        coords = [f"{a}{k}" for k in range(horizon) for a in ("x", "y")]
        wr.writerow(["scenario_id", "candidate_id", "anchor_id", *coords, "dac", "energy_final"])
        for sid, cands, field in groups:
            for i, c in enumerate(cands):
                dac = int(geom.dac_compliant(c.trajectory, field)) if field is not None else ""
                flat = [repr(float(v)) for v in c.trajectory.reshape(-1)]
                wr.writerow([sid, i, c.anchor_index, *flat, dac, repr(c.diagnostics.final_energy)])


def read_candidates(path):
    """Returns ``(config_hash, {scenario_id: [(anchor_id, trajectory, dac), ...]})``."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("# config_hash="):
            raise ConfigError(f"{path}: missing config hash header")
        rows = list(csv.DictReader(fh))
    out = {}
    for r in rows:
        n = sum(1 for k in r if k.startswith("x"))
        traj = np.array([[float(r[f"x{k}"]), float(r[f"y{k}"])] for k in range(n)])
        out.setdefault(r["scenario_id"], []).append((int(r["anchor_id"]), traj, r["dac"]))
    return first.split("=", 1)[1], out
