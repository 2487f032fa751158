"""Rectified-flow samples, condition dropout and the flow-matching training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import net
from .errors import ConfigError
from .net import ConditionSet, OptimizerState, VectorFieldParams
from .traj import Box

DEFAULT_BATCH_SIZE = 64
DEFAULT_LR = 2e-4


@dataclass(frozen=True, eq=False)
class FlowSample:
    """Noise ``x0``, data ``x1``, time ``t``, interpolant ``x_t`` and regression target.

    Fields may carry a leading batch axis, in which case ``t`` has shape (B,).
    """

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray


def interpolate(x0, x1, t):
    """Straight-line interpolant ``t * x1 + (1 - t) * x0``."""
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise ConfigError(f"interpolation endpoints differ in shape: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=float)
    if np.any((t < 0) | (t > 1)):
        raise ConfigError("interpolation time must lie in [0, 1]")
    if t.ndim == 1 and x0.ndim == 2:
        t = t[:, None]
    return t * x1 + (1.0 - t) * x0


def make_flow_sample(x1, rng, t_sampler=None) -> FlowSample:
    """Draw ``x0 ~ N(0, I)`` and ``t`` (uniform unless ``t_sampler`` is given).

    ``x1`` may be a single flattened trajectory (2T,) or a batch (B, 2T); for a
    batch one time per row is drawn.
    """
    x1 = np.asarray(x1, dtype=float)
    x0 = rng.standard_normal(x1.shape)
    n_t = x1.shape[0] if x1.ndim == 2 else None
    if t_sampler is None:
        t = rng.random(n_t)
    else:
        t = np.asarray(t_sampler(rng, n_t), dtype=float)
    t = np.asarray(t, dtype=float)
    return FlowSample(x0, x1, t, interpolate(x0, x1, t), x1 - x0)


def cfg_dropout(cond: ConditionSet, p, rng) -> ConditionSet:
    """Replace each present signal by "absent" independently with probability ``p``.

    One uniform draw is consumed per signal whether or not it is present, so the
    random stream does not depend on which signals a sample carries.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must lie in [0, 1)")
    u = rng.random(len(net.SIGNALS))
    drop = {s: None for s, ui in zip(net.SIGNALS, u) if ui < p}
    return cond.replace(**drop) if drop else cond


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = DEFAULT_BATCH_SIZE
    lr: float = DEFAULT_LR
    epochs: int = 30
    cond_dropout: float = 0.1
    # probability of dropping every signal at once, which trains the
    # unconditional branch used by guidance
    joint_dropout: float = 0.1
    seed: int = 0
    vocab_ref: str = ""
    bounds: Box = field(default_factory=Box)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if not 0.0 <= self.cond_dropout < 1.0 or not 0.0 <= self.joint_dropout < 1.0:
            raise ConfigError("dropout probabilities must lie in [0, 1)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")


@dataclass(eq=False)
class TrainingSet:
    """Normalised targets with their condition records.

    ``scenario_index`` maps each sample to ``scenarios`` (used by the
    constraint-aware stage, which needs the road of every sample).
    """

    x1: np.ndarray
    conds: list
    scenario_index: np.ndarray | None = None
    scenarios: list | None = None

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=float)
        if self.x1.ndim != 2 or len(self.x1) != len(self.conds):
            raise ConfigError("training set needs one condition record per (2T,) target")

    def __len__(self):
        return len(self.x1)


def apply_dropout(conds, cfg: TrainConfig, rng):
    out = []
    for c in conds:
        if rng.random() < cfg.joint_dropout:
            rng.random(len(net.SIGNALS))  # keep the stream aligned with the per-signal path
            out.append(net.NULL_CONDITION)
        else:
            out.append(cfg_dropout(c, cfg.cond_dropout, rng))
    return out


def fm_training_step(params: VectorFieldParams, opt: OptimizerState, x1, conds, cfg: TrainConfig, rng, aux=None):
    """One flow-matching update on a batch of targets ``x1`` (B, 2T).

    ``aux`` optionally maps the drawn :class:`FlowSample` to an extra loss term
    on the network output (see :func:`net.backward`). Returns
    ``(params, opt, loss)``.
    """
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    if len(x1) == 0:
        raise ConfigError("empty training batch")
    fs = make_flow_sample(x1, rng)
    conds = apply_dropout(conds, cfg, rng)
    extra = aux(fs) if aux is not None else None
    loss, grads = net.backward(params, fs.x_t, fs.t, conds, fs.target, extra=extra)
    params, opt = net.adam_step(params, grads, opt)
    return params, opt, loss


def train_loop(params, opt, data: TrainingSet, cfg: TrainConfig, rng, aux_for_batch=None, step_hook=None):
    log = []
    n = len(data)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            aux = aux_for_batch(idx) if aux_for_batch is not None else None
            params, opt, loss = fm_training_step(
                params, opt, data.x1[idx], [data.conds[i] for i in idx], cfg, rng, aux=aux
            )
            losses.append(loss)
            if step_hook is not None:
                step_hook(epoch, loss)
        log.append(
            {
                "epoch": epoch,
                "mean_loss": float(np.mean(losses)),
                "steps": len(losses),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )
    return params, opt, log


def train_stage1(data: TrainingSet, cfg: TrainConfig, params=None, arch=None, step_hook=None):
    """Flow-matching training over ``cfg.epochs`` epochs.

    Starts from ``params`` when given (continued training), otherwise from a
    seeded initialisation. Returns ``(params, optimizer_state, log)``; each log
    row holds the epoch, its mean step loss, the step count and wall time.
    """
    if len(data) == 0:
        raise ConfigError("training set is empty")
    init_rng, rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    if params is None:
        arch = arch or net.Architecture(horizon=data.x1.shape[1] // 2)
        params = net.init_params(arch, init_rng)
    opt = OptimizerState.for_params(params, lr=cfg.lr)
    return train_loop(params, opt, data, cfg, rng, step_hook=step_hook)


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "mean_loss", "wall_ms"])
        for row in log:
            wr.writerow([row["epoch"], repr(row["mean_loss"]), f"{row['wall_ms']:.1f}"])


def read_training_log(path):
    with open(path, newline="") as fh:
        return [
            {"epoch": int(r["epoch"]), "mean_loss": float(r["mean_loss"]), "wall_ms": float(r["wall_ms"])}
            for r in csv.DictReader(fh)
        ]

