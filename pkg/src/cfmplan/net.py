"""Conditional velocity network with hand-written backprop and Adam.

The network maps a flattened normalised trajectory ``x_t`` (2T values), a time
``t`` in [0, 1] and a set of optional condition signals to a velocity of the
same size as ``x_t``::

    h0 = tanh(x W_x + emb(t) W_t + c W_c + b_in)
    hk = tanh(h(k-1) W_hk + b_hk)          k = 1 .. depth-1
    v  = h(depth-1) W_out + b_out

``c`` concatenates the anchor, goal, command and reward signals; a signal that
is absent is replaced by its own learned null vector.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, MissingArtifactError, NumericalError

SIGNALS = ("anchor", "goal", "command", "reward")
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    horizon: int = 8
    hidden: int = 256
    depth: int = 3
    time_dim: int = 32
    n_commands: int = 4
    max_freq: float = 100.0

    def __post_init__(self):
        if self.horizon < 2 or self.hidden < 1 or self.depth < 1:
            raise ConfigError("architecture needs horizon >= 2, hidden >= 1, depth >= 1")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time embedding dimension must be even")

    @property
    def state_dim(self):
        return 2 * self.horizon

    @property
    def signal_dims(self):
        return {"anchor": 2 * self.horizon, "goal": 2, "command": self.n_commands, "reward": 1}

    @property
    def cond_dim(self):
        return sum(self.signal_dims.values())

    def signal_slices(self):
        out, start = {}, 0
        for name in SIGNALS:
            n = self.signal_dims[name]
            out[name] = slice(start, start + n)
            start += n
        return out


@dataclass(eq=False)
class VectorFieldParams:
    arch: Architecture
    tensors: dict

    def copy(self):
        return VectorFieldParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})

    @property
    def n_params(self):
        return int(sum(v.size for v in self.tensors.values()))

    def names(self):
        return list(self.tensors)


def init_params(arch: Architecture, rng) -> VectorFieldParams:
    """Scaled-normal initialisation; the output layer starts small."""
    d, hdim = arch.state_dim, arch.hidden
    fan_in = d + arch.time_dim + arch.cond_dim
    scale = 1.0 / np.sqrt(fan_in)
    p = {
        "w_x": rng.normal(0.0, scale, (d, hdim)),
        "w_t": rng.normal(0.0, scale, (arch.time_dim, hdim)),
        "w_c": rng.normal(0.0, scale, (arch.cond_dim, hdim)),
        "b_in": np.zeros(hdim),
    }
    for k in range(arch.depth - 1):
        p[f"w_h{k}"] = rng.normal(0.0, 1.0 / np.sqrt(hdim), (hdim, hdim))
        p[f"b_h{k}"] = np.zeros(hdim)
    p["w_out"] = rng.normal(0.0, 0.1 / np.sqrt(hdim), (hdim, d))
    p["b_out"] = np.zeros(d)
    for name in SIGNALS:
        p[f"null_{name}"] = rng.normal(0.0, 0.5, arch.signal_dims[name])
    return VectorFieldParams(arch, p)


def zero_params(arch: Architecture) -> VectorFieldParams:
    shapes = init_params(arch, np.random.default_rng(0)).tensors
    return VectorFieldParams(arch, {k: np.zeros_like(v) for k, v in shapes.items()})


# ---------------------------------------------------------------------------
# conditions


def command_one_hot(name: str, n_commands=4) -> np.ndarray:
    from .geom import COMMANDS

    if name not in COMMANDS:
        raise ConfigError(f"unknown command {name!r}")
    v = np.zeros(n_commands)
    v[COMMANDS.index(name)] = 1.0
    return v


@dataclass(frozen=True, eq=False)
class ConditionSet:
    """Optional conditioning signals; ``None`` marks an absent signal."""

    anchor: np.ndarray | None = None
    goal: np.ndarray | None = None
    command: np.ndarray | None = None
    reward: float | None = None

    def __post_init__(self):
        tol = 1e-9
        if self.anchor is not None:
            a = getattr(self.anchor, "values", self.anchor)
            a = np.asarray(a, dtype=float).reshape(-1)
            if not np.all(np.abs(a) <= 1 + tol):
                raise ConfigError("anchor condition must be normalised to [-1, 1]")
            object.__setattr__(self, "anchor", a)
        if self.goal is not None:
            g = np.asarray(self.goal, dtype=float).reshape(-1)
            if g.shape != (2,) or not np.all(np.abs(g) <= 1 + tol):
                raise ConfigError("goal condition must be a normalised 2-vector")
            object.__setattr__(self, "goal", g)
        if self.command is not None:
            c = np.asarray(self.command, dtype=float).reshape(-1)
            if not (np.all((c == 0) | (c == 1)) and c.sum() == 1):
                raise ConfigError("command condition must be one-hot")
            object.__setattr__(self, "command", c)
        if self.reward is not None:
            r = float(self.reward)
            if not 0.0 <= r <= 1.0:
                raise ConfigError("reward condition must lie in [0, 1]")
            object.__setattr__(self, "reward", r)

    def present(self):
        return tuple(getattr(self, s) is not None for s in SIGNALS)

    def replace(self, **kw):
        d = {s: getattr(self, s) for s in SIGNALS}
        d.update(kw)
        return ConditionSet(**d)


NULL_CONDITION = ConditionSet()


class CondBatch(NamedTuple):
    raw: np.ndarray  # (B, cond_dim), zeros where absent
    present: np.ndarray  # (B, 4) bool


def stack_conditions(conds, arch: Architecture) -> CondBatch:
    if isinstance(conds, CondBatch):
        return conds
    sl = arch.signal_slices()
    raw = np.zeros((len(conds), arch.cond_dim))
    present = np.zeros((len(conds), len(SIGNALS)), dtype=bool)
    for i, c in enumerate(conds):
        for j, name in enumerate(SIGNALS):
            val = getattr(c, name)
            if val is None:
                continue
            val = np.atleast_1d(np.asarray(val, dtype=float))
            if val.size != sl[name].stop - sl[name].start:
                raise ConfigError(f"condition {name} of sample {i} has size {val.size}")
            raw[i, sl[name]] = val
            present[i, j] = True
    return CondBatch(raw, present)


def unconditional_batch(n, arch: Architecture) -> CondBatch:
    return CondBatch(np.zeros((n, arch.cond_dim)), np.zeros((n, len(SIGNALS)), dtype=bool))


# ---------------------------------------------------------------------------
# forward / backward


def embed_time(t, dim, max_freq=100.0) -> np.ndarray:
    """Interleaved ``sin(w_k t), cos(w_k t)`` with w_k geometric in [1, max_freq]."""
    half = dim // 2
    freqs = max_freq ** (np.arange(half) / max(half - 1, 1))
    ang = np.asarray(t, dtype=float)[..., None] * freqs
    out = np.empty(ang.shape[:-1] + (2 * half,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _signal_mask(present, arch):
    sl = arch.signal_slices()
    mask = np.zeros((present.shape[0], arch.cond_dim), dtype=bool)
    for j, name in enumerate(SIGNALS):
        mask[:, sl[name]] = present[:, j : j + 1]
    return mask


def _null_vector(params):
    return np.concatenate([params.tensors[f"null_{s}"] for s in SIGNALS])


class _Cache(NamedTuple):
    x: np.ndarray
    temb: np.ndarray
    c: np.ndarray
    mask: np.ndarray
    hs: list
    out: np.ndarray


def _forward(params: VectorFieldParams, x, t, cb: CondBatch) -> _Cache:
    p, arch = params.tensors, params.arch
    temb = embed_time(t, arch.time_dim, arch.max_freq)
    mask = _signal_mask(cb.present, arch)
    c = np.where(mask, cb.raw, _null_vector(params))
    h = np.tanh(x @ p["w_x"] + temb @ p["w_t"] + c @ p["w_c"] + p["b_in"])
    hs = [h]
    for k in range(arch.depth - 1):
        h = np.tanh(h @ p[f"w_h{k}"] + p[f"b_h{k}"])
        hs.append(h)
    out = h @ p["w_out"] + p["b_out"]
    return _Cache(x, temb, c, mask, hs, out)


def _check_inputs(x, t):
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(t)):
        bad = ~np.isfinite(x).all(axis=1) | ~np.isfinite(t)
        k = int(np.argmax(bad))
        raise NumericalError(f"non-finite network input in sample {k}", k)


def forward(params: VectorFieldParams, x_t, t, cond) -> np.ndarray:
    """Velocity for one state (``x_t`` of shape (2T,)) or a batch (B, 2T).

    ``cond`` is a :class:`ConditionSet`, a list of them, or a :class:`CondBatch`.
    """
    x = np.asarray(x_t, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    if isinstance(cond, ConditionSet):
        cond = [cond] * x.shape[0]
    _check_inputs(x, t)
    out = _forward(params, x, t, stack_conditions(cond, params.arch)).out
    return out[0] if single else out


def _backward_from(params: VectorFieldParams, cache: _Cache, g_out) -> dict:
    p, arch = params.tensors, params.arch
    g = {}
    hs = cache.hs
    g["w_out"] = hs[-1].T @ g_out
    g["b_out"] = g_out.sum(axis=0)
    gh = g_out @ p["w_out"].T
    for k in reversed(range(arch.depth - 1)):
        ga = gh * (1.0 - hs[k + 1] ** 2)
        g[f"w_h{k}"] = hs[k].T @ ga
        g[f"b_h{k}"] = ga.sum(axis=0)
        gh = ga @ p[f"w_h{k}"].T
    ga = gh * (1.0 - hs[0] ** 2)
    g["w_x"] = cache.x.T @ ga
    g["w_t"] = cache.temb.T @ ga
    g["w_c"] = cache.c.T @ ga
    g["b_in"] = ga.sum(axis=0)
    gnull = np.where(cache.mask, 0.0, ga @ p["w_c"].T).sum(axis=0)
    for name, s in arch.signal_slices().items():
        g[f"null_{name}"] = gnull[s].copy()
    return {k: g[k] for k in p}


def backward(params: VectorFieldParams, x_t, t, cond, target, extra=None):
    """Mean-squared-error loss over the batch and its exact gradient.

    ``extra`` optionally adds a term computed on the network output: a callable
    ``extra(out) -> (loss, d loss / d out)``.
    Returns ``(loss, grads)`` with ``grads`` keyed like ``params.tensors``.
    """
    x = np.atleast_2d(np.asarray(x_t, dtype=float))
    if x.shape[0] == 0:
        raise ConfigError("backward needs a non-empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if isinstance(cond, ConditionSet):
        cond = [cond] * x.shape[0]
    _check_inputs(x, t)
    cache = _forward(params, x, t, stack_conditions(cond, params.arch))
    diff = cache.out - target
    per_sample = np.mean(diff**2, axis=1)
    if not np.all(np.isfinite(per_sample)):
        k = int(np.argmax(~np.isfinite(per_sample)))
        raise NumericalError(f"non-finite loss for sample {k}", k)
    loss = float(np.mean(per_sample))
    g_out = diff * (2.0 / diff.size)
    if extra is not None:
        e_loss, e_grad = extra(cache.out)
        loss = loss + float(e_loss)
        g_out = g_out + e_grad
        if not np.isfinite(loss):
            raise NumericalError("non-finite auxiliary loss", None)
    return loss, _backward_from(params, cache, g_out)


# ---------------------------------------------------------------------------
# optimiser


@dataclass(eq=False)
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: VectorFieldParams, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        zeros = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        return cls(zeros, {k: z.copy() for k, z in zeros.items()}, 0, lr, beta1, beta2, eps)


def adam_step(params: VectorFieldParams, grads: dict, state: OptimizerState):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    step = state.step + 1
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.tensors.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ConfigError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        new_p[k] = w - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = OptimizerState(new_m, new_v, step, state.lr, state.beta1, state.beta2, state.eps)
    return VectorFieldParams(params.arch, new_p), new_state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: VectorFieldParams, opt: OptimizerState | None = None, config_hash="", extra=None):
    meta = {
        "format": "cfmplan-checkpoint",
        "version": CHECKPOINT_VERSION,
        "arch": asdict(params.arch),
        "config_hash": config_hash,
        "tensor_names": list(params.tensors),
    }
    arrays = {f"p_{k}": v for k, v in params.tensors.items()}
    if opt is not None:
        meta["optimizer"] = {
            "step": opt.step, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps,
        }
        arrays.update({f"m_{k}": v for k, v in opt.m.items()})
        arrays.update({f"v_{k}": v for k, v in opt.v.items()})
    meta.update(extra or {})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path):
    """Returns ``(params, optimizer_state_or_None, meta)``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != "cfmplan-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint format")
        names = meta["tensor_names"]
        tensors = {k: z[f"p_{k}"] for k in names}
        opt = None
        if "optimizer" in meta:
            o = meta["optimizer"]
            opt = OptimizerState(
                {k: z[f"m_{k}"] for k in names}, {k: z[f"v_{k}"] for k in names},
                o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"],
            )
    params = VectorFieldParams(Architecture(**meta["arch"]), tensors)
    for k, v in params.tensors.items():
        if not np.all(np.isfinite(v)):
            raise NumericalError(f"{path}: tensor {k} is not finite")
    return params, opt, meta
