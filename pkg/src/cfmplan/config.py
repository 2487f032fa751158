"""Run configuration: one JSON-serialisable record that reproduces a pipeline run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataset, flow, net, sampler
from .constrain import ConstraintConfig
from .errors import ConfigError
from .score import ScoreWeights
from .traj import Box


@dataclass(frozen=True)
class DataSection:
    n_train: int = 2000
    n_eval: int = 200
    horizon: int = 8
    generators: tuple = dataset.DRIVING_GENERATORS
    width: tuple = (5.0, 8.0)
    radius: tuple = (25.0, 60.0)
    length: float = 60.0
    obstacles: tuple = (0, 2)
    resolution: float = 0.5

    def __post_init__(self):
        if self.n_train < 1 or self.n_eval < 0:
            raise ConfigError("dataset needs n_train >= 1 and n_eval >= 0")


@dataclass(frozen=True)
class VocabSection:
    size: int = 256


@dataclass(frozen=True)
class ArchSection:
    hidden: int = 256
    depth: int = 3
    time_dim: int = 32
    max_freq: float = 100.0


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = flow.DEFAULT_BATCH_SIZE
    lr: float = flow.DEFAULT_LR
    epochs: int = 30
    cond_dropout: float = 0.1
    joint_dropout: float = 0.1


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 10
    hinge_weight: float = 1.0
    tau: float = 1.0


@dataclass(frozen=True)
class SamplerSection:
    steps: int = sampler.DEFAULT_STEPS
    candidates: int = sampler.DEFAULT_CANDIDATES
    guidance_scale: float = 2.0
    # EP condition applied to every candidate (None leaves the signal absent)
    reward: float | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    data: DataSection = field(default_factory=DataSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    arch: ArchSection = field(default_factory=ArchSection)
    train: TrainSection = field(default_factory=TrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    weights: ScoreWeights = field(default_factory=ScoreWeights)
    bounds: Box = field(default_factory=Box)

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def config_hash(self) -> str:
        """sha256 of the canonical serialisation; the output directory is left out."""
        d = self.to_dict()
        d.pop("out_dir")
        canon = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_value(self, path: str, value) -> "RunConfig":
        """Copy with the dotted field ``path`` (e.g. ``"sampler.steps"``) set to ``value``."""
        d = self.to_dict()
        *parents, leaf = path.split(".")
        node = d
        for p in parents:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config section {path!r}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config field {path!r}")
        node[leaf] = value
        return RunConfig.from_dict(d)

    # -- derived library configs -------------------------------------------

    def stage_seed(self, stage: str) -> int:
        """Independent 32-bit seed for one pipeline stage."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1)[0])

    def architecture(self) -> net.Architecture:
        return net.Architecture(horizon=self.data.horizon, n_commands=4, **asdict(self.arch))

    def train_config(self, stage="train", epochs=None) -> flow.TrainConfig:
        t = self.train
        return flow.TrainConfig(
            batch_size=t.batch_size,
            lr=t.lr,
            epochs=t.epochs if epochs is None else epochs,
            cond_dropout=t.cond_dropout,
            joint_dropout=t.joint_dropout,
            seed=self.stage_seed(stage),
            bounds=self.bounds,
        )

    def sampler_config(self) -> sampler.SamplerConfig:
        s = self.sampler
        return sampler.SamplerConfig(
            steps=s.steps,
            guidance_scale=s.guidance_scale,
            candidates=s.candidates,
            constraint=self.constraint,
            seed=self.stage_seed("sample"),
        )

    def validate(self) -> "RunConfig":
        """Build every derived library config so that bad values fail early."""
        if self.vocab.size < 1:
            raise ConfigError("vocabulary size must be >= 1")
        if self.finetune.epochs < 0 or not self.finetune.tau > 0:
            raise ConfigError("finetune needs epochs >= 0 and tau > 0")
        if self.sampler.reward is not None and not 0.0 <= self.sampler.reward <= 1.0:
            raise ConfigError("reward condition must lie in [0, 1]")
        self.architecture()
        self.train_config()
        self.sampler_config()
        return self


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"unknown config field(s) {sorted(unknown)} in {where or '<root>'}")
    kw = {}
    for name, value in d.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        elif isinstance(default, tuple) and isinstance(value, list):
            kw[name] = tuple(value)
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad config section {where or '<root>'}: {exc}") from None
