"""Run configuration: one YAML document with encoder, views, objective, stage, optim, data and eval sections.

Every field has a default. Unknown keys are rejected with their full path so
typos fail fast. The top-level ``seed`` drives the stage seed and the probe
seed; the ``MMV_SEED`` environment variable overrides it.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import asdict, dataclass, field

import yaml

from .encoder import EncoderConfig
from .objective import ObjectiveConfig
from .training import STAGE1, STAGE_ALIASES, OptimConfig, StageConfig
from .views import ViewConfig

log = logging.getLogger(__name__)

SEED_ENV = "MMV_SEED"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class StageSection:
    """Stage fields minus the seed, which lives at the top level."""

    stage: str = "stage3_native_joint"
    init: str = "random"
    steps: int = 150
    batch_2d: int = 12
    batch_3d: int = 4
    init_from: str | None = None


@dataclass(frozen=True)
class DataConfig:
    # root of a gen-data directory; None generates samples in memory
    root: str | None = None
    n_2d: int = 600
    n_3d: int = 200
    seed: int = 0
    domain: str = "default"


@dataclass(frozen=True)
class EvalConfig:
    probe_modality: str = "all"
    l2: float = 1e-4
    max_iter: int = 1000
    n_boot: int = 1000
    # in-memory probe sets when no data root is given
    n_train_2d: int = 300
    n_train_3d: int = 200
    n_test_2d: int = 200
    n_test_3d: int = 200
    data_seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    views: ViewConfig = field(default_factory=ViewConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    stage: StageSection = field(default_factory=StageSection)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.encoder.patch != self.views.patch:
            raise ConfigError(f"encoder.patch={self.encoder.patch} != views.patch={self.views.patch}")

    def stage_config(self, stage: str | None = None, init_from: str | None = None) -> StageConfig:
        s = self.stage
        name = stage or s.stage
        init_from = init_from or s.init_from
        init = "from_checkpoint" if init_from else s.init
        # stage 1 is 2D-only whatever the configured 3D batch
        batch_3d = 0 if STAGE_ALIASES.get(name, name) == STAGE1 else s.batch_3d
        try:
            return StageConfig(name, init, s.steps, s.batch_2d, batch_3d, self.seed, init_from)
        except ValueError as e:
            raise ConfigError(f"stage: {e}") from None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(_plain(self.to_dict()), sort_keys=False)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in fields:
            raise ConfigError(f"unknown config key '{where}'")
        default = fields[key].default
        if default is dataclasses.MISSING:
            default = fields[key].default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, where)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)) or len(value) != len(default):
                raise ConfigError(f"{where}: expected a list of {len(default)} numbers")
            kwargs[key] = tuple(float(v) for v in value)
        elif isinstance(default, bool) or value is None:
            kwargs[key] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {value!r}")
            kwargs[key] = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{where}: expected an integer, got {value!r}")
            kwargs[key] = value
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


def config_from_dict(raw: dict | None, env: dict | None = None) -> RunConfig:
    cfg = _build(RunConfig, raw or {}, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        log.warning("%s=%d overrides config seed %d", SEED_ENV, seed, cfg.seed)
        cfg = dataclasses.replace(cfg, seed=seed)
    return cfg


def load_config(path=None, env: dict | None = None) -> RunConfig:
    """Parse a YAML run config (or all defaults when ``path`` is None)."""
    if path is None:
        return config_from_dict({}, env)
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    return config_from_dict(raw, env)
