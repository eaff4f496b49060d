"""Experiment configuration: nested dataclasses with JSON round-trip and
dot-path overrides (``jepa.epochs=10``)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .actor import ActorConfig
from .channel import RadioParams
from .jepa import JepaConfig
from .plant import AugmentConfig, PlantParams, RenderSpec
from .scheduler import POLICIES, SchedulerConfig
from .sim import EpisodeConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_traj: int = 20            # JEPA training set (K_s)
    heldout_traj: int = 20
    actor_traj: int = 200       # actor training set (K_a), encoded by the frozen encoder
    length: int = 100
    init_angle: float = 0.1
    init_pos: float = 0.2
    randomize_color: bool = True

    def __post_init__(self):
        if min(self.n_traj, self.heldout_traj, self.actor_traj) < 0 or self.length < 1:
            raise ValueError("trajectory counts must be >= 0 and length >= 1")


@dataclass
class SweepConfig:
    device_counts: tuple = (1, 2, 4, 6, 8, 10, 12, 16, 20)
    policies: tuple = POLICIES
    stacks: tuple = ("ts-jepa", "supervised")
    n_seeds: int = 20
    loss_probs: tuple = (None,)
    band: tuple = (0.74, 1.0)

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if any(int(i) < 1 for i in self.device_counts):
            raise ValueError("device_counts must be >= 1")


@dataclass
class ExperimentConfig:
    plant: PlantParams = field(default_factory=PlantParams)
    render: RenderSpec = field(default_factory=RenderSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    jepa: JepaConfig = field(default_factory=JepaConfig)
    actor: ActorConfig = field(default_factory=ActorConfig)
    supervised: ActorConfig = field(default_factory=lambda: ActorConfig(hidden=(64,), epochs=60, patience=15))
    supervised_kappa: int = 2
    autoencoder_epochs: int = 20
    radio: RadioParams = field(default_factory=RadioParams)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


def _to_jsonable(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _to_jsonable(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, (list, tuple)):
        return [_to_jsonable(x) for x in v]
    return v


def to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _build(cls_default, data: dict, path: str):
    """Rebuild a dataclass from `data`, using `cls_default` for missing keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    names = {f.name for f in dataclasses.fields(cls_default)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key {'.'.join(filter(None, [path, unknown[0]]))!r}")
    kwargs = {}
    for f in dataclasses.fields(cls_default):
        cur = getattr(cls_default, f.name)
        sub = f"{path}.{f.name}" if path else f.name
        if f.name not in data:
            kwargs[f.name] = cur
        elif dataclasses.is_dataclass(cur):
            kwargs[f.name] = _build(cur, data[f.name], sub)
        elif isinstance(cur, tuple):
            kwargs[f.name] = _tuplify(list(data[f.name])) if isinstance(data[f.name], (list, tuple)) \
                else data[f.name]
        else:
            kwargs[f.name] = data[f.name]
    try:
        return type(cls_default)(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from e


def from_dict(data: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return _build(base or ExperimentConfig(), data, "")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict (values parsed as JSON)."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key.path=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = parse_value(val)
    return data


def load_config(path=None, overrides=None) -> ExperimentConfig:
    data = to_dict(ExperimentConfig())
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {str(p)!r} not found")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {str(p)!r} is not valid JSON: {e}") from e
        from_dict(user)  # validate keys against the schema before merging
        data = _merge(data, user)
    return from_dict(apply_overrides(data, overrides))


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg) -> str:
    return hashlib.sha256(canonical_json(to_dict(cfg)).encode()).hexdigest()


def desk_config() -> ExperimentConfig:
    return ExperimentConfig()
