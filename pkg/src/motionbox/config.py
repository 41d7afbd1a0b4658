"""One YAML file configures data generation, supervision, the model and training.

Top-level sections are ``scene``, ``supervision``, ``model`` (with a nested
``fusion`` mapping) and ``train``. Every key is optional. Unknown keys are
rejected by name so that a typo never silently falls back to a default.
The ``MSW_SEED`` environment variable, when set, replaces both seeds.
"""

from __future__ import annotations

import dataclasses
import os

import yaml

from .model import FusionSpec, ModelConfig
from .pairwise import SupervisionParams
from .synthdata import SceneConfig
from .training import RunConfig, TrainConfig

SEED_ENV = "MSW_SEED"
SECTIONS = ("scene", "supervision", "model", "train")


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Config:
    scene: SceneConfig = dataclasses.field(default_factory=SceneConfig)
    run: RunConfig = dataclasses.field(default_factory=RunConfig)

    def to_dict(self):
        d = {"scene": dataclasses.asdict(self.scene)}
        d.update(self.run.to_dict())
        return _plain(d)

    def replace_train(self, **changes):
        train = dataclasses.replace(self.run.train, **changes)
        return dataclasses.replace(self, run=dataclasses.replace(self.run, train=train))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _check_keys(section, given, cls):
    known = {f.name for f in dataclasses.fields(cls)}
    for key in given:
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section '{section}'")


def _build(section, cls, values, tuple_keys=()):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    _check_keys(section, values, cls)
    values = dict(values)
    for k in tuple_keys:
        if k in values:
            values[k] = tuple(values[k])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section '{section}': {exc}") from exc


def config_from_dict(d, env=None):
    env = os.environ if env is None else env
    d = dict(d or {})
    for key in d:
        if key not in SECTIONS:
            raise ConfigError(f"unknown key '{key}' at top level")
    model = dict(d.get("model") or {})
    if "fusion" in model:
        model["fusion"] = _build("model.fusion", FusionSpec, model["fusion"])
    scene = _build("scene", SceneConfig, d.get("scene"), ("shapes", "camouflage_delta_e", "camera_pan"))
    run = RunConfig(
        model=_build("model", ModelConfig, model, ("widths",)),
        supervision=_build("supervision", SupervisionParams, d.get("supervision")),
        train=_build("train", TrainConfig, d.get("train")),
    )
    cfg = Config(scene, run)
    seed = env.get(SEED_ENV)
    if seed not in (None, ""):
        try:
            seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from exc
        cfg = Config(dataclasses.replace(scene, seed=seed), run).replace_train(seed=seed)
    return cfg


def load_config(path=None, env=None):
    if path is None:
        return config_from_dict({}, env)
    with open(path) as fh:
        try:
            d = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if d is not None and not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(d, env)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
