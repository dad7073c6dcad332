"""Flat ``key = value`` run configuration.

Keys are namespaced: ``model.*`` (ModelConfig, with ``model.backbone.*``),
``train.*`` (TrainConfig) and ``data.*`` (DatasetSpec, including
``data.count.<combo>``). Precedence, lowest first: built-in defaults, the
config file, ``DEFECTNET_*`` environment variables, command-line overrides.

Environment names map to keys by lowercasing and turning ``__`` into ``.``,
e.g. ``DEFECTNET_TRAIN__LR=0.001`` sets ``train.lr``.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path
from typing import Mapping, Optional

from .backbone import BackboneConfig
from .data import DatasetSpec
from .detector import ModelConfig

ENV_PREFIX = "DEFECTNET_"


class ConfigError(ValueError):
    pass


def _train_config_cls():
    from .trainer import TrainConfig

    return TrainConfig


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_format(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _fields(prefix: str, obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out.update(_fields(f"{prefix}{f.name}.", v))
        else:
            out[prefix + f.name] = v
    return out


def default_values() -> dict:
    """Every recognised key with its default value."""
    vals = _fields("model.", ModelConfig())
    vals.update(_fields("train.", _train_config_cls()()))
    spec = DatasetSpec()
    vals.update({"data.tile": spec.tile, "data.seed": spec.seed, "data.augment_fraction": spec.augment_fraction})
    vals["data.preset"] = "default"
    return vals


def _is_known(key: str, defaults: dict) -> bool:
    return key in defaults or key.startswith("data.count.")


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int) or key.startswith("data.count."):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_lines(text: str, source: str = "<config>") -> dict:
    """Raw ``key -> string`` pairs; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {n}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}: line {n}: empty key")
        out[key] = value
    return out


@dataclasses.dataclass
class RunConfig:
    values: dict

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping] = None, env: Optional[Mapping] = None) -> "RunConfig":
        defaults = default_values()
        layers = []
        if path is not None:
            layers.append((str(path), parse_lines(Path(path).read_text(), str(path))))
        env = os.environ if env is None else env
        layers.append(("environment", {k[len(ENV_PREFIX):].lower().replace("__", "."): v
                                       for k, v in env.items() if k.startswith(ENV_PREFIX)}))
        layers.append(("command line", dict(overrides or {})))
        values = dict(defaults)
        for source, raw in layers:
            unknown = sorted(k for k in raw if not _is_known(k, defaults))
            if unknown:
                raise ConfigError(f"{source}: unknown config keys: {', '.join(unknown)}")
            for k, v in raw.items():
                values[k] = _convert(k, v, defaults.get(k)) if isinstance(v, str) else v
        cfg = cls(values)
        cfg.model_config()  # validate eagerly
        cfg.train_config()
        return cfg

    def _section(self, prefix: str) -> dict:
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self) -> ModelConfig:
        sec = self._section("model.")
        bb = {k[len("backbone."):]: v for k, v in sec.items() if k.startswith("backbone.")}
        rest = {k: v for k, v in sec.items() if not k.startswith("backbone.")}
        try:
            return ModelConfig(backbone=BackboneConfig(**bb), **rest)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def train_config(self):
        try:
            return _train_config_cls()(**self._section("train."))
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def dataset_spec(self) -> DatasetSpec:
        sec = self._section("data.")
        base = DatasetSpec.preset(sec.pop("preset"))
        counts = {k[len("count."):]: v for k, v in sec.items() if k.startswith("count.")}
        return DatasetSpec(counts=counts or base.counts, tile=sec["tile"], seed=sec["seed"],
                           augment_fraction=sec["augment_fraction"])

    def lines(self) -> list:
        return [f"{k} = {_format(v)}" for k, v in sorted(self.values.items())]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def flatten_configs(model_config: ModelConfig, train_config) -> dict:
    """String form of every model/train key, as echoed into checkpoints."""
    vals = _fields("model.", model_config)
    vals.update(_fields("train.", train_config))
    return {k: _format(v) for k, v in sorted(vals.items())}


def config_mismatch(meta: Mapping, model_config: ModelConfig) -> list:
    """Model keys whose checkpoint echo (``config.<key>`` entries) differs from ``model_config``."""
    want = {k: v for k, v in flatten_configs(model_config, _train_config_cls()()).items() if k.startswith("model.")}
    diffs = []
    for k, v in want.items():
        have = meta.get(f"config.{k}")
        if have is not None and have != v:
            diffs.append(k)
    return diffs


def model_config_from_meta(meta: Mapping) -> ModelConfig:
    """Rebuild the ModelConfig echoed into a checkpoint."""
    raw = {k[len("config."):]: v for k, v in meta.items() if k.startswith("config.model.")}
    return RunConfig.load(overrides=raw, env={}).model_config()
