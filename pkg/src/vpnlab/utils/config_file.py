"""
Experiment config files.

A config is a line-oriented ``key = value`` file with ``#`` comments. Keys
live in four namespaces (``env.``, ``model.``, ``train.``, ``eval.``) and
every key is declared in ``SCHEMA`` with its parser and default. The whole
file is checked before anything is built.
"""

from collections.abc import Callable, Mapping
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

from dotenv import dotenv_values

from vpnlab.__logger__ import VpnlabLogger, vpnlab_logger
from vpnlab.baselines import MODEL_KINDS
from vpnlab.errors import ConfigurationError, InputError
from vpnlab.gridworld import ENV_VARIANTS, GridConfig, variant_config
from vpnlab.oracles import DEFAULT_NODE_BUDGET
from vpnlab.trainer import TrainConfig
from vpnlab.vpn_model import ModelConfig

logger: VpnlabLogger = vpnlab_logger.init(__name__)

Parser = Callable[[str], Any]

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in _TRUE:
        return True
    if lowered in _FALSE:
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def parse_int_tuple(text: str) -> tuple[int, ...]:
    parts = [part.strip() for part in text.split(",") if part.strip()]
    if not parts:
        raise ValueError("expected a comma separated list of integers")
    return tuple(int(part) for part in parts)


def _choice(*allowed: str) -> Parser:
    def parse(text: str) -> str:
        value = text.strip()
        if value not in allowed:
            raise ValueError(f"expected one of {', '.join(allowed)}, got {value!r}")
        return value

    return parse


@dataclass(frozen=True)
class ConfigKey:
    parse: Parser
    default: Any = None
    required: bool = False


_GRID_DEFAULTS = GridConfig()
_MODEL_DEFAULTS = ModelConfig()
_TRAIN_DEFAULTS = TrainConfig(total_steps=0)


def _env_keys() -> dict[str, ConfigKey]:
    parsers: dict[type, Parser] = {int: int, float: float, bool: parse_bool}
    keys = {"env.variant": ConfigKey(_choice(*ENV_VARIANTS), None)}
    for item in fields(GridConfig):
        default = getattr(_GRID_DEFAULTS, item.name)
        keys[f"env.{item.name}"] = ConfigKey(parsers[type(default)], default)
    return keys


SCHEMA: dict[str, ConfigKey] = {
    **_env_keys(),
    "model.kind": ConfigKey(_choice(*MODEL_KINDS), required=True),
    "model.encoder_channels": ConfigKey(parse_int_tuple, _MODEL_DEFAULTS.encoder_channels),
    "model.state_channels": ConfigKey(int, _MODEL_DEFAULTS.state_channels),
    "model.outcome_hidden": ConfigKey(int, _MODEL_DEFAULTS.outcome_hidden),
    "model.value_hidden": ConfigKey(int, _MODEL_DEFAULTS.value_hidden),
    "model.dqn_hidden": ConfigKey(int, _MODEL_DEFAULTS.dqn_hidden),
    "model.decoder_channels": ConfigKey(parse_int_tuple, _MODEL_DEFAULTS.decoder_channels),
    "model.fixed_discount": ConfigKey(parse_bool, _MODEL_DEFAULTS.fixed_discount),
    "model.check_param_count": ConfigKey(parse_bool, True),
    "train.total_steps": ConfigKey(int, required=True),
    "train.depth": ConfigKey(int, None),
    "train.n": ConfigKey(int, _TRAIN_DEFAULTS.n),
    "train.workers": ConfigKey(int, _TRAIN_DEFAULTS.workers),
    "train.k": ConfigKey(int, _TRAIN_DEFAULTS.k),
    "train.d_train": ConfigKey(int, _TRAIN_DEFAULTS.d_train),
    "train.d_test": ConfigKey(int, _TRAIN_DEFAULTS.d_test),
    "train.widths": ConfigKey(parse_int_tuple, _TRAIN_DEFAULTS.widths),
    "train.target_sync": ConfigKey(int, _TRAIN_DEFAULTS.target_sync),
    "train.epsilon_start": ConfigKey(float, _TRAIN_DEFAULTS.epsilon_start),
    "train.epsilon_end": ConfigKey(float, _TRAIN_DEFAULTS.epsilon_end),
    "train.epsilon_steps": ConfigKey(int, _TRAIN_DEFAULTS.epsilon_steps),
    "train.replay_size": ConfigKey(int, _TRAIN_DEFAULTS.replay_size),
    "train.replay_ratio": ConfigKey(int, _TRAIN_DEFAULTS.replay_ratio),
    "train.lr": ConfigKey(float, _TRAIN_DEFAULTS.lr),
    "train.lr_decay": ConfigKey(float, _TRAIN_DEFAULTS.lr_decay),
    "train.decay_interval": ConfigKey(int, _TRAIN_DEFAULTS.decay_interval),
    "train.beta1": ConfigKey(float, _TRAIN_DEFAULTS.beta1),
    "train.beta2": ConfigKey(float, _TRAIN_DEFAULTS.beta2),
    "train.adam_eps": ConfigKey(float, _TRAIN_DEFAULTS.adam_eps),
    "train.eval_interval": ConfigKey(int, _TRAIN_DEFAULTS.eval_interval),
    "train.eval_episodes": ConfigKey(int, _TRAIN_DEFAULTS.eval_episodes),
    "train.final_eval_episodes": ConfigKey(int, _TRAIN_DEFAULTS.final_eval_episodes),
    "train.log_interval": ConfigKey(int, _TRAIN_DEFAULTS.log_interval),
    "train.checkpoint_interval": ConfigKey(int, _TRAIN_DEFAULTS.checkpoint_interval),
    "train.seed": ConfigKey(int, _TRAIN_DEFAULTS.seed),
    "eval.episodes": ConfigKey(int, 1000),
    "eval.d_min": ConfigKey(int, 1),
    "eval.d_max": ConfigKey(int, 10),
    "eval.node_budget": ConfigKey(int, DEFAULT_NODE_BUDGET),
}

DEPTH_KEYS: tuple[str, ...] = ("train.k", "train.d_train", "train.d_test")


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 1000
    d_min: int = 1
    d_max: int = 10
    node_budget: int = DEFAULT_NODE_BUDGET

    def validate(self) -> None:
        if self.episodes < 0:
            raise ConfigurationError("eval.episodes must be >= 0", "eval.episodes")
        if not 1 <= self.d_min <= self.d_max:
            raise ConfigurationError("need 1 <= eval.d_min <= eval.d_max", "eval.d_min")
        if self.node_budget < 1:
            raise ConfigurationError("eval.node_budget must be >= 1", "eval.node_budget")


@dataclass(frozen=True)
class LoadedConfig:
    """Every key of a config file, parsed, with defaults filled in."""

    values: Mapping[str, Any]
    explicit: frozenset[str]
    source: Path | None = None

    def get(self, key: str) -> Any:
        return self.values[key]

    def has(self, key: str) -> bool:
        return key in self.explicit


def read_config_text(path: Path) -> dict[str, str | None]:
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    return dict(dotenv_values(path, interpolate=False))


def parse_config(raw: Mapping[str, str | None], source: Path | None = None) -> LoadedConfig:
    values: dict[str, Any] = {key: experiment.default for key, experiment in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            logger.error(f"unknown config key `{key}`")
            raise ConfigurationError(f"unknown config key `{key}`", key)
        if text is None or not text.strip():
            raise ConfigurationError(f"config key `{key}` has no value", key)
        try:
            values[key] = SCHEMA[key].parse(text)
        except ValueError as ex:
            logger.error(f"bad value for `{key}`: {ex}")
            raise ConfigurationError(f"bad value for `{key}`: {ex}", key) from ex
    return LoadedConfig(values, frozenset(raw), source)


def load_config(path: Path | None) -> LoadedConfig:
    if path is None:
        return parse_config({})
    return parse_config(read_config_text(path), path)


def require_keys(config: LoadedConfig, *namespaces: str) -> None:
    for key, experiment in SCHEMA.items():
        if experiment.required and key.split(".", 1)[0] in namespaces and not config.has(key):
            logger.error(f"missing required config key `{key}`")
            raise ConfigurationError(f"missing required config key `{key}`", key)


def build_grid_config(config: LoadedConfig) -> GridConfig:
    grid = GridConfig(
        **{item.name: config.get(f"env.{item.name}") for item in fields(GridConfig)}
    )
    variant = config.get("env.variant")
    if variant is not None:
        preset = variant_config(grid, variant, grid.stochastic)
        overrides = {name: getattr(grid, name) for name in ENV_VARIANTS[variant] if config.has(f"env.{name}")}
        grid = replace(preset, **overrides)
    try:
        grid.validate()
    except InputError as ex:
        raise ConfigurationError(str(ex), "env") from ex
    return grid


def build_model_config(config: LoadedConfig, grid: GridConfig) -> ModelConfig:
    model = ModelConfig(
        kind=config.get("model.kind") or "vpn",
        height=grid.height,
        width=grid.width,
        encoder_channels=config.get("model.encoder_channels"),
        state_channels=config.get("model.state_channels"),
        outcome_hidden=config.get("model.outcome_hidden"),
        value_hidden=config.get("model.value_hidden"),
        dqn_hidden=config.get("model.dqn_hidden"),
        decoder_channels=config.get("model.decoder_channels"),
        discount=grid.discount,
        time_limit=grid.time_limit,
        fixed_discount=config.get("model.fixed_discount"),
    )
    if len(model.encoder_channels) != 2:  # noqa: PLR2004
        raise ConfigurationError("model.encoder_channels takes two widths", "model.encoder_channels")
    if len(model.decoder_channels) != 3:  # noqa: PLR2004
        raise ConfigurationError("model.decoder_channels takes three widths", "model.decoder_channels")
    if min(model.height, model.width) < 4:  # noqa: PLR2004
        raise ConfigurationError("the encoder needs a grid of at least 4x4", "env.height")
    return model


def build_train_config(config: LoadedConfig) -> TrainConfig:
    values = {item.name: config.get(f"train.{item.name}") for item in fields(TrainConfig)}
    values["total_steps"] = values["total_steps"] or 0
    depth = config.get("train.depth")
    if depth is not None:
        for key in DEPTH_KEYS:
            if not config.has(key):
                values[key.split(".", 1)[1]] = depth
    train = TrainConfig(**values)
    train.validate()
    return train


def build_eval_settings(config: LoadedConfig) -> EvalSettings:
    settings = EvalSettings(
        episodes=config.get("eval.episodes"),
        d_min=config.get("eval.d_min"),
        d_max=config.get("eval.d_max"),
        node_budget=config.get("eval.node_budget"),
    )
    settings.validate()
    return settings


def config_snapshot(config: LoadedConfig) -> dict[str, Any]:
    """Every resolved key, in a form YAML can dump."""
    return {key: list(value) if isinstance(value, tuple) else value for key, value in sorted(config.values.items())}
