"""Run configuration: dataclasses with the default hyperparameters, and a
strict INI-style parser (sections [scenario] [agent] [mixer] [train];
unknown keys and malformed values are rejected by name)."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AGENT_KINDS
from .env import PRESETS, ScenarioConfig, scenario_preset
from .mixers import MIXER_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class AgentConfig:
    kind: str = "pit"
    model_dim: int = 16
    num_heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.0
    hidden_dim: int = 64


@dataclass
class MixerConfig:
    kind: str = "la-hybrid"
    model_dim: int = 32
    num_heads: int = 4
    ffn_dim: int = 128
    dropout: float = 0.0
    fc_mul_dim: int = 32
    fc_add_dim: int = 32
    levels: int = 3
    gumbel_temperature: float = 1.0
    embed_dim: int = 32  # qmix mixing width
    stacked_depth: int = 2


@dataclass
class TrainConfig:
    seed: int = 0
    total_env_steps: int = 100_000
    gamma: float = 0.99
    lr: float = 5e-4
    transfer_lr: float = 3e-4
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_anneal_steps: int = 50_000
    transfer_epsilon_start: float = 0.5
    target_update_interval: int = 200
    buffer_capacity: int = 5000
    batch_size: int = 32
    train_interval_episodes: int = 1
    grad_clip: float = 10.0
    eval_interval: int = 2000
    eval_episodes: int = 32
    checkpoint_interval: int = 20_000
    transfer_eval_fraction: float = 0.05
    stop_at_win_rate: float = -1.0  # < 0 disables early stop


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    agent: AgentConfig = field(default_factory=AgentConfig)
    mixer: MixerConfig = field(default_factory=MixerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _convert(section: str, key: str, raw: str, target_type):
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: expected {target_type.__name__}, got {raw!r}"
        ) from None


# configparser hands back strings; resolve each field's concrete type once
_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}
_FIELD_TYPES = {
    cls: {
        f.name: (_TYPE_NAMES[f.type] if isinstance(f.type, str) else f.type)
        for f in dataclasses.fields(cls)
    }
    for cls in (AgentConfig, MixerConfig, TrainConfig)
}


def _fill_dataclass(instance, section: str, items: dict[str, str]):
    types = _FIELD_TYPES[type(instance)]
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        setattr(instance, key, _convert(section, key, raw, types[key]))
    return instance


def _parse_scenario(items: dict[str, str]) -> ScenarioConfig:
    items = dict(items)
    preset = items.pop("preset", None)
    if preset is not None:
        if items:
            raise ConfigError(f"[scenario] preset {preset!r} does not take extra keys: {sorted(items)}")
        if preset not in PRESETS:
            raise ConfigError(f"[scenario] unknown preset {preset!r}; known: {sorted(PRESETS)}")
        return scenario_preset(preset)
    known = {
        "name": str,
        "ally_types": str,
        "enemy_types": str,
        "map_width": float,
        "map_height": float,
        "max_steps": int,
        "sight_range": float,
        "move_step": float,
    }
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"[scenario] unknown key {key!r}")
        value = _convert("scenario", key, raw, known[key])
        if key in ("ally_types", "enemy_types"):
            value = tuple(t.strip() for t in value.split(",") if t.strip())
        kwargs[key] = value
    for required in ("name", "ally_types", "enemy_types"):
        if required not in kwargs:
            raise ConfigError(f"[scenario] missing key {required!r} (or use preset=<name>)")
    try:
        return ScenarioConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"[scenario] {exc}") from None


def parse_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known_sections = {"scenario", "agent", "mixer", "train"}
    unknown = set(parser.sections()) - known_sections
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    if "scenario" not in parser:
        raise ConfigError("missing [scenario] section")
    cfg = RunConfig(scenario=_parse_scenario(dict(parser["scenario"])))
    if "agent" in parser:
        _fill_dataclass(cfg.agent, "agent", dict(parser["agent"]))
    if "mixer" in parser:
        _fill_dataclass(cfg.mixer, "mixer", dict(parser["mixer"]))
    if "train" in parser:
        _fill_dataclass(cfg.train, "train", dict(parser["train"]))
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.agent.kind not in AGENT_KINDS:
        raise ConfigError(f"[agent] kind must be one of {AGENT_KINDS}, got {cfg.agent.kind!r}")
    if cfg.mixer.kind not in MIXER_KINDS:
        raise ConfigError(f"[mixer] kind must be one of {MIXER_KINDS}, got {cfg.mixer.kind!r}")
    if not 0.0 < cfg.train.gamma <= 1.0:
        raise ConfigError(f"[train] gamma must be in (0, 1], got {cfg.train.gamma}")
    for key in ("lr", "transfer_lr"):
        if getattr(cfg.train, key) <= 0:
            raise ConfigError(f"[train] {key} must be positive")
    if cfg.mixer.levels < 1:
        raise ConfigError(f"[mixer] levels must be >= 1, got {cfg.mixer.levels}")
    if cfg.mixer.gumbel_temperature <= 0:
        raise ConfigError("[mixer] gumbel_temperature must be positive")
    for section, obj in (("agent", cfg.agent), ("mixer", cfg.mixer)):
        if obj.dropout != 0.0:
            raise ConfigError(
                f"[{section}] dropout is fixed at 0.0 in this build (got {obj.dropout})"
            )


def config_hash(cfg: RunConfig) -> str:
    """Stable short digest of the full configuration."""
    parts = []
    for name, obj in (
        ("scenario", cfg.scenario),
        ("agent", cfg.agent),
        ("mixer", cfg.mixer),
        ("train", cfg.train),
    ):
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            parts.append(f"{name}.{f.name}={getattr(obj, f.name)!r}")
    return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


def default_run_config(preset: str, mixer_kind: str = "la-hybrid", agent_kind: str = "pit") -> RunConfig:
    cfg = RunConfig(scenario=scenario_preset(preset))
    cfg.mixer.kind = mixer_kind
    cfg.agent.kind = agent_kind
    return cfg
