"""Configuration blocks and run-config parsing.

Environment, training and analysis settings are plain dataclasses.  A run
config file (TOML or JSON) has optional ``[env]``, ``[train]`` and
``[analysis]`` tables plus top-level ``seed`` and ``out``; unknown keys are
rejected with their full key path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Unknown key, type mismatch or constraint violation in a config."""


@dataclass
class EnvConfig:
    map_size: int = 96
    max_cows: int = 108
    n_spawn_points: int = 12
    fov_mode: str = "centered"  # or "front_only"
    episode_cap: int = 100_000
    max_level: int = 9
    reward_threshold: int = 5

    # physiology timers, in ticks
    hunger_period: int = 25
    thirst_period: int = 17
    fatigue_period: int = 30
    starvation_period: int = 20
    recover_period: int = 30
    sleep_restore_period: int = 8
    eat_food_gain: int = 4
    drink_gain: int = 1

    # cows
    cow_move_prob: float = 0.05
    cow_respawn_prob: float = 0.002
    cow_spawn_radius: int = 2

    # predators
    predators_enabled: bool = True
    ranged_enabled: bool = True
    agent_damages_predators: bool = True
    predator_spawn_prob: float = 0.01
    predator_spawn_radius: int = 4
    ranged_fraction: float = 0.3
    max_melee: int = 3
    max_ranged: int = 2
    melee_health: int = 5
    ranged_health: int = 3
    melee_damage: int = 2
    melee_damage_sword: int = 1
    melee_cooldown: int = 5
    ranged_damage: int = 1
    ranged_cooldown: int = 4
    ranged_range: int = 5
    pursuit_radius: int = 8
    predator_lifetime: int = 200
    attack_damage: int = 1
    attack_damage_sword: int = 2

    # resources
    iron_prob: float = 0.1

    # light: triangular wave, 1 at t=0, 0 at half period
    light_period: int = 3000

    # world generation
    noise_spacing: float = 12.0
    noise_octaves: int = 2
    water_fraction: float = 0.07
    tree_fraction: float = 0.07
    stone_density: float = 0.03
    patch_fraction: float = 0.15
    min_spawn_separation: float = 13.0

    def validate(self) -> "EnvConfig":
        _check(self.map_size >= 16, "env.map_size", "must be >= 16")
        _check(self.max_cows >= 1, "env.max_cows", "must be >= 1")
        _check(self.n_spawn_points >= 1, "env.n_spawn_points", "must be >= 1")
        _check(self.fov_mode in ("centered", "front_only"), "env.fov_mode",
               "must be 'centered' or 'front_only'")
        _check(self.episode_cap >= 1, "env.episode_cap", "must be >= 1")
        _check(self.max_level >= 1, "env.max_level", "must be >= 1")
        for name in ("hunger_period", "thirst_period", "fatigue_period", "starvation_period",
                     "recover_period", "sleep_restore_period", "light_period", "noise_octaves"):
            _check(getattr(self, name) >= 1, f"env.{name}", "must be >= 1")
        for name in ("cow_move_prob", "cow_respawn_prob", "predator_spawn_prob",
                     "ranged_fraction", "iron_prob", "water_fraction", "tree_fraction",
                     "stone_density", "patch_fraction"):
            v = getattr(self, name)
            _check(0.0 <= v <= 1.0, f"env.{name}", "must be in [0, 1]")
        _check(self.noise_spacing > 0, "env.noise_spacing", "must be > 0")
        return self


def desk_env_config(**overrides) -> EnvConfig:
    """Small 24x24 arena used for desk-scale training runs."""
    base = dict(map_size=24, max_cows=12, n_spawn_points=4, min_spawn_separation=8.0)
    base.update(overrides)
    return EnvConfig(**base).validate()


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    gamma: float = 0.99
    gae_lambda: float = 0.8
    clip_eps: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    aux_coef: float = 0.025
    n_envs: int = 16
    rollout_steps: int = 64
    epochs: int = 4
    minibatches: int = 8
    total_steps: int = 2_000_000
    grad_clip_norm: float = 1.0
    prune_step: int = 20_000  # counted in optimizer updates
    target_sparsity: float = 0.9
    aux_enabled: bool = True
    recurrent: bool = True
    hidden_dim: int = 512
    checkpoint_interval: int = 500_000  # env steps
    curve_window: int = 64  # completed episodes averaged per curve row
    seed: int = 0

    def validate(self) -> "TrainConfig":
        _check(0.0 <= self.gamma <= 1.0, "train.gamma", "must be in [0, 1]")
        _check(0.0 <= self.gae_lambda <= 1.0, "train.gae_lambda", "must be in [0, 1]")
        _check(0.0 <= self.target_sparsity < 1.0, "train.target_sparsity", "must be in [0, 1)")
        for name in ("lr", "clip_eps", "vf_coef", "ent_coef", "aux_coef", "grad_clip_norm"):
            _check(getattr(self, name) >= 0, f"train.{name}", "must be non-negative")
        for name in ("n_envs", "rollout_steps", "epochs", "minibatches", "hidden_dim",
                     "total_steps", "checkpoint_interval", "curve_window"):
            _check(getattr(self, name) >= 1, f"train.{name}", "must be >= 1")
        _check(self.n_envs % self.minibatches == 0, "train.minibatches",
               "n_envs must be divisible by minibatches (minibatches split environments)")
        return self


@dataclass
class AnalysisConfig:
    alpha_grid: list = field(default_factory=lambda: [10.0 ** k for k in range(-2, 5)])
    dts: list = field(default_factory=lambda: [-100, -50, -20, 0, 20, 50, 100])
    cv_folds: int = 5
    train_fraction: float = 0.75
    occupancy_bin: int = 4
    patch_radius: float = 6.0
    revisit_gap: int = 100
    decision_lead: int = 50
    drink_radius: float = 8.0
    segment_window: int = 7
    segment_states: int = 3
    segment_restarts: int = 50
    ema_halflife: float = 100.0

    def validate(self) -> "AnalysisConfig":
        _check(len(self.alpha_grid) > 0 and all(a > 0 for a in self.alpha_grid),
               "analysis.alpha_grid", "must be a non-empty list of positive values")
        _check(0.0 < self.train_fraction < 1.0, "analysis.train_fraction", "must be in (0, 1)")
        _check(self.cv_folds >= 2, "analysis.cv_folds", "must be >= 2")
        _check(self.patch_radius > 0, "analysis.patch_radius", "must be > 0")
        return self


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    seed: int = 0
    out: str = "run"

    def validate(self) -> "RunConfig":
        self.env.validate()
        self.train.validate()
        self.analysis.validate()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check(ok: bool, key: str, msg: str):
    if not ok:
        raise ConfigError(f"{key}: {msg}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected bool, got {type(value).__name__}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return list(value)
    return value


def block_from_dict(cls, data: dict, prefix: str):
    obj = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{prefix}.{key}: unknown key")
        setattr(obj, key, _coerce(f"{prefix}.{key}", value, getattr(obj, key)))
    return obj


def run_config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for key, value in data.items():
        if key == "env":
            cfg.env = block_from_dict(EnvConfig, value, "env")
        elif key == "train":
            cfg.train = block_from_dict(TrainConfig, value, "train")
        elif key == "analysis":
            cfg.analysis = block_from_dict(AnalysisConfig, value, "analysis")
        elif key == "seed":
            cfg.seed = _coerce("seed", value, 0)
        elif key == "out":
            cfg.out = _coerce("out", value, "")
        else:
            raise ConfigError(f"{key}: unknown key")
    return cfg


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig`; ``overrides`` beat file values.

    Override keys are dotted paths (``"env.map_size"``) or bare field names,
    which are looked up in env, train and analysis in that order.
    """
    data = load_config_file(path) if path is not None else {}
    cfg = run_config_from_dict(data)
    for key, value in (overrides or {}).items():
        set_override(cfg, key, value)
    return cfg.validate()


def set_override(cfg: RunConfig, key: str, value):
    if "." in key:
        block_name, name = key.split(".", 1)
        block = getattr(cfg, block_name, None)
        if block is None or not dataclasses.is_dataclass(block) or not hasattr(block, name):
            raise ConfigError(f"{key}: unknown key")
        setattr(block, name, _coerce(key, value, getattr(block, name)))
        return
    if key in ("seed", "out"):
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        return
    for block_name in ("env", "train", "analysis"):
        block = getattr(cfg, block_name)
        if hasattr(block, key):
            setattr(block, key, _coerce(f"{block_name}.{key}", value, getattr(block, key)))
            return
    raise ConfigError(f"{key}: unknown key")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    if dataclasses.is_dataclass(obj):
        obj = dataclasses.asdict(obj)
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]
