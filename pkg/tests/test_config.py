import dataclasses

import pytest

from forageworld.config import (
    ConfigError, EnvConfig, RunConfig, TrainConfig, config_hash, desk_env_config, parse_config,
)


class TestDefaults:
    def test_empty_config(self):
        cfg = parse_config()
        assert cfg.env.map_size == 96 and cfg.env.max_cows == 108

    def test_training_table_values(self):
        t = TrainConfig()
        assert (t.gamma, t.gae_lambda, t.clip_eps, t.vf_coef, t.ent_coef, t.aux_coef) == (0.99, 0.8, 0.2, 0.5, 0.01, 0.025)
        assert (t.rollout_steps, t.epochs, t.minibatches, t.grad_clip_norm, t.prune_step) == (64, 4, 8, 1.0, 20_000)
        assert t.lr == 2.5e-4

    def test_desk_env(self):
        cfg = desk_env_config()
        assert cfg.map_size == 24 and cfg.max_cows <= 108
        assert desk_env_config(max_cows=5).max_cows == 5


class TestFiles:
    def test_toml_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('seed = 3\n[env]\nmap_size = 32\n[train]\ngamma = 0.9\n')
        cfg = parse_config(p)
        assert (cfg.seed, cfg.env.map_size, cfg.train.gamma) == (3, 32, 0.9)

    def test_json_file(self, tmp_path):
        p = tmp_path / "run.json"
        p.write_text('{"env": {"fov_mode": "front_only"}}')
        assert parse_config(p).env.fov_mode == "front_only"

    def test_overrides_beat_file(self, tmp_path):
        p = tmp_path / "run.toml"
        p.write_text('[env]\nmap_size = 32\n')
        assert parse_config(p, {"map_size": 24}).env.map_size == 24
        assert parse_config(p, {"env.map_size": 40}).env.map_size == 40

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(tmp_path / "nope.toml")

    def test_malformed_toml(self, tmp_path):
        p = tmp_path / "bad.toml"
        p.write_text("[env\n")
        with pytest.raises(ConfigError):
            parse_config(p)


class TestErrors:
    def test_gamma_constraint(self):
        with pytest.raises(ConfigError, match="train.gamma"):
            parse_config(overrides={"gamma": 1.5})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="env.colour"):
            parse_config(overrides={"env.colour": 1})
        with pytest.raises(ConfigError, match="bogus"):
            parse_config(overrides={"bogus": 1})

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="env.map_size"):
            parse_config(overrides={"map_size": "large"})
        with pytest.raises(ConfigError, match="train.aux_enabled"):
            parse_config(overrides={"aux_enabled": 1})

    def test_minibatches_must_divide_envs(self):
        with pytest.raises(ConfigError, match="train.minibatches"):
            parse_config(overrides={"n_envs": 12, "minibatches": 8})

    def test_sparsity_below_one(self):
        with pytest.raises(ConfigError):
            parse_config(overrides={"target_sparsity": 1.0})


class TestHash:
    def test_every_constant_changes_hash(self):
        base = config_hash(EnvConfig())
        for f in dataclasses.fields(EnvConfig):
            value = getattr(EnvConfig(), f.name)
            if isinstance(value, bool):
                new = not value
            elif isinstance(value, (int, float)):
                new = value + 1
            elif isinstance(value, str):
                new = value + "x"
            else:
                continue
            assert config_hash(dataclasses.replace(EnvConfig(), **{f.name: new})) != base, f.name

    def test_round_trip_dict(self):
        cfg = RunConfig()
        assert config_hash(cfg.to_dict()) == config_hash(cfg)
