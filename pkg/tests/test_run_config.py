# This file is part of the UrbanVerse tool

# tests/test_run_config.py
import os

import pytest

from common.errors import ConfigError
from execution.run import parse_args
from execution.run_config import ABLATIONS, SEED_ENV, RunConfig

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def test_defaults_match_the_shipped_default_yaml():
    assert RunConfig.from_yaml(os.path.join(CONFIG_DIR, "default.yaml")) == RunConfig()


def test_defaults():
    config = RunConfig()
    assert (config.k, config.l, config.p, config.q) == (8, 4, 1.0, 0.1)
    assert (config.d, config.heads, config.enc_layers, config.dec_layers, config.rho) == (144, 4, 3, 1, 0.3)
    assert (config.T, config.beta_1, config.beta_T, config.K, config.sr) == (100, 1e-4, 0.02, 5, 10)
    assert config.validate() is config


def test_yaml_then_flags(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("K: 7\nlr_diff: 1.0e-3\nconditioning: concat\nbeta_1: '2e-4'\n")
    args = parse_args(["train", "--config", str(path), "--K", "9", "--no-use-positions"])
    config = RunConfig.from_yaml(args.config).apply_args(args)
    assert config.K == 9
    assert config.lr_diff == 1e-3
    assert config.conditioning == "concat"
    assert config.beta_1 == 2e-4
    assert config.use_positions is False
    assert config.sr == 10


def test_no_positions_flag_matches_the_generated_negative_flag(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("use_positions: true\n")
    short = parse_args(["pretrain", "--config", str(path), "--no-positions"])
    long = parse_args(["pretrain", "--config", str(path), "--no-use-positions"])
    assert short.use_positions is False and long.use_positions is False
    assert RunConfig.from_yaml(str(path)).apply_args(short).use_positions is False
    assert RunConfig.from_yaml(str(path)).apply_args(short) == RunConfig.from_yaml(str(path)).apply_args(long)
    # absent flags leave the YAML value alone
    assert parse_args(["pretrain", "--config", str(path)]).use_positions is None
    assert RunConfig.from_yaml(str(path)).apply_args(parse_args(["pretrain"])).use_positions is True


def test_yaml_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        RunConfig.from_yaml(str(tmp_path / "absent.yaml"))
    (tmp_path / "unknown.yaml").write_text("K: 3\nlearning_rate: 1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        RunConfig.from_yaml(str(tmp_path / "unknown.yaml"))
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError, match="mapping"):
        RunConfig.from_yaml(str(tmp_path / "list.yaml"))
    (tmp_path / "text.yaml").write_text("K: many\n")
    with pytest.raises(ConfigError, match="not a number"):
        RunConfig.from_yaml(str(tmp_path / "text.yaml"))


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert RunConfig().resolve_seed() == 0
    monkeypatch.setenv(SEED_ENV, "17")
    assert RunConfig().resolve_seed() == 17
    assert RunConfig(seed=3).resolve_seed() == 3
    monkeypatch.setenv(SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        RunConfig().resolve_seed()


@pytest.mark.parametrize("overrides", [
    {"d": 10, "heads": 4}, {"K": 0}, {"rho": 1.5}, {"dropout": 1.0}, {"beta_1": 0.05},
    {"test_fraction": 1.0}, {"conditioning": "film"}, {"precision": 16}, {"kde_bandwidth": -1.0},
    {"diff_epochs": -1},
])
def test_validation(overrides):
    with pytest.raises(ConfigError):
        RunConfig(**overrides).validate()


def test_overrides_and_ablations():
    config = RunConfig()
    assert config.with_overrides(K=2).K == 2 and config.K == 5
    with pytest.raises(ConfigError):
        config.with_overrides(alpha=1)
    for name, overrides in ABLATIONS.items():
        assert config.with_overrides(**overrides).validate(), name


def test_round_trip_through_yaml(tmp_path):
    config = RunConfig(seed=4, conditioning="xattn", kde_bandwidth=0.5)
    path = config.to_yaml(str(tmp_path / "config.yaml"))
    assert RunConfig.from_yaml(path) == config
    assert "conditioning=xattn" in str(config)


def test_cli_rejects_bad_choices():
    with pytest.raises(SystemExit):
        parse_args(["train", "--conditioning", "film"])
    with pytest.raises(SystemExit):
        parse_args(["nonsense"])
