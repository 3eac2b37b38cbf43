import json

import pytest

from rlhf_lab.config import SEED_ENV_VAR, ConfigError, ExperimentConfig, load_config, parse_config

MINIMAL = {"mdp": {"vocab_size": 2, "horizon": 2, "num_contexts": 2}}


def test_minimal_defaults():
    cfg = parse_config(MINIMAL, env={})
    assert cfg.policy.algorithm == "ppo"
    assert (cfg.oracle.seed, cfg.feedback.seed, cfg.reward_model.seed, cfg.policy.seed) == (0, 1, 2, 3)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config({**MINIMAL, "extra": 1}, env={})
    assert info.value.key == "extra"


def test_nested_validation_names_key():
    with pytest.raises(ConfigError) as info:
        parse_config({"mdp": {"vocab_size": 1, "horizon": 2, "num_contexts": 2}}, env={})
    assert info.value.key == "mdp.vocab_size"
    assert "vocab_size" in str(info.value)


def test_overrides_and_env_seed():
    cfg = parse_config(MINIMAL, ["policy.beta=0.5", "reward_model.class=linear"], env={SEED_ENV_VAR: "10"})
    assert cfg.policy.beta == 0.5
    assert cfg.reward_model.model_class == "linear"
    assert cfg.seed == 10 and cfg.policy.seed == 13


def test_explicit_section_seed_kept():
    cfg = parse_config({**MINIMAL, "seed": 5, "policy": {"seed": 42}}, env={})
    assert cfg.policy.seed == 42 and cfg.oracle.seed == 5


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        parse_config(MINIMAL, ["policy.beta"], env={})


def test_mode_objective_mismatch():
    with pytest.raises(ConfigError):
        parse_config({**MINIMAL, "feedback": {"mode": "bt_stochastic"}}, env={})


def test_context_dist_validated():
    bad = {"mdp": {"vocab_size": 2, "horizon": 1, "num_contexts": 2, "context_dist": [0.7, 0.7]}}
    with pytest.raises(ConfigError):
        parse_config(bad, env={})


def test_frozen_copy_reloads_equal(tmp_path):
    cfg = parse_config({**MINIMAL, "reward_model": {"class": "linear"}}, env={})
    path = tmp_path / "config.json"
    path.write_text(cfg.to_json())
    assert load_config(path, env={}) == cfg
    assert json.loads(cfg.to_json())["reward_model"]["class"] == "linear"


def test_yaml_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("mdp:\n  vocab_size: 3\n  horizon: 1\n  num_contexts: 1\n")
    assert load_config(path, env={}).mdp.vocab_size == 3


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/config.yaml", env={})
