import pytest
import yaml

from planarbfm.errors import ConfigError
from planarbfm.runconfig import (OUTPUT_ENV_VAR, RunConfig, load_config,
                                 save_config)


def test_default_roundtrip(tmp_path):
    cfg = RunConfig()
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()


def test_partial_config(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("seed: 9\nppo:\n  total_env_steps: 1000\n  num_envs: 8\n")
    cfg = load_config(path)
    assert cfg.seed == 9
    assert cfg.ppo.total_env_steps == 1000
    assert cfg.ppo.num_envs == 8
    assert cfg.ppo.gamma == 0.99  # untouched default


def test_unknown_top_level_key_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("sed: 9\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_section_key_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("ppo:\n  gamme: 0.5\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_nested_prior_key_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("adapter:\n  prompt:\n    - kind: move_and_face\n      lookahea: 5\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_prompt_spec_parsing(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(
        "adapter:\n"
        "  encoder:\n    hidden: [256, 256]\n    use_current_pose: false\n"
        "  prompt:\n"
        "    - kind: approach_goal\n      active_when: distance_gt\n      threshold: 1.5\n"
    )
    cfg = load_config(path)
    assert cfg.adapter.encoder.hidden == (256, 256)
    assert not cfg.adapter.encoder.use_current_pose
    assert cfg.adapter.prompt[0].kind == "approach_goal"
    assert cfg.adapter.prompt[0].threshold == 1.5


def test_output_env_override(tmp_path, monkeypatch):
    cfg = RunConfig()
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(tmp_path / "elsewhere"))
    assert cfg.resolved_output() == tmp_path / "elsewhere"
    monkeypatch.delenv(OUTPUT_ENV_VAR)
    assert str(cfg.resolved_output()) == "out"


def test_invalid_sim_value_propagates(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("sim:\n  friction_mult: -1.0\n")
    with pytest.raises(ConfigError):
        load_config(path)
