import numpy as np
import pytest
import yaml

from planarbfm.bfm import BehaviorModel, BfmConfig
from planarbfm.checkpoint import save_checkpoint
from planarbfm.cli import main

TINY_YAML = """
seed: 3
bfm:
  d_model: 16
  trunk_layers: 1
  n_heads: 2
  ff_width: 16
  state_encoder_hidden: [8]
  pose_encoder_hidden: [8]
distill:
  iterations: 2
  rollout_envs: 2
  steps_per_env: 10
  horizon: 20
  batch_size: 16
  updates_per_iteration: 4
  val_states: 32
ppo:
  rollout_steps: 4
  num_envs: 2
  total_env_steps: 16
  epochs: 1
  minibatches: 1
  critic_hidden: [8]
  actor_hidden: [8]
  horizon: 12
  eval_every: 1
  eval_episodes: 2
eval:
  episodes: 2
  seeds: [0, 1]
  friction_grid: [0.5, 1.0]
  gravity_grid: [1.0, 1.5]
"""


@pytest.fixture
def ws(tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(TINY_YAML + f"io:\n  output: {tmp_path / 'out'}\n")
    return tmp_path, cfg


def _tiny_bfm_ckpt(tmp_path):
    cfg = BfmConfig(d_model=16, trunk_layers=1, n_heads=2, ff_width=16,
                    state_encoder_hidden=(8,), pose_encoder_hidden=(8,))
    model = BehaviorModel(cfg, np.random.default_rng(0))
    path = tmp_path / "bfm.ckpt"
    save_checkpoint(path, "behavior_model", cfg.to_dict(), model.parameters(),
                    {"iterations": 0})
    return path


def test_bad_flags_exit_2(ws):
    tmp_path, cfg = ws
    with pytest.raises(SystemExit) as ei:
        main(["train", "--task", "flying", "--mode", "task_tokens"])
    assert ei.value.code == 2


def test_missing_bfm_is_runtime_error(ws, capsys):
    tmp_path, cfg = ws
    rc = main(["train", "--task", "direction", "--mode", "task_tokens",
               "--config", str(cfg), "--quiet"])
    assert rc == 1
    assert "behavior-model checkpoint" in capsys.readouterr().err


def test_pretrain_then_train_then_eval_and_inspect(ws, capsys):
    tmp_path, cfg = ws
    assert main(["pretrain", "--config", str(cfg), "--quiet"]) == 0
    bfm_path = tmp_path / "out" / "pretrain_seed3" / "bfm.ckpt"
    assert bfm_path.exists()
    assert (tmp_path / "out" / "pretrain_seed3" / "config.yaml").exists()

    assert main(["train", "--task", "direction", "--mode", "task_tokens",
                 "--config", str(cfg), "--bfm", str(bfm_path), "--quiet"]) == 0
    run_dir = tmp_path / "out" / "train_direction_task_tokens_seed3"
    assert (run_dir / "metrics.csv").exists()
    final = run_dir / "checkpoints" / "final.ckpt"
    assert final.exists()

    assert main(["eval", "--task", "direction", "--mode", "task_tokens",
                 "--config", str(cfg), "--bfm", str(bfm_path),
                 "--checkpoint", str(final), "--quiet"]) == 0
    assert (tmp_path / "out" / "eval_direction_task_tokens_seed3" / "eval.csv").exists()

    capsys.readouterr()
    assert main(["inspect", "--checkpoint", str(final)]) == 0
    out = capsys.readouterr().out
    assert "task_policy" in out
    assert "task_encoder" in out

    assert main(["inspect", "--checkpoint", str(bfm_path)]) == 0
    out = capsys.readouterr().out
    assert "trainable parameters by mode" in out
    assert "prompt_only: 0" in out


def test_train_metrics_byte_identical_across_runs(ws):
    tmp_path, cfg = ws
    assert main(["pretrain", "--config", str(cfg), "--quiet"]) == 0
    bfm_path = tmp_path / "out" / "pretrain_seed3" / "bfm.ckpt"

    def run(out_name):
        assert main(["train", "--task", "steering", "--mode", "task_tokens",
                     "--config", str(cfg), "--bfm", str(bfm_path),
                     "--out", str(tmp_path / out_name), "--quiet"]) == 0
        return (tmp_path / out_name / "train_steering_task_tokens_seed3"
                / "metrics.csv").read_bytes()

    assert run("o1") == run("o2")


def test_prompt_only_eval_without_checkpoint(ws):
    tmp_path, cfg = ws
    bfm_path = _tiny_bfm_ckpt(tmp_path)
    assert main(["eval", "--task", "direction", "--mode", "prompt_only",
                 "--config", str(cfg), "--bfm", str(bfm_path), "--quiet"]) == 0
    eval_csv = tmp_path / "out" / "eval_direction_prompt_only_seed3" / "eval.csv"
    assert eval_csv.exists()


def test_sweep_cli(ws):
    tmp_path, cfg = ws
    bfm_path = _tiny_bfm_ckpt(tmp_path)
    assert main(["train", "--task", "steering", "--mode", "task_tokens",
                 "--config", str(cfg), "--bfm", str(bfm_path), "--quiet"]) == 0
    final = (tmp_path / "out" / "train_steering_task_tokens_seed3"
             / "checkpoints" / "final.ckpt")
    assert main(["sweep", "--task", "steering", "--mode", "task_tokens",
                 "--config", str(cfg), "--bfm", str(bfm_path),
                 "--checkpoint", str(final), "--checkpoint", str(final),
                 "--quiet"]) == 0
    sweep_csv = tmp_path / "out" / "sweep_steering_task_tokens_seed3" / "sweep.csv"
    assert sweep_csv.exists()
    from planarbfm.evalharness import read_sweep_csv
    rows = read_sweep_csv(sweep_csv)
    assert len(rows) == 4 * 2  # (2 friction + 2 gravity points) x 2 checkpoints


def test_ablate_cli(ws, monkeypatch):
    tmp_path, cfg = ws
    bfm_path = _tiny_bfm_ckpt(tmp_path)
    # shrink the grid via the default AblationSpec but tiny PPO budget from config
    assert main(["ablate", "--task", "steering", "--config", str(cfg),
                 "--bfm", str(bfm_path), "--quiet"]) == 0
    abl = tmp_path / "out" / "ablate_steering_seed3" / "ablation.csv"
    from planarbfm.evalharness import read_ablation_csv
    rows = read_ablation_csv(abl)
    assert len(rows) == 8 * 2  # 2x2x2 cells x 2 seeds
