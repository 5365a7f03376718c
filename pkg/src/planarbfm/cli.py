"""Command-line entry point orchestrating pretraining, adaptation, evaluation,
OOD sweeps, ablations, and checkpoint inspection.

Every run writes its artifacts (resolved config, metrics CSVs, checkpoints)
under a deterministic run-id subdirectory of the configured output root; the
PLANARBFM_OUTPUT environment variable overrides that root.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import evalharness, ppo
from .adapter import default_prompt, trainable_parameters
from .bfm import BehaviorModel, BfmConfig
from .checkpoint import load_checkpoint, load_params_into, save_checkpoint
from .distill import dagger_pretrain
from .errors import ConfigError, PlanarBfmError
from .evalharness import (AblationSpec, EvalReport, SweepGrid, ablation_run,
                          evaluate, ood_sweep, seeds_summary, sweep_summary,
                          write_ablation_csv, write_eval_csv, write_sweep_csv)
from .runconfig import RunConfig, load_config, save_config
from .seeding import seed_seq
from .tasks import GOAL_DIMS, Task

TASK_CHOICES = [t.value for t in Task]
MODE_CHOICES = ["task_tokens", "full_finetune", "pure_ppo", "prompt_only"]


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.io.output = args.out
    return cfg


def _run_dir(cfg: RunConfig, name: str) -> Path:
    d = cfg.resolved_output() / name
    d.mkdir(parents=True, exist_ok=True)
    save_config(cfg, d / "config.yaml")
    return d


def _load_bfm(cfg: RunConfig, args) -> tuple[BehaviorModel, str]:
    path = getattr(args, "bfm", None) or cfg.io.bfm_checkpoint
    if not path:
        raise ConfigError("a pretrained behavior-model checkpoint is required "
                          "(--bfm or io.bfm_checkpoint)")
    ck = load_checkpoint(path)
    if ck.kind != "behavior_model":
        raise ConfigError(f"{path} is a {ck.kind!r} checkpoint, not a behavior model")
    from .seeding import rng_for

    model = BehaviorModel(BfmConfig.from_dict(ck.config), rng_for(0, "bfm_init"))
    load_params_into(ck, model.parameters())
    model.freeze()
    return model, str(path)


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg, f"pretrain_seed{cfg.seed}")
    model, history, meta = dagger_pretrain(
        cfg.bfm, cfg.distill, cfg.sim, cfg.seed,
        metrics_csv=out / "pretrain.csv",
        log=None if args.quiet else print)
    save_checkpoint(out / "bfm.ckpt", "behavior_model", model.cfg.to_dict(),
                    model.parameters(), meta)
    print(f"pretrained behavior model -> {out / 'bfm.ckpt'}")
    print(f"validation MSE {meta['initial_val_mse']:.5f} -> {meta['final_val_mse']:.5f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    task = Task(args.task)
    out = _run_dir(cfg, f"train_{task.value}_{args.mode}_seed{cfg.seed}")
    bfm = bfm_ref = None
    if args.mode != "pure_ppo":
        bfm, bfm_ref = _load_bfm(cfg, args)
    prompt = cfg.adapter.prompt or None
    res = ppo.train(args.mode, task, cfg.ppo, cfg.sim, cfg.seed, bfm=bfm,
                    encoder_cfg=cfg.adapter.encoder, prompt=prompt,
                    metrics_csv=out / "metrics.csv",
                    checkpoint_dir=out / "checkpoints",
                    log=None if args.quiet else print,
                    bfm_checkpoint_ref=bfm_ref)
    print(f"trainable parameters ({args.mode}): {res.trainable.count}")
    if res.metrics:
        print(f"final success rate: {res.metrics[-1]['success_rate']:.2f}% "
              f"after {res.env_steps} env steps")
    return 0


def _policies_from_checkpoints(paths, bfm) -> list[tuple[int, object]]:
    policies = []
    for p in paths:
        ck = load_checkpoint(p)
        if ck.kind != "task_policy":
            raise ConfigError(f"{p} is not a task policy checkpoint")
        policy, prompt, _task = ppo.load_policy(ck, bfm)
        policies.append((int(ck.metadata.get("seed", 0)), policy, prompt))
    return policies


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    task = Task(args.task)
    out = _run_dir(cfg, f"eval_{task.value}_{args.mode}_seed{cfg.seed}")
    if args.mode == "prompt_only":
        bfm, _ = _load_bfm(cfg, args)
        prompt = cfg.adapter.prompt or default_prompt(task)
        from .adapter import AdapterPolicy

        entries = [(s, AdapterPolicy(bfm, None, prompt, "prompt_only"), prompt)
                   for s in cfg.eval.seeds]
    else:
        paths = args.checkpoint or ([cfg.io.policy_checkpoint] if cfg.io.policy_checkpoint else [])
        if not paths:
            raise ConfigError("eval needs --checkpoint (repeatable) or io.policy_checkpoint")
        bfm = None
        if args.mode in ("task_tokens", "prompt_only"):
            bfm, _ = _load_bfm(cfg, args)
        entries = _policies_from_checkpoints(paths, bfm)
    rates = [evaluate(policy, task, cfg.eval.episodes, seed_seq(seed, "eval"),
                      params=cfg.sim, prompt=prompt, horizon=cfg.ppo.horizon)
             for seed, policy, prompt in entries]
    report = EvalReport(task, args.mode, tuple(s for s, _, _ in entries), tuple(rates))
    write_eval_csv(out / "eval.csv", report)
    for seed, rate in zip(report.seeds, report.rates):
        print(f"seed {seed}: {rate:.2f}%")
    if len(rates) >= 2:
        mean, std = seeds_summary(rates)
        print(f"success rate: {mean:.2f} +/- {std:.2f} (over {len(rates)} seeds)")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    task = Task(args.task)
    out = _run_dir(cfg, f"sweep_{task.value}_{args.mode}_seed{cfg.seed}")
    bfm = None
    if args.mode in ("task_tokens", "prompt_only"):
        bfm, _ = _load_bfm(cfg, args)
    entries = _policies_from_checkpoints(args.checkpoint, bfm)
    grid = SweepGrid(friction=cfg.eval.friction_grid, gravity=cfg.eval.gravity_grid,
                     task=task)
    prompt = entries[0][2] if entries else []
    rows = ood_sweep([(s, p) for s, p, _ in entries], grid, cfg.eval.episodes,
                     base_params=cfg.sim, prompt=prompt, horizon=cfg.ppo.horizon)
    write_sweep_csv(out / "sweep.csv", rows)
    for (axis, mult), (mean, std) in sweep_summary(rows).items():
        print(f"{axis} x{mult:g}: {mean:.2f} +/- {std:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    task = Task(args.task)
    out = _run_dir(cfg, f"ablate_{task.value}_seed{cfg.seed}")
    bfm, bfm_ref = _load_bfm(cfg, args)
    rows = ablation_run(AblationSpec(), task, cfg.ppo, cfg.sim,
                        seeds=list(cfg.eval.seeds), bfm=bfm,
                        episodes=cfg.eval.episodes, bfm_checkpoint_ref=bfm_ref,
                        log=None if args.quiet else print)
    write_ablation_csv(out / "ablation.csv", rows, task)
    print(f"ablation table -> {out / 'ablation.csv'}")
    return 0


def cmd_inspect(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    print(f"kind: {ck.kind}")
    print(f"config: {ck.config}")
    print(f"metadata: {ck.metadata}")
    print("tensors:")
    total = 0
    for name, t in ck.tensors.items():
        print(f"  {name}  {list(t.shape)}")
        total += t.size
    print(f"total parameters: {total}")
    if ck.kind == "behavior_model":
        from .adapter import TaskEncoder, TaskEncoderConfig
        from .seeding import rng_for

        model = BehaviorModel(BfmConfig.from_dict(ck.config), rng_for(0, "bfm_init"))
        enc = TaskEncoder(TaskEncoderConfig(), GOAL_DIMS[Task.STEERING],
                          model.cfg.d_model, rng_for(0, "encoder_init"))
        actor = ppo.PurePolicy(GOAL_DIMS[Task.STEERING], 5, rng_for(0, "actor_init"))
        models = {"bfm": model, "task_encoder": enc, "actor": actor}
        print("trainable parameters by mode (steering-task shapes):")
        for mode in MODE_CHOICES:
            print(f"  {mode}: {trainable_parameters(mode, models).count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="planarbfm",
                                 description="Frozen behavior-model adaptation "
                                             "with learned task tokens")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_task=False, needs_mode=False):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output root")
        p.add_argument("--quiet", action="store_true")
        if needs_task:
            p.add_argument("--task", required=True, choices=TASK_CHOICES)
        if needs_mode:
            p.add_argument("--mode", required=True, choices=MODE_CHOICES)

    p = sub.add_parser("pretrain", help="distill the behavior model from scripted experts")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="adapt to a task with PPO")
    common(p, needs_task=True, needs_mode=True)
    p.add_argument("--bfm", help="behavior-model checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="success-rate evaluation")
    common(p, needs_task=True, needs_mode=True)
    p.add_argument("--bfm", help="behavior-model checkpoint")
    p.add_argument("--checkpoint", action="append", help="task-policy checkpoint (repeatable)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="friction/gravity OOD sweep")
    common(p, needs_task=True, needs_mode=True)
    p.add_argument("--bfm", help="behavior-model checkpoint")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="task-policy checkpoint (repeatable)")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("ablate", help="task-encoder architecture ablation grid")
    common(p, needs_task=True)
    p.add_argument("--bfm", help="behavior-model checkpoint")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PlanarBfmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
