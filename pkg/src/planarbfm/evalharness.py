"""Success-rate evaluation, seed summaries, OOD sweeps, and the ablation grid.

Evaluation is deterministic: actions are the policy's distribution mean, and
episode randomness comes only from per-episode seed children, so evaluate()
is a pure function of (policy parameters, task, seed, E).
"""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import PriorSpec, make_obs_batch
from .errors import ConfigError, ContractError
from .physics import SimParams, apply_perturbation
from .seeding import seed_seq
from .tasks import DEFAULT_HORIZON, Task, TaskEnv, TraceStats, compute_stats


def _as_seedseq(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(int(seed))


def run_episodes(policy, task: Task, episodes: int, seed, params: SimParams,
                 prompt: Sequence[PriorSpec] = (), horizon: int = DEFAULT_HORIZON,
                 collect_stats: bool = False, n_parallel: int = 64):
    """Deterministic batched rollouts; returns per-episode (success, stats|None)."""
    if episodes < 1:
        raise ContractError("need at least one evaluation episode")
    children = _as_seedseq(seed).spawn(episodes)
    results: list[tuple[bool, TraceStats | None]] = [None] * episodes
    prompt = list(prompt)
    for start in range(0, episodes, n_parallel):
        idxs = list(range(start, min(start + n_parallel, episodes)))
        envs = {i: TaskEnv(task, params, horizon, seed=children[i]) for i in idxs}
        for e in envs.values():
            e.reset()
        active = list(idxs)
        while active:
            batch_envs = [envs[i] for i in active]
            obs = make_obs_batch(batch_envs, prompt)
            acts = policy.act(obs)
            still = []
            for j, i in enumerate(active):
                _, _, done, info = envs[i].step(acts[j])
                if done:
                    stats = compute_stats(info["trace"]) if collect_stats else None
                    results[i] = (info["success"], stats)
                else:
                    still.append(i)
            active = still
    return results


def evaluate(policy, task: Task, episodes: int, seed, params: SimParams | None = None,
             prompt: Sequence[PriorSpec] = (), horizon: int = DEFAULT_HORIZON) -> float:
    """Percentage of episodes whose success predicate holds (mean-action rollouts)."""
    params = params or SimParams()
    results = run_episodes(policy, task, episodes, seed, params, prompt, horizon)
    return 100.0 * sum(ok for ok, _ in results) / episodes


def evaluate_with_stats(policy, task: Task, episodes: int, seed,
                        params: SimParams | None = None,
                        prompt: Sequence[PriorSpec] = (),
                        horizon: int = DEFAULT_HORIZON):
    params = params or SimParams()
    results = run_episodes(policy, task, episodes, seed, params, prompt, horizon,
                           collect_stats=True)
    rate = 100.0 * sum(ok for ok, _ in results) / episodes
    return rate, [st for _, st in results]


def facing_aligned_fraction(stats: Sequence[TraceStats], threshold_deg: float = 45.0) -> float:
    """Fraction of episodes whose mean facing error stays under the threshold."""
    if not stats:
        raise ContractError("no episode stats given")
    thr = math.radians(threshold_deg)
    good = sum(1 for s in stats if s.mean_facing_error < thr)
    return good / len(stats)


def seeds_summary(rates: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1) over per-seed success rates."""
    rates = list(rates)
    if len(rates) < 2:
        raise ContractError("seeds_summary needs at least two per-seed rates")
    return float(statistics.mean(rates)), float(statistics.stdev(rates))


@dataclass(frozen=True)
class EvalReport:
    task: Task
    mode: str
    seeds: tuple[int, ...]
    rates: tuple[float, ...]

    @property
    def mean(self) -> float:
        return seeds_summary(self.rates)[0]

    @property
    def std(self) -> float:
        return seeds_summary(self.rates)[1]


@dataclass(frozen=True)
class SweepGrid:
    friction: tuple[float, ...] = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
    gravity: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)
    task: Task = Task.STEERING

    def __post_init__(self):
        if 1.0 not in self.friction or 1.0 not in self.gravity:
            raise ConfigError("sweep grids must include the 1.0 baseline point")


@dataclass(frozen=True)
class SweepRow:
    task: Task
    axis: str
    multiplier: float
    seed: int
    rate: float


def ood_sweep(policies: Sequence[tuple[int, object]], grid: SweepGrid, episodes: int,
              base_params: SimParams | None = None,
              prompt: Sequence[PriorSpec] = (),
              horizon: int = DEFAULT_HORIZON) -> list[SweepRow]:
    """Evaluate trained policies under friction/gravity perturbations.

    policies: (seed, policy) pairs, each trained at multiplier 1.0. Episode
    seeds depend only on the policy seed, so every grid point sees identical
    episode draws and the 1.0 row equals a plain evaluate() call.
    """
    base_params = base_params or SimParams()
    rows: list[SweepRow] = []
    for axis, mults in (("friction", grid.friction), ("gravity", grid.gravity)):
        for m in mults:
            params = apply_perturbation(base_params,
                                        m if axis == "friction" else 1.0,
                                        m if axis == "gravity" else 1.0)
            for seed, policy in policies:
                rate = evaluate(policy, grid.task, episodes, seed_seq(seed, "eval"),
                                params=params, prompt=prompt, horizon=horizon)
                rows.append(SweepRow(grid.task, axis, m, seed, rate))
    return rows


def sweep_summary(rows: Sequence[SweepRow]) -> dict[tuple[str, float], tuple[float, float]]:
    out: dict[tuple[str, float], tuple[float, float]] = {}
    keys = sorted({(r.axis, r.multiplier) for r in rows})
    for key in keys:
        rates = [r.rate for r in rows if (r.axis, r.multiplier) == key]
        out[key] = seeds_summary(rates)
    return out


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationSpec:
    hidden_options: tuple[tuple[int, ...], ...] = ((512, 512, 512), (256, 256))
    use_current_pose_options: tuple[bool, ...] = (True, False)
    prior_options: tuple[bool, ...] = (True, False)


@dataclass(frozen=True)
class AblationRow:
    hidden: tuple[int, ...]
    use_current_pose: bool
    with_priors: bool
    seed: int
    rate: float


def ablation_run(spec: AblationSpec, task: Task, ppo_cfg, sim_params: SimParams,
                 seeds: Sequence[int], bfm, episodes: int = 64,
                 bfm_checkpoint_ref: str | None = None, log=None) -> list[AblationRow]:
    """Train every encoder-architecture cell with identical PPO config and seeds."""
    from . import ppo as ppo_mod
    from .adapter import TaskEncoderConfig, default_prompt

    rows: list[AblationRow] = []
    for hidden in spec.hidden_options:
        for use_pose in spec.use_current_pose_options:
            for with_priors in spec.prior_options:
                for seed in seeds:
                    prompt = default_prompt(task) if with_priors else []
                    res = ppo_mod.train(
                        "task_tokens", task, ppo_cfg, sim_params, seed, bfm=bfm,
                        encoder_cfg=TaskEncoderConfig(hidden=hidden,
                                                      use_current_pose=use_pose),
                        prompt=prompt, bfm_checkpoint_ref=bfm_checkpoint_ref)
                    policy = ppo_mod.AdapterPolicy(bfm, res.models["task_encoder"],
                                                   prompt, "task_tokens")
                    rate = evaluate(policy, task, episodes, seed_seq(seed, "eval"),
                                    params=sim_params, prompt=prompt,
                                    horizon=ppo_cfg.horizon)
                    rows.append(AblationRow(tuple(hidden), use_pose, with_priors,
                                            seed, rate))
                    if log:
                        log(f"ablation hidden={hidden} pose={use_pose} "
                            f"priors={with_priors} seed={seed} rate={rate:.1f}")
    return rows


# ---------------------------------------------------------------------------
# CSV schemas (round-trip parseable)
# ---------------------------------------------------------------------------

EVAL_COLUMNS = ["task", "mode", "seed", "success_rate"]
SWEEP_COLUMNS = ["task", "axis", "multiplier", "seed", "success_rate"]
ABLATION_COLUMNS = ["task", "hidden", "use_current_pose", "with_priors", "seed",
                    "success_rate"]


def write_eval_csv(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EVAL_COLUMNS)
        for seed, rate in zip(report.seeds, report.rates):
            w.writerow([report.task.value, report.mode, seed, repr(float(rate))])


def read_eval_csv(path) -> EvalReport:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ContractError(f"empty eval report {path}")
    return EvalReport(Task(rows[0]["task"]), rows[0]["mode"],
                      tuple(int(r["seed"]) for r in rows),
                      tuple(float(r["success_rate"]) for r in rows))


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r.task.value, r.axis, repr(float(r.multiplier)), r.seed,
                        repr(float(r.rate))])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        return [SweepRow(Task(r["task"]), r["axis"], float(r["multiplier"]),
                         int(r["seed"]), float(r["success_rate"]))
                for r in csv.DictReader(fh)]


def write_ablation_csv(path, rows: Sequence[AblationRow], task: Task) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([task.value, "x".join(map(str, r.hidden)),
                        int(r.use_current_pose), int(r.with_priors), r.seed,
                        repr(float(r.rate))])


def read_ablation_csv(path) -> list[AblationRow]:
    with open(path, newline="") as fh:
        return [AblationRow(tuple(int(h) for h in r["hidden"].split("x")),
                            bool(int(r["use_current_pose"])), bool(int(r["with_priors"])),
                            int(r["seed"]), float(r["success_rate"]))
                for r in csv.DictReader(fh)]
