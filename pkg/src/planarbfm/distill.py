"""Online-distillation pretraining of the behavior model against scripted experts.

Each iteration rolls out a beta-mixture of expert and student over random
pose-script episodes, relabels every visited state with the expert action,
aggregates into a growing dataset, and regresses the trunk mean onto expert
actions under randomly masked goal tokens. Beta anneals linearly from 1 to 0,
so early data comes from the expert's state distribution and late data from
the student's own.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape
from .bfm import POSE_GOAL_DIM, BehaviorModel, BfmConfig, TokenSet, sample_mask
from .errors import ConfigError, TrainingError
from .expert import PoseScript, expert_action
from .physics import SimParams, SimState, control_step
from .seeding import rng_for
from .tasks import proprio_vector


@dataclass
class DistillConfig:
    iterations: int = 40
    rollout_envs: int = 32
    steps_per_env: int = 128
    horizon: int = 300
    batch_size: int = 256
    updates_per_iteration: int = 24
    lr: float = 3e-4
    val_states: int = 2048
    token_lookaheads: tuple[int, ...] = (5, 30)
    track_lookahead: int = 5
    beta_override: float | None = None
    max_dataset: int = 250_000

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["token_lookaheads"] = list(d["token_lookaheads"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DistillConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "token_lookaheads" in d:
            d["token_lookaheads"] = tuple(d["token_lookaheads"])
        return cls(**d)


@dataclass
class DistillSamples:
    proprio: np.ndarray        # (M, 13)
    goal_vecs: np.ndarray      # (M, K, 6)
    masks: np.ndarray          # (M, K) bool
    expert_acts: np.ndarray    # (M, action_dim), normalized

    def __len__(self):
        return len(self.proprio)


def _concat(parts: list[DistillSamples], cap: int) -> DistillSamples:
    out = DistillSamples(
        np.concatenate([p.proprio for p in parts]),
        np.concatenate([p.goal_vecs for p in parts]),
        np.concatenate([p.masks for p in parts]),
        np.concatenate([p.expert_acts for p in parts]),
    )
    if len(out) > cap:
        out = DistillSamples(out.proprio[-cap:], out.goal_vecs[-cap:],
                             out.masks[-cap:], out.expert_acts[-cap:])
    return out


class _ScriptEnv:
    """Bare sim episode driven by a pose script (no task, no termination rules)."""

    def __init__(self, params: SimParams, horizon: int, rng: np.random.Generator,
                 lookaheads: tuple[int, ...]):
        self.params = params
        self.horizon = horizon
        self.rng = rng
        self.max_lookahead = max(lookaheads)
        self.reset()

    def reset(self):
        theta = self.rng.uniform(-math.pi, math.pi)
        q1, q2 = self.rng.uniform(-0.3, 0.3, 2)
        self.state = SimState(theta=theta, q1=q1, q2=q2)
        self.script = PoseScript(self.rng, self.horizon, start_pos=(0.0, 0.0),
                                 start_heading=theta, start_arm=(q1, q2),
                                 max_lookahead=self.max_lookahead)
        self.step_idx = 0

    def advance(self, action_norm: np.ndarray):
        phys = action_norm * self.params.action_limits()
        self.state, _ = control_step(self.state, phys, self.params)
        self.step_idx += 1
        if self.step_idx >= self.horizon:
            self.reset()


def _mask_patterns(masks: np.ndarray) -> dict[int, np.ndarray]:
    """Group sample indices by goal-token presence pattern."""
    key = np.zeros(len(masks), dtype=np.int64)
    for k in range(masks.shape[1]):
        key |= masks[:, k].astype(np.int64) << k
    return {int(p): np.nonzero(key == p)[0] for p in np.unique(key)}


def student_mean_batch(model: BehaviorModel, proprio: np.ndarray, goal_vecs: np.ndarray,
                       masks: np.ndarray, lookaheads: tuple[int, ...]) -> np.ndarray:
    """Trunk mean action per sample under per-sample goal masks (forward only)."""
    dt = ad.default_dtype()
    out = np.zeros((len(proprio), model.cfg.action_dim), dtype=dt)
    state_tok = model.encode_state(proprio.astype(dt)).data
    for pattern, idx in _mask_patterns(masks).items():
        goal_toks = []
        for k_i, k in enumerate(lookaheads):
            if pattern >> k_i & 1:
                tok = model.encode_pose_goal(goal_vecs[idx, k_i, :].astype(dt), k)
                goal_toks.append(tok)
        ts = TokenSet(ad.lift(state_tok[idx]), goal_toks)
        out[idx] = model.trunk_forward(ts).mean.data
    return out


def _distill_loss(model: BehaviorModel, batch: DistillSamples,
                  lookaheads: tuple[int, ...]):
    """Mean squared error between trunk mean and expert action, tape-recorded."""
    dt = ad.default_dtype()
    total = None
    n = len(batch) * model.cfg.action_dim
    for pattern, idx in _mask_patterns(batch.masks).items():
        st = model.encode_state(ad.lift(batch.proprio[idx].astype(dt)))
        goal_toks = [model.encode_pose_goal(ad.lift(batch.goal_vecs[idx, k_i, :].astype(dt)), k)
                     for k_i, k in enumerate(lookaheads) if pattern >> k_i & 1]
        dist = model.trunk_forward(TokenSet(st, goal_toks))
        diff = ad.sub(dist.mean, ad.lift(batch.expert_acts[idx].astype(dt)))
        sq = ad.tsum(ad.mul(diff, diff))
        total = sq if total is None else ad.add(total, sq)
    return ad.mul(total, 1.0 / n)


def validation_mse(model: BehaviorModel, samples: DistillSamples,
                   lookaheads: tuple[int, ...], mask_mode: str = "stored") -> float:
    """Expert-action MSE on a held-out set; mask_mode in {stored, all, none}."""
    if mask_mode == "stored":
        masks = samples.masks
    elif mask_mode == "all":
        masks = np.ones_like(samples.masks)
    elif mask_mode == "none":
        masks = np.zeros_like(samples.masks)
    else:
        raise ConfigError(f"unknown mask_mode {mask_mode!r}")
    means = student_mean_batch(model, samples.proprio, samples.goal_vecs, masks, lookaheads)
    return float(np.mean((means - samples.expert_acts) ** 2))


def collect_mixture_rollouts(model: BehaviorModel, cfg: DistillConfig,
                             params: SimParams, beta: float,
                             rng: np.random.Generator) -> DistillSamples:
    """Roll out the beta-mixture policy and relabel every state with the expert."""
    lookaheads = cfg.token_lookaheads
    K = len(lookaheads)
    lim = params.action_limits()
    envs = [_ScriptEnv(params, cfg.horizon, np.random.default_rng(rng.integers(2 ** 63)),
                       lookaheads) for _ in range(cfg.rollout_envs)]
    E = len(envs)
    P, G, M, A = [], [], [], []
    for _ in range(cfg.steps_per_env):
        proprio = np.stack([proprio_vector(e.state, params) for e in envs])
        goal_vecs = np.zeros((E, K, POSE_GOAL_DIM))
        expert_acts = np.zeros((E, model.cfg.action_dim))
        for i, e in enumerate(envs):
            for k_i, k in enumerate(lookaheads):
                goal_vecs[i, k_i] = e.script.pose_goal(e.state, e.step_idx, k).as_vector()
            track = e.script.pose_goal(e.state, e.step_idx, cfg.track_lookahead)
            expert_acts[i] = expert_action(e.state, track, params)
        expert_norm = np.clip(expert_acts / lim, -1.0, 1.0)
        masks = np.stack([sample_mask(rng, K, model.cfg.mask_keep_prob) for _ in range(E)])
        use_expert = rng.random(E) < beta
        actions = expert_norm.copy()
        if not use_expert.all():
            student = student_mean_batch(model, proprio, goal_vecs, masks, lookaheads)
            student = np.clip(student, -1.0, 1.0)
            actions[~use_expert] = student[~use_expert]
        P.append(proprio.astype(np.float32))
        G.append(goal_vecs.astype(np.float32))
        M.append(masks)
        A.append(expert_norm.astype(np.float32))
        for i, e in enumerate(envs):
            e.advance(actions[i])
    return DistillSamples(np.concatenate(P), np.concatenate(G),
                          np.concatenate(M), np.concatenate(A))


def dagger_pretrain(bfm_cfg: BfmConfig, cfg: DistillConfig, params: SimParams,
                    seed: int, metrics_csv=None, log=None):
    """Run the full pretraining loop; returns (model, history, metadata)."""
    model = BehaviorModel(bfm_cfg, rng_for(seed, "bfm_init"))
    if cfg.track_lookahead not in bfm_cfg.lookaheads or \
            any(k not in bfm_cfg.lookaheads for k in cfg.token_lookaheads):
        raise ConfigError("distill lookaheads must come from the model's lookahead set")
    opt = Adam(model.parameters(), lr=cfg.lr)
    val = collect_mixture_rollouts(model, _val_cfg(cfg), params, beta=1.0,
                                   rng=rng_for(seed, "distill_val"))
    initial_val = validation_mse(model, val, cfg.token_lookaheads)
    update_rng = rng_for(seed, "distill_update")
    dataset: DistillSamples | None = None
    history: list[dict] = []
    for it in range(cfg.iterations):
        if cfg.beta_override is not None:
            beta = cfg.beta_override
        elif cfg.iterations == 1:
            beta = 1.0
        else:
            beta = 1.0 - it / (cfg.iterations - 1)
        fresh = collect_mixture_rollouts(model, cfg, params, beta,
                                         rng_for(seed, "distill_rollout", str(it)))
        dataset = _concat([dataset, fresh] if dataset is not None else [fresh], cfg.max_dataset)
        losses = []
        for _ in range(cfg.updates_per_iteration):
            idx = update_rng.integers(0, len(dataset), cfg.batch_size)
            batch = DistillSamples(dataset.proprio[idx], dataset.goal_vecs[idx],
                                   dataset.masks[idx], dataset.expert_acts[idx])
            opt.zero_grad()
            with Tape() as tape:
                loss = _distill_loss(model, batch, cfg.token_lookaheads)
                tape.backward(loss)
            opt.step()
            losses.append(loss.item())
        train_mse = float(np.mean(losses))
        val_mse = validation_mse(model, val, cfg.token_lookaheads)
        if not (math.isfinite(train_mse) and math.isfinite(val_mse)):
            raise TrainingError(
                f"distillation diverged at iteration {it}: train={train_mse}, val={val_mse}")
        history.append({"iteration": it, "beta": beta,
                        "train_mse": train_mse, "val_mse": val_mse})
        if log:
            log(f"distill it={it:3d} beta={beta:.3f} train={train_mse:.5f} val={val_mse:.5f}")
    metadata = {
        "iterations": cfg.iterations,
        "initial_val_mse": initial_val,
        "final_val_mse": history[-1]["val_mse"],
        "dataset_size": len(dataset),
        "seed": seed,
    }
    if metrics_csv is not None:
        write_distill_csv(metrics_csv, history)
    return model, history, metadata


def _val_cfg(cfg: DistillConfig) -> DistillConfig:
    envs = min(cfg.rollout_envs, 16)
    steps = max(1, math.ceil(cfg.val_states / envs))
    return DistillConfig(iterations=1, rollout_envs=envs, steps_per_env=steps,
                         horizon=cfg.horizon, token_lookaheads=cfg.token_lookaheads,
                         track_lookahead=cfg.track_lookahead)


DISTILL_CSV_COLUMNS = ["iteration", "beta", "train_mse", "val_mse"]


def write_distill_csv(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DISTILL_CSV_COLUMNS)
        for row in history:
            w.writerow([row["iteration"], repr(float(row["beta"])),
                        repr(float(row["train_mse"])), repr(float(row["val_mse"]))])


def read_distill_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{"iteration": int(r["iteration"]), "beta": float(r["beta"]),
                 "train_mse": float(r["train_mse"]), "val_mse": float(r["val_mse"])}
                for r in reader]
