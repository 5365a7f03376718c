"""Proximal policy optimization with GAE over vectorized task environments.

One train() entry point serves four modes against identical rewards:
task_tokens (frozen backbone, trainable task encoder), full_finetune
(backbone unfrozen), pure_ppo (plain Gaussian MLP, no backbone), and
prompt_only (no training at all; evaluation of the prompted backbone).
The critic is PPO plumbing shared by every training mode and is updated in
all of them; mode comparisons therefore count policy-side parameters only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evalharness
from .adapter import (AdapterPolicy, ObsBatch, PriorSpec, PurePolicy, TaskEncoder,
                      TaskEncoderConfig, TrainableSet, apply_mode, default_prompt,
                      make_obs_batch)
from .autodiff import Adam, Tape, Tensor
from .bfm import BehaviorModel, BfmConfig
from .checkpoint import save_checkpoint
from .errors import ConfigError, ContractError, TrainingError
from .nn import MLP, GaussianDist, Module
from .physics import SimParams
from .seeding import rng_for, seed_seq
from .tasks import GOAL_DIMS, PROPRIO_DIM, Task, TaskEnv


@dataclass
class PPOConfig:
    gamma: float = 0.95
    lam: float = 0.9
    clip_eps: float = 0.2
    epochs: int = 4
    minibatches: int = 8
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    rollout_steps: int = 64
    num_envs: int = 64
    total_env_steps: int = 300_000
    lr: float = 1e-4
    critic_lr: float = 1e-3
    critic_hidden: tuple[int, ...] = (1024, 1024, 1024)
    actor_hidden: tuple[int, ...] = (256, 256)
    horizon: int = 300
    eval_every: int = 5
    eval_episodes: int = 32
    success_stop: float | None = None
    target_kl: float | None = 0.03  # stop an iteration's updates past this
    max_grad_norm: float = 0.5
    critic_warmup_iters: int = 2  # value-only updates before policy moves
    checkpoint_every: int = 0  # extra checkpoints every K evals; 0 = final only

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must lie in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ConfigError("clip epsilon must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["critic_hidden"] = list(d["critic_hidden"])
        d["actor_hidden"] = list(d["actor_hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown PPOConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("critic_hidden", "actor_hidden"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


class Critic(Module):
    """Goal-conditioned value MLP on (proprioception, goal observation, time left).

    The horizon is finite, so the value genuinely depends on remaining time;
    feeding it to the critic (never the policy) removes episode-phase noise
    from the advantage estimates.
    """

    def __init__(self, goal_dim: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, name: str = "critic"):
        super().__init__(name)
        self.mlp = MLP(f"{name}.mlp", PROPRIO_DIM + goal_dim + 1, hidden, 1, rng,
                       activation="relu")

    def parameters(self):
        return self.mlp.parameters()

    def value(self, obs: ObsBatch) -> Tensor:
        x = np.concatenate([obs.proprio, obs.goal, obs.time_left], axis=-1)
        out = self.mlp(ad.lift(x))
        return ad.reshape(out, (len(obs.proprio),))


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """delta_t = r_t + gamma (1-done_t) V_{t+1} - V_t;
    A_t = delta_t + gamma lam (1-done_t) A_{t+1}; returns = A + V[:-1]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    squeeze = rewards.ndim == 1
    if squeeze:
        rewards, values, dones = rewards[None], values[None], dones[None]
    N, T = rewards.shape
    if values.shape != (N, T + 1):
        raise ContractError(f"values must have shape {(N, T + 1)}, got {values.shape}")
    if dones.shape != (N, T):
        raise ContractError(f"dones must have shape {(N, T)}, got {dones.shape}")
    adv = np.zeros((N, T))
    last = np.zeros(N)
    for t in range(T - 1, -1, -1):
        nonterm = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * values[:, t + 1] * nonterm - values[:, t]
        last = delta + gamma * lam * nonterm * last
        adv[:, t] = last
    returns = adv + values[:, :T]
    if squeeze:
        return adv[0], returns[0]
    return adv, returns


def normalize_advantages(adv: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + eps)


def ppo_loss(new_logp: Tensor, old_logp: np.ndarray, adv: np.ndarray,
             values_pred: Tensor, returns: np.ndarray, entropy: Tensor,
             cfg: PPOConfig):
    """Clipped-surrogate PPO objective; advantages must arrive normalized."""
    ratio = ad.exp(ad.sub(new_logp, ad.lift(old_logp)))
    adv_t = ad.lift(adv)
    surr = ad.minimum(ad.mul(ratio, adv_t),
                      ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv_t))
    policy_loss = ad.neg(ad.tmean(surr))
    verr = ad.sub(values_pred, ad.lift(returns))
    value_loss = ad.tmean(ad.mul(verr, verr))
    loss = ad.sub(ad.add(policy_loss, ad.mul(value_loss, cfg.value_coef)),
                  ad.mul(entropy, cfg.entropy_coef))
    r = ratio.data
    with np.errstate(invalid="ignore"):
        diagnostics = {
            "clip_frac": float(np.mean(np.abs(r - 1.0) > cfg.clip_eps)),
            "approx_kl": float(np.mean((r - 1.0) - np.log(np.maximum(r, 1e-12)))),
            "policy_loss": policy_loss.item(),
            "value_loss": value_loss.item(),
        }
    if not math.isfinite(loss.item()):
        raise TrainingError(f"non-finite PPO loss: {diagnostics}")
    return loss, diagnostics


class VecEnv:
    """N independent task environments stepped in lockstep with auto-reset."""

    def __init__(self, task: Task, params: SimParams, n: int, horizon: int,
                 seed: int):
        children = seed_seq(seed, "envs").spawn(n)
        self.envs = [TaskEnv(task, params, horizon, seed=c) for c in children]
        for e in self.envs:
            e.reset()

    def __len__(self):
        return len(self.envs)

    def obs(self, prompt: list[PriorSpec]) -> ObsBatch:
        return make_obs_batch(self.envs, prompt)

    def step(self, actions: np.ndarray):
        rewards = np.zeros(len(self.envs), dtype=np.float32)
        dones = np.zeros(len(self.envs), dtype=np.float32)
        finished = []
        for i, env in enumerate(self.envs):
            _, r, done, info = env.step(actions[i])
            rewards[i] = r
            dones[i] = float(done)
            if done:
                finished.append(info)
                env.reset()
        return rewards, dones, finished


@dataclass
class RolloutBuffer:
    obs: ObsBatch                    # flattened (N*T, ...), env-major
    frozen: object | None            # FrozenTokens flattened, or None
    actions: np.ndarray              # (N, T, A)
    rewards: np.ndarray              # (N, T)
    dones: np.ndarray                # (N, T)
    values: np.ndarray               # (N, T+1)
    logp: np.ndarray                 # (N, T)

    @property
    def size(self) -> int:
        return self.rewards.size


def collect_rollouts(policy, critic: Critic | None, vecenv: VecEnv, T: int,
                     rng: np.random.Generator, prompt: list[PriorSpec]) -> RolloutBuffer:
    """T forward-only steps per env; log-probs are the behavior policy's own."""
    from .adapter import FrozenTokens

    N = len(vecenv)
    A = policy.action_dim
    obs_steps, frozen_steps = [], []
    actions = np.zeros((N, T, A), dtype=np.float32)
    rewards = np.zeros((N, T), dtype=np.float32)
    dones = np.zeros((N, T), dtype=np.float32)
    values = np.zeros((N, T + 1), dtype=np.float32)
    logp = np.zeros((N, T), dtype=np.float32)
    for t in range(T):
        obs = vecenv.obs(prompt)
        frozen = policy.frozen_tokens(obs) if policy.can_cache_frozen else None
        dist = policy.dist(obs, frozen)
        act = dist.sample(rng)
        lp = dist.log_prob(act)
        if critic is not None:
            values[:, t] = critic.value(obs).data
        r, d, _ = vecenv.step(act)
        obs_steps.append(obs)
        frozen_steps.append(frozen)
        actions[:, t] = act
        rewards[:, t] = r
        dones[:, t] = d
        logp[:, t] = lp.data
    final_obs = vecenv.obs(prompt)
    if critic is not None:
        values[:, T] = critic.value(final_obs).data

    # flatten env-major: sample (i, t) -> row i*T + t
    def flat(field_steps):
        stacked = np.stack(field_steps, axis=1)  # (N, T, ...)
        return stacked.reshape(N * T, *stacked.shape[2:])

    obs_flat = ObsBatch(flat([o.proprio for o in obs_steps]),
                        flat([o.goal for o in obs_steps]),
                        flat([o.extra for o in obs_steps]),
                        flat([o.prior_vecs for o in obs_steps]),
                        flat([o.prior_active for o in obs_steps]),
                        flat([o.time_left for o in obs_steps]))
    frozen_flat = None
    if frozen_steps[0] is not None:
        frozen_flat = FrozenTokens(flat([f.state_tok for f in frozen_steps]),
                                   flat([f.prior_toks for f in frozen_steps]))
    return RolloutBuffer(obs_flat, frozen_flat, actions, rewards, dones, values, logp)


METRICS_COLUMNS = ["env_steps", "success_rate", "mean_reward", "clip_frac", "approx_kl"]


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([r["env_steps"], repr(float(r["success_rate"])),
                        repr(float(r["mean_reward"])), repr(float(r["clip_frac"])),
                        repr(float(r["approx_kl"]))])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({"env_steps": int(r["env_steps"]),
                         "success_rate": float(r["success_rate"]),
                         "mean_reward": float(r["mean_reward"]),
                         "clip_frac": float(r["clip_frac"]),
                         "approx_kl": float(r["approx_kl"])})
        return rows


@dataclass
class TrainResult:
    mode: str
    task: Task
    metrics: list[dict]
    models: dict
    critic: Critic | None
    trainable: TrainableSet
    env_steps: int
    stopped_early: bool
    checkpoint_path: Path | None


def build_models(mode: str, task: Task, cfg: PPOConfig, seed: int,
                 bfm: BehaviorModel | None,
                 encoder_cfg: TaskEncoderConfig | None,
                 prompt: list[PriorSpec] | None):
    """Instantiate the policy stack for a mode and set trainable flags."""
    task = Task(task)
    goal_dim = GOAL_DIMS[task]
    models = {"bfm": None, "task_encoder": None, "actor": None}
    if mode in ("task_tokens", "full_finetune", "prompt_only"):
        if bfm is None:
            raise ConfigError(f"mode {mode!r} needs a pretrained behavior model checkpoint")
        models["bfm"] = bfm
        if mode == "prompt_only":
            prompt = default_prompt(task) if prompt is None else prompt
        else:
            enc_cfg = encoder_cfg or TaskEncoderConfig()
            models["task_encoder"] = TaskEncoder(enc_cfg, goal_dim, bfm.cfg.d_model,
                                                 rng_for(seed, "encoder_init"))
            prompt = prompt or []
        policy = AdapterPolicy(bfm, models["task_encoder"], prompt, mode)
    elif mode == "pure_ppo":
        if prompt:
            raise ConfigError("pure_ppo does not take prompt priors")
        models["actor"] = PurePolicy(goal_dim, 5, rng_for(seed, "actor_init"),
                                     hidden=cfg.actor_hidden)
        policy = models["actor"]
        prompt = []
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    tset = apply_mode(mode, models)
    return models, policy, prompt, tset


def train(mode: str, task: Task, cfg: PPOConfig, sim_params: SimParams, seed: int,
          bfm: BehaviorModel | None = None,
          encoder_cfg: TaskEncoderConfig | None = None,
          prompt: list[PriorSpec] | None = None,
          metrics_csv=None, checkpoint_dir=None, log=None,
          bfm_checkpoint_ref: str | None = None) -> TrainResult:
    """PPO adaptation loop; prompt_only runs evaluation only (zero optimizer steps)."""
    task = Task(task)
    models, policy, prompt, tset = build_models(mode, task, cfg, seed, bfm,
                                                encoder_cfg, prompt)

    def eval_rate(tag: str) -> float:
        return evalharness.evaluate(policy, task, cfg.eval_episodes,
                                    seed_seq(seed, "train_eval", tag),
                                    params=sim_params, prompt=prompt,
                                    horizon=cfg.horizon)

    metrics: list[dict] = []
    if mode == "prompt_only":
        rate = eval_rate("final")
        metrics.append({"env_steps": 0, "success_rate": rate, "mean_reward": 0.0,
                        "clip_frac": 0.0, "approx_kl": 0.0})
        if metrics_csv is not None:
            write_metrics_csv(metrics_csv, metrics)
        return TrainResult(mode, task, metrics, models, None, tset, 0, False, None)

    critic = Critic(GOAL_DIMS[task], cfg.critic_hidden, rng_for(seed, "critic_init"))
    opt = Adam(policy.policy_parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    critic_opt = Adam(critic.parameters(), lr=cfg.critic_lr,
                      max_grad_norm=cfg.max_grad_norm)
    vecenv = VecEnv(task, sim_params, cfg.num_envs, cfg.horizon, seed)
    sample_rng = rng_for(seed, "ppo_sample")
    shuffle_rng = rng_for(seed, "ppo_shuffle")

    steps_per_iter = cfg.num_envs * cfg.rollout_steps
    iterations = max(1, cfg.total_env_steps // steps_per_iter)
    env_steps = 0
    stopped = False
    ckpt_path = None
    for it in range(iterations):
        buf = collect_rollouts(policy, critic, vecenv, cfg.rollout_steps,
                               sample_rng, prompt)
        env_steps += steps_per_iter
        adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, cfg.gamma, cfg.lam)
        adv = normalize_advantages(adv).reshape(-1).astype(np.float32)
        ret = ret.reshape(-1).astype(np.float32)
        old_logp = buf.logp.reshape(-1)
        acts = buf.actions.reshape(-1, buf.actions.shape[-1])
        B = buf.size
        diags = []
        kl_exceeded = False
        for _epoch in range(cfg.epochs):
            if kl_exceeded:
                break
            perm = shuffle_rng.permutation(B)
            for mb in np.array_split(perm, cfg.minibatches):
                obs_mb = buf.obs.select(mb)
                frozen_mb = None
                if buf.frozen is not None:
                    from .adapter import FrozenTokens
                    frozen_mb = FrozenTokens(buf.frozen.state_tok[mb],
                                             buf.frozen.prior_toks[mb])
                opt.zero_grad()
                critic_opt.zero_grad()
                with Tape() as tape:
                    dist = policy.dist(obs_mb, frozen_mb)
                    new_logp = dist.log_prob(acts[mb])
                    values_pred = critic.value(obs_mb)
                    loss, diag = ppo_loss(new_logp, old_logp[mb], adv[mb],
                                          values_pred, ret[mb], dist.entropy(), cfg)
                    tape.backward(loss)
                if it >= cfg.critic_warmup_iters:
                    opt.step()
                critic_opt.step()
                diags.append(diag)
                if cfg.target_kl is not None and diag["approx_kl"] > cfg.target_kl:
                    kl_exceeded = True
                    break
        last_iter = it == iterations - 1
        if it % cfg.eval_every == 0 or last_iter:
            rate = eval_rate(str(it))
            row = {"env_steps": env_steps,
                   "success_rate": rate,
                   "mean_reward": float(buf.rewards.mean()),
                   "clip_frac": float(np.mean([d["clip_frac"] for d in diags])),
                   "approx_kl": float(np.mean([d["approx_kl"] for d in diags]))}
            metrics.append(row)
            if log:
                log(f"{mode}/{task.value} it={it:3d} steps={env_steps} "
                    f"success={rate:.1f} reward={row['mean_reward']:.3f} "
                    f"kl={row['approx_kl']:.4f}")
            if metrics_csv is not None:
                write_metrics_csv(metrics_csv, metrics)
            if checkpoint_dir is not None and cfg.checkpoint_every and \
                    not last_iter and (len(metrics) % cfg.checkpoint_every == 0):
                save_policy_checkpoint(Path(checkpoint_dir) / f"update_{it}.ckpt",
                                       mode, task, models, critic, cfg, env_steps,
                                       bfm_checkpoint_ref, prompt, seed)
            if cfg.success_stop is not None and rate >= cfg.success_stop:
                stopped = True
                break
    if metrics_csv is not None:
        write_metrics_csv(metrics_csv, metrics)
    if checkpoint_dir is not None:
        ckpt_path = Path(checkpoint_dir) / "final.ckpt"
        save_policy_checkpoint(ckpt_path, mode, task, models, critic, cfg,
                               env_steps, bfm_checkpoint_ref, prompt, seed)
    return TrainResult(mode, task, metrics, models, critic, tset, env_steps,
                       stopped, ckpt_path)


def save_policy_checkpoint(path, mode: str, task: Task, models: dict,
                           critic: Critic | None, cfg: PPOConfig, env_steps: int,
                           bfm_checkpoint_ref: str | None,
                           prompt: list[PriorSpec] = (), seed: int = 0) -> None:
    params = []
    config: dict = {"mode": mode, "task": Task(task).value,
                    "goal_dim": GOAL_DIMS[Task(task)],
                    "critic_hidden": list(cfg.critic_hidden),
                    "prompt": [p.to_dict() for p in prompt]}
    if models["task_encoder"] is not None:
        params += models["task_encoder"].parameters()
        config["encoder"] = models["task_encoder"].cfg.to_dict()
    if mode == "full_finetune" and models["bfm"] is not None:
        params += models["bfm"].parameters()
        config["bfm"] = models["bfm"].cfg.to_dict()
    if models["actor"] is not None:
        params += models["actor"].parameters()
        config["actor_hidden"] = list(cfg.actor_hidden)
    if critic is not None:
        params += critic.parameters()
    save_checkpoint(path, "task_policy", config, params,
                    {"env_steps": env_steps, "seed": seed,
                     "bfm_checkpoint": bfm_checkpoint_ref or ""})


def load_policy(ck, bfm: BehaviorModel | None):
    """Rebuild an evaluation policy (and its prompt) from a policy checkpoint."""
    from .checkpoint import load_params_into

    mode = ck.config["mode"]
    task = Task(ck.config["task"])
    prompt = [PriorSpec.from_dict(p) for p in ck.config.get("prompt", [])]
    if mode == "pure_ppo":
        actor = PurePolicy(ck.config["goal_dim"], 5, rng_for(0, "actor_init"),
                           hidden=tuple(ck.config["actor_hidden"]))
        load_params_into(ck, actor.parameters())
        return actor, prompt, task
    if mode == "full_finetune":
        bfm = BehaviorModel(BfmConfig.from_dict(ck.config["bfm"]), rng_for(0, "bfm_init"))
    if bfm is None:
        raise ConfigError(f"mode {mode!r} checkpoint needs the pretrained behavior model")
    encoder = None
    if "encoder" in ck.config:
        encoder = TaskEncoder(TaskEncoderConfig.from_dict(ck.config["encoder"]),
                              ck.config["goal_dim"], bfm.cfg.d_model,
                              rng_for(0, "encoder_init"))
    params = ([] if encoder is None else encoder.parameters()) + \
        (bfm.parameters() if mode == "full_finetune" else [])
    if params:
        load_params_into(ck, params)
    policy = AdapterPolicy(bfm, encoder, prompt, mode)
    return policy, prompt, task
