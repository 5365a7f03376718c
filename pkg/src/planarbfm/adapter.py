"""Task-token adaptation over a frozen behavior model.

A small task encoder maps the egocentric goal observation (optionally
augmented with current base/hand displacement) to one extra input token.
That token is concatenated with any user-defined prior pose tokens and the
state token, and the frozen trunk turns the assembled set into an action
distribution. Only the task encoder receives optimizer updates in
task_tokens mode; gradients still flow through the trunk to reach it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .bfm import POSE_GOAL_DIM, BehaviorModel, PoseGoal, TokenSet
from .errors import ConfigError, ContractError
from .nn import MLP, GaussianDist, Module
from .physics import SimParams, SimState, heading_vec
from .tasks import (EXTRA_DIM, GOAL_DIMS, PROPRIO_DIM, Task, TaskGoal,
                    goal_observation, proprio_extra, proprio_vector)

MODES = ("task_tokens", "full_finetune", "pure_ppo", "prompt_only")


@dataclass
class TaskEncoderConfig:
    hidden: tuple[int, ...] = (512, 512, 512)
    use_current_pose: bool = True
    activation: str = "relu"
    # scale of the random constant token at init (final weights start at zero;
    # a zero token would sit on layer-norm's singular point inside the trunk)
    init_token_scale: float = 1.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(d["hidden"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskEncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TaskEncoderConfig keys: {sorted(unknown)}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


class TaskEncoder(Module):
    """Per-task MLP producing the task token.

    Final-layer weights start at zero so the token is observation-independent
    at step 0 (a fixed prompt, close in spirit to unprompted behavior); the
    final bias starts as a small random vector so the token never sits at the
    trunk layer-norm's zero singularity.
    """

    def __init__(self, cfg: TaskEncoderConfig, goal_dim: int, d_model: int,
                 rng: np.random.Generator, name: str = "task_encoder"):
        super().__init__(name)
        self.cfg = cfg
        self.goal_dim = goal_dim
        in_dim = goal_dim + (EXTRA_DIM if cfg.use_current_pose else 0)
        self.mlp = MLP(name, in_dim, cfg.hidden, d_model, rng,
                       activation=cfg.activation, zero_init_out=True,
                       out_bias_std=cfg.init_token_scale)

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters()

    def __call__(self, goal_obs, extra=None) -> Tensor:
        g = ad.lift(goal_obs)
        if g.data.shape[-1] != self.goal_dim:
            raise ConfigError(f"goal observation dim {g.data.shape[-1]}, expected {self.goal_dim}")
        if self.cfg.use_current_pose:
            if extra is None:
                raise ConfigError("encoder configured with use_current_pose but no pose extras given")
            x = ad.concat([g, ad.lift(extra)], axis=-1)
        else:
            x = g
        return self.mlp(x)


def task_encode(encoder: TaskEncoder, goal_obs, extra=None) -> Tensor:
    return encoder(goal_obs, extra)


# ---------------------------------------------------------------------------
# user-defined prior tokens
# ---------------------------------------------------------------------------

PRIOR_KINDS = ("move_and_face", "steer_pose", "approach_goal", "reach_pose")


@dataclass(frozen=True)
class PriorSpec:
    """One user prior: which pose hint to attach and when it is active."""

    kind: str
    lookahead: int = 15
    distance: float = 1.0
    stop_short: float = 0.6
    active_when: str = "always"
    threshold: float = 1.5

    def __post_init__(self):
        if self.kind not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.kind!r}; known: {PRIOR_KINDS}")
        if self.active_when not in ("always", "distance_gt"):
            raise ConfigError(f"unknown prior trigger {self.active_when!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown PriorSpec keys: {sorted(unknown)}")
        return cls(**d)


def default_prompt(task: Task) -> list[PriorSpec]:
    """Pose-conditioning prompts per task, mirroring joint-conditioning-style
    hints: high-level movement intent, not task solutions. Reach gets an
    approach hint only (reach_pose with its arm solution stays available as an
    explicit opt-in); strike/dash have no pose prompt."""
    task = Task(task)
    if task is Task.DIRECTION:
        return [PriorSpec("move_and_face")]
    if task is Task.STEERING:
        return [PriorSpec("steer_pose")]
    if task is Task.REACH:
        return [PriorSpec("approach_goal")]
    return []


def _ego(state: SimState, vx: float, vy: float) -> tuple[float, float]:
    c, s = heading_vec(state.theta)
    return c * vx + s * vy, -s * vx + c * vy


def _goal_point(goal: TaskGoal, state: SimState) -> tuple[float, float] | None:
    if goal.point is not None:
        return goal.point
    if goal.task is Task.STRIKE:
        b = state.block
        return (b.x, b.y) if b is not None else goal.block_spawn
    return None


def _solve_arm_for_extent(extent: float, params: SimParams) -> tuple[float, float]:
    """Pick an elbow-up posture whose horizontal reach equals `extent`."""
    l1, l2 = params.link_lengths
    extent = max(-0.95 * (l1 + l2), min(0.95 * (l1 + l2), extent))
    lo, hi = -math.pi / 2, math.pi / 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if l1 * math.sin(mid) + l2 * math.sin(mid + 0.6) < extent:
            lo = mid
        else:
            hi = mid
    q1 = 0.5 * (lo + hi)
    return q1, 0.6


def build_prior(spec: PriorSpec, state: SimState, goal: TaskGoal,
                params: SimParams) -> PoseGoal | None:
    """Instantiate one prior pose goal for the current step, or None if inactive."""
    point = _goal_point(goal, state)
    if spec.active_when == "distance_gt":
        if point is None:
            raise ConfigError("distance-triggered prior needs a task with a target point")
        if math.hypot(point[0] - state.x, point[1] - state.y) <= spec.threshold:
            return None
    if spec.kind == "move_and_face":
        d = goal.direction if goal.direction is not None else goal.axis
        if d is None:
            raise ConfigError(f"prior {spec.kind} needs a task with a direction")
        de = _ego(state, *d)
        return PoseGoal(rel_pos=(de[0] * spec.distance, de[1] * spec.distance),
                        heading=de, q1=state.q1, q2=state.q2, lookahead=spec.lookahead)
    if spec.kind == "steer_pose":
        if goal.direction is None or goal.facing is None:
            raise ConfigError("steer_pose prior needs direction and facing goals")
        de = _ego(state, *goal.direction)
        fe = _ego(state, *goal.facing)
        return PoseGoal(rel_pos=(de[0] * spec.distance, de[1] * spec.distance),
                        heading=fe, q1=state.q1, q2=state.q2, lookahead=spec.lookahead)
    if spec.kind in ("approach_goal", "reach_pose"):
        if point is None:
            raise ConfigError(f"prior {spec.kind} needs a task with a target point")
        pe = _ego(state, point[0] - state.x, point[1] - state.y)
        dist = math.hypot(*pe)
        if dist > 1e-9:
            toward = (pe[0] / dist, pe[1] / dist)
        else:
            toward = (1.0, 0.0)
        go = max(0.0, dist - spec.stop_short)
        rel = (toward[0] * go, toward[1] * go)
        if spec.kind == "approach_goal":
            return PoseGoal(rel_pos=rel, heading=toward, q1=state.q1, q2=state.q2,
                            lookahead=spec.lookahead)
        q1, q2 = _solve_arm_for_extent(min(dist, spec.stop_short + 0.2), params)
        return PoseGoal(rel_pos=rel, heading=toward, q1=q1, q2=q2,
                        lookahead=spec.lookahead)
    raise ConfigError(f"unknown prior kind {spec.kind!r}")


def prior_features(prompt: list[PriorSpec], state: SimState, goal: TaskGoal,
                   params: SimParams):
    """Per-prior (vector, active) features for one state; vectors are zeros when inactive."""
    vecs = np.zeros((len(prompt), POSE_GOAL_DIM))
    active = np.zeros(len(prompt), dtype=bool)
    for i, spec in enumerate(prompt):
        pg = build_prior(spec, state, goal, params)
        if pg is not None:
            vecs[i] = pg.as_vector()
            active[i] = True
    return vecs, active


def assemble_tokens(prior_tokens: list[Tensor], task_token: Tensor | None,
                    state_token: Tensor) -> TokenSet:
    """Sequence = priors ++ [task token] ++ [state token]; inactive priors are absent."""
    goal_tokens = list(prior_tokens)
    if task_token is not None:
        goal_tokens.append(task_token)
    return TokenSet(state_token, goal_tokens)


# ---------------------------------------------------------------------------
# observation bundles and batched policies
# ---------------------------------------------------------------------------


@dataclass
class ObsBatch:
    """Numpy observation arrays for a batch of environments/samples.

    time_left (fraction of horizon remaining) is consumed by the value
    function only; the policy path never sees it.
    """

    proprio: np.ndarray              # (B, 13)
    goal: np.ndarray                 # (B, goal_dim)
    extra: np.ndarray                # (B, 4)
    prior_vecs: np.ndarray           # (B, P, 6)
    prior_active: np.ndarray         # (B, P) bool
    time_left: np.ndarray            # (B, 1)

    def __len__(self):
        return len(self.proprio)

    @classmethod
    def concat(cls, parts: list["ObsBatch"]) -> "ObsBatch":
        return cls(*[np.concatenate([getattr(p, f) for p in parts])
                     for f in ("proprio", "goal", "extra", "prior_vecs",
                               "prior_active", "time_left")])

    def select(self, idx) -> "ObsBatch":
        return ObsBatch(self.proprio[idx], self.goal[idx], self.extra[idx],
                        self.prior_vecs[idx], self.prior_active[idx],
                        self.time_left[idx])


def make_obs_batch(envs, prompt: list[PriorSpec]) -> ObsBatch:
    """Collect per-env observations plus prior features into one batch."""
    dt = ad.default_dtype()
    P = len(prompt)
    proprio, goal, extra = [], [], []
    vecs = np.zeros((len(envs), P, POSE_GOAL_DIM), dtype=dt)
    active = np.zeros((len(envs), P), dtype=bool)
    time_left = np.zeros((len(envs), 1), dtype=dt)
    for i, env in enumerate(envs):
        p, g, e = env.obs()
        proprio.append(p)
        goal.append(g)
        extra.append(e)
        time_left[i, 0] = 1.0 - len(env.trace) / env.horizon
        if P:
            v, a = prior_features(prompt, env.state, env.goal, env.params)
            vecs[i] = v
            active[i] = a
    return ObsBatch(np.asarray(proprio, dtype=dt), np.asarray(goal, dtype=dt),
                    np.asarray(extra, dtype=dt), vecs, active, time_left)


@dataclass
class FrozenTokens:
    """Precomputed frozen-encoder outputs, reusable across update epochs."""

    state_tok: np.ndarray            # (B, d)
    prior_toks: np.ndarray           # (B, P, d)


def _active_patterns(active: np.ndarray) -> dict[int, np.ndarray]:
    key = np.zeros(len(active), dtype=np.int64)
    for p in range(active.shape[1]):
        key |= active[:, p].astype(np.int64) << p
    return {int(k): np.nonzero(key == k)[0] for k in np.unique(key)}


class AdapterPolicy:
    """Policy for task_tokens / full_finetune / prompt_only modes."""

    def __init__(self, bfm: BehaviorModel, encoder: TaskEncoder | None,
                 prompt: list[PriorSpec], mode: str):
        if mode not in ("task_tokens", "full_finetune", "prompt_only"):
            raise ConfigError(f"AdapterPolicy does not serve mode {mode!r}")
        if mode != "prompt_only" and encoder is None:
            raise ConfigError(f"mode {mode!r} requires a task encoder")
        self.bfm = bfm
        self.encoder = encoder
        self.prompt = list(prompt)
        self.mode = mode
        self.prior_ks = tuple(s.lookahead for s in self.prompt)

    @property
    def action_dim(self) -> int:
        return self.bfm.cfg.action_dim

    @property
    def can_cache_frozen(self) -> bool:
        return self.mode != "full_finetune"

    def frozen_tokens(self, obs: ObsBatch) -> FrozenTokens:
        """Encode state and prior tokens outside any tape (frozen path only)."""
        d = self.bfm.cfg.d_model
        dt = ad.default_dtype()
        state_tok = self.bfm.encode_state(obs.proprio).data
        prior_toks = np.zeros((len(obs), len(self.prompt), d), dtype=dt)
        for p, k in enumerate(self.prior_ks):
            rows = np.nonzero(obs.prior_active[:, p])[0]
            if len(rows):
                tok = self.bfm.encode_pose_goal(obs.prior_vecs[rows, p, :], k)
                prior_toks[rows, p] = tok.data
        return FrozenTokens(state_tok, prior_toks)

    def dist(self, obs: ObsBatch, frozen: FrozenTokens | None = None) -> GaussianDist:
        """Action distribution for a batch; differentiable where parameters allow."""
        B = len(obs)
        if frozen is not None and not self.can_cache_frozen:
            raise ContractError("cached frozen tokens are invalid in full_finetune mode")
        task_tok = self.encoder(obs.goal, obs.extra) if self.encoder is not None else None
        if frozen is not None:
            state_tok = ad.lift(frozen.state_tok)
            prior_src = frozen.prior_toks
        else:
            state_tok = self.bfm.encode_state(obs.proprio)
            prior_src = None
        patterns = _active_patterns(obs.prior_active) if self.prompt else {0: np.arange(B)}
        means = []
        for pattern, idx in patterns.items():
            priors = []
            for p, k in enumerate(self.prior_ks):
                if not (pattern >> p & 1):
                    continue
                if prior_src is not None:
                    priors.append(ad.lift(prior_src[idx, p, :]))
                else:
                    priors.append(self.bfm.encode_pose_goal(obs.prior_vecs[idx, p, :], k))
            tok = ad.take_rows(task_tok, idx) if task_tok is not None else None
            st = ad.take_rows(state_tok, idx)
            ts = assemble_tokens(priors, tok, st)
            means.append((idx, self.bfm.trunk_forward(ts).mean))
        if len(means) == 1:
            mean = means[0][1]
        else:
            mean = ad.scatter_rows(means, B)
        return GaussianDist(mean, self.bfm.log_std.tensor())

    def act(self, obs: ObsBatch) -> np.ndarray:
        """Deterministic (mean) actions; forward only."""
        return self.dist(obs).mode()

    def policy_parameters(self) -> list[Parameter]:
        out = list(self.bfm.parameters())
        if self.encoder is not None:
            out += self.encoder.parameters()
        return out


class PurePolicy(Module):
    """Plain Gaussian MLP policy on (proprio, goal observation); no backbone."""

    def __init__(self, goal_dim: int, action_dim: int, rng: np.random.Generator,
                 hidden: tuple[int, ...] = (256, 256), name: str = "actor"):
        super().__init__(name)
        self.mlp = MLP(f"{name}.mlp", PROPRIO_DIM + goal_dim, hidden, action_dim,
                       rng, activation="tanh")
        self.log_std = self._param("log_std",
                                   np.full(action_dim, -1.0, dtype=ad.default_dtype()))
        self.action_dim = action_dim

    def parameters(self) -> list[Parameter]:
        return self.mlp.parameters() + [self.log_std]

    def dist(self, obs: ObsBatch, frozen=None) -> GaussianDist:
        x = np.concatenate([obs.proprio, obs.goal], axis=-1)
        return GaussianDist(self.mlp(ad.lift(x)), self.log_std.tensor())

    def act(self, obs: ObsBatch) -> np.ndarray:
        return self.dist(obs).mode()

    @property
    def can_cache_frozen(self) -> bool:
        return True

    def frozen_tokens(self, obs: ObsBatch):
        return None

    def policy_parameters(self) -> list[Parameter]:
        return self.parameters()


def policy_forward(state: SimState, goal: TaskGoal, prompt: list[PriorSpec],
                   bfm: BehaviorModel, encoder: TaskEncoder | None,
                   params: SimParams, start_pose=None) -> GaussianDist:
    """Single-state convenience wrapper over the batched adapter policy."""
    start = start_pose or (state.x, state.y, state.theta)
    dt = ad.default_dtype()
    vecs, active = prior_features(prompt, state, goal, params)
    obs = ObsBatch(proprio_vector(state, params)[None].astype(dt),
                   goal_observation(state, goal)[None].astype(dt),
                   proprio_extra(state, start, params)[None].astype(dt),
                   vecs[None].astype(dt), active[None],
                   np.ones((1, 1), dtype=dt))
    mode = "task_tokens" if encoder is not None else "prompt_only"
    return AdapterPolicy(bfm, encoder, prompt, mode).dist(obs)


# ---------------------------------------------------------------------------
# trainable-parameter accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainableSet:
    """Policy-side parameters receiving optimizer updates in a given mode.

    The PPO critic is deliberately excluded: every training mode carries the
    same critic, so it cancels out of any cross-mode parameter comparison.
    """

    mode: str
    names: tuple[str, ...]
    count: int


def trainable_parameters(mode: str, models: dict) -> TrainableSet:
    """Exact enumeration of trainable policy parameters for a mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; known: {MODES}")
    params: list[Parameter] = []
    if mode == "task_tokens":
        params = models["task_encoder"].parameters()
    elif mode == "full_finetune":
        params = models["task_encoder"].parameters() + models["bfm"].parameters()
    elif mode == "pure_ppo":
        params = models["actor"].parameters()
    names = tuple(p.name for p in params)
    return TrainableSet(mode, names, sum(p.value.size for p in params))


def apply_mode(mode: str, models: dict) -> TrainableSet:
    """Set trainable flags so that exactly the mode's TrainableSet is trainable."""
    tset = trainable_parameters(mode, models)
    chosen = set(tset.names)
    for model in models.values():
        if model is None:
            continue
        for p in model.parameters():
            p.trainable = p.name in chosen
    return tset
