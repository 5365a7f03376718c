"""Five planar task environments over the physics core.

Tasks: direction (move along a target direction at a target speed), steering
(direction plus a facing constraint), reach (end effector to a point), strike
(knock a block over), dash (sprint a corridor, then coast past a jump line
with control cut). Goals are sampled per episode and anchored at the episode
spawn (the origin); observations are egocentric, so rewards and success
predicates are invariant under global planar rigid transforms.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ContractError
from .physics import (BlockState, SimParams, SimState, arm_extent, arm_height,
                      control_step, hand_xy, heading_vec, wrap_angle)

PROPRIO_DIM = 13
EXTRA_DIM = 4
DEFAULT_HORIZON = 300
MEASUREMENT_STEPS = 60  # trailing 2 s at 30 Hz
DASH_LINE_DIST = 20.0


class Task(str, enum.Enum):
    DIRECTION = "direction"
    STEERING = "steering"
    REACH = "reach"
    STRIKE = "strike"
    DASH = "dash"


GOAL_DIMS = {
    Task.DIRECTION: 3,
    Task.STEERING: 5,
    Task.REACH: 2,
    Task.STRIKE: 3,
    Task.DASH: 3,
}

REACH_RADII = (1.0, 4.0)
STRIKE_RADII = (3.0, 6.0)
SPEED_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class TaskGoal:
    task: Task
    direction: tuple[float, float] | None = None
    speed: float | None = None
    facing: tuple[float, float] | None = None
    point: tuple[float, float] | None = None
    block_spawn: tuple[float, float] | None = None
    axis: tuple[float, float] | None = None
    line_point: tuple[float, float] | None = None


def sample_goal(task: Task, rng: np.random.Generator) -> TaskGoal:
    """Uniform per-task goal sampling, anchored at the episode spawn (origin)."""
    task = Task(task)
    if task is Task.DIRECTION:
        a = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(*SPEED_RANGE)
        return TaskGoal(task, direction=(math.cos(a), math.sin(a)), speed=v)
    if task is Task.STEERING:
        a = rng.uniform(-math.pi, math.pi)
        f = rng.uniform(-math.pi, math.pi)
        v = rng.uniform(*SPEED_RANGE)
        return TaskGoal(task, direction=(math.cos(a), math.sin(a)), speed=v,
                        facing=(math.cos(f), math.sin(f)))
    if task is Task.REACH:
        a = rng.uniform(-math.pi, math.pi)
        r = math.sqrt(rng.uniform(REACH_RADII[0] ** 2, REACH_RADII[1] ** 2))
        return TaskGoal(task, point=(r * math.cos(a), r * math.sin(a)))
    if task is Task.STRIKE:
        a = rng.uniform(-math.pi, math.pi)
        r = rng.uniform(*STRIKE_RADII)
        return TaskGoal(task, block_spawn=(r * math.cos(a), r * math.sin(a)))
    if task is Task.DASH:
        a = rng.uniform(-math.pi, math.pi)
        axis = (math.cos(a), math.sin(a))
        return TaskGoal(task, axis=axis,
                        line_point=(DASH_LINE_DIST * axis[0], DASH_LINE_DIST * axis[1]))
    raise ConfigError(f"unknown task {task}")


def _ego_vec(state: SimState, vx: float, vy: float) -> tuple[float, float]:
    c, s = heading_vec(state.theta)
    return c * vx + s * vy, -s * vx + c * vy


def _ego_point(state: SimState, px: float, py: float) -> tuple[float, float]:
    return _ego_vec(state, px - state.x, py - state.y)


def goal_observation(state: SimState, goal: TaskGoal) -> np.ndarray:
    """Egocentric goal feature vector g_t for the current state."""
    task = goal.task
    if task is Task.DIRECTION:
        d = _ego_vec(state, *goal.direction)
        return np.array([d[0], d[1], goal.speed])
    if task is Task.STEERING:
        d = _ego_vec(state, *goal.direction)
        f = _ego_vec(state, *goal.facing)
        return np.array([d[0], d[1], f[0], f[1], goal.speed])
    if task is Task.REACH:
        p = _ego_point(state, *goal.point)
        return np.array([p[0], p[1]])
    if task is Task.STRIKE:
        block = state.block
        bx, by = (block.x, block.y) if block is not None else goal.block_spawn
        p = _ego_point(state, bx, by)
        upright = 0.0 if (block is not None and block.fallen) else 1.0
        return np.array([p[0], p[1], upright])
    if task is Task.DASH:
        a = _ego_vec(state, *goal.axis)
        remaining = ((goal.line_point[0] - state.x) * goal.axis[0]
                     + (goal.line_point[1] - state.y) * goal.axis[1])
        return np.array([a[0], a[1], remaining / 10.0])
    raise ConfigError(f"unknown task {task}")


def _facing_error(state: SimState, facing: tuple[float, float]) -> float:
    return abs(wrap_angle(state.theta - math.atan2(facing[1], facing[0])))


def _dash_progress(state: SimState, goal: TaskGoal) -> float:
    """Signed distance of the base past the jump line along the corridor axis."""
    return ((state.x - goal.line_point[0]) * goal.axis[0]
            + (state.y - goal.line_point[1]) * goal.axis[1])


def task_reward(prev: SimState, next_state: SimState, goal: TaskGoal,
                params: SimParams) -> float:
    """Dense per-step reward; bounded in [0, 11]."""
    task = goal.task
    if task in (Task.DIRECTION, Task.STEERING):
        v_along = next_state.vx * goal.direction[0] + next_state.vy * goal.direction[1]
        r = math.exp(-2.0 * abs(v_along - goal.speed))
        if task is Task.STEERING:
            r += 0.5 * math.exp(-2.0 * _facing_error(next_state, goal.facing))
        return r
    if task is Task.REACH:
        hx, hy = hand_xy(next_state, params)
        return math.exp(-4.0 * math.hypot(hx - goal.point[0], hy - goal.point[1]))
    if task is Task.STRIKE:
        block = next_state.block
        hx, hy = hand_xy(next_state, params)
        r = 0.3 * math.exp(-math.hypot(hx - block.x, hy - block.y))
        if block.fallen and not prev.block.fallen:
            r += 10.0
        return r
    if task is Task.DASH:
        p_next = _dash_progress(next_state, goal)
        if p_next <= 0.0:
            v_along = next_state.vx * goal.axis[0] + next_state.vy * goal.axis[1]
            return 0.1 * min(1.0, max(0.0, v_along / 3.0))
        p_prev = max(0.0, _dash_progress(prev, goal))
        return 4.0 * max(0.0, p_next - p_prev)
    raise ConfigError(f"unknown task {task}")


@dataclass
class EpisodeTrace:
    """Full record of one episode: states[0] is the initial state, then one
    state/action/reward triple per control step."""

    task: Task
    goal: TaskGoal
    params: SimParams
    states: list[SimState]
    actions: list[np.ndarray]
    rewards: list[float]
    termination: str | None = None

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class TraceStats:
    mean_speed_along: float
    mean_facing_error: float
    min_hand_distance: float
    block_fallen: bool
    coast_distance: float


def compute_stats(trace: EpisodeTrace) -> TraceStats:
    """Measurement-window statistics, recomputed from the raw trace."""
    goal = trace.goal
    post = trace.states[1:]
    window = post[-MEASUREMENT_STEPS:] if post else []
    mean_speed = float("nan")
    mean_face = float("nan")
    if goal.direction is not None and window:
        mean_speed = sum(s.vx * goal.direction[0] + s.vy * goal.direction[1]
                         for s in window) / len(window)
    face_ref = goal.facing if goal.facing is not None else goal.direction
    if face_ref is not None and window:
        mean_face = sum(_facing_error(s, face_ref) for s in window) / len(window)
    min_hand = float("nan")
    if goal.point is not None:
        min_hand = min(math.hypot(*(np.subtract(hand_xy(s, trace.params), goal.point)))
                       for s in trace.states)
    fallen = bool(trace.states[-1].block.fallen) if trace.states[-1].block is not None else False
    coast = 0.0
    if goal.axis is not None:
        coast = max(0.0, max(_dash_progress(s, goal) for s in trace.states))
    return TraceStats(mean_speed, mean_face, min_hand, fallen, coast)


def task_success(trace: EpisodeTrace, goal: TaskGoal | None = None) -> bool:
    """Per-task success predicate over a completed episode trace."""
    if trace.termination is None:
        raise ContractError("task_success requires a completed episode trace")
    goal = goal or trace.goal
    stats = compute_stats(replace_goal(trace, goal))
    task = goal.task
    if task is Task.DIRECTION:
        return abs(stats.mean_speed_along - goal.speed) <= 0.2 * goal.speed
    if task is Task.STEERING:
        return (abs(stats.mean_speed_along - goal.speed) <= 0.2 * goal.speed
                and stats.mean_facing_error <= math.radians(45.0))
    if task is Task.REACH:
        return stats.min_hand_distance <= 0.2
    if task is Task.STRIKE:
        return stats.block_fallen
    if task is Task.DASH:
        return stats.coast_distance > 1.5
    raise ConfigError(f"unknown task {task}")


def replace_goal(trace: EpisodeTrace, goal: TaskGoal) -> EpisodeTrace:
    if goal is trace.goal:
        return trace
    return EpisodeTrace(trace.task, goal, trace.params, trace.states,
                        trace.actions, trace.rewards, trace.termination)


def proprio_vector(state: SimState, params: SimParams) -> np.ndarray:
    """13-dim proprioceptive observation (last two dims reserved)."""
    return np.array([
        math.sin(state.theta), math.cos(state.theta),
        state.vx, state.vy, state.omega,
        state.q1, state.q2, state.dq1, state.dq2,
        arm_extent(state, params), arm_height(state, params),
        0.0, 0.0,
    ])


def proprio_extra(state: SimState, start: tuple[float, float, float],
                  params: SimParams) -> np.ndarray:
    """Base and hand displacement since episode start, in the start frame."""
    x0, y0, th0 = start
    c, s = math.cos(th0), math.sin(th0)

    def rel(px, py):
        dx, dy = px - x0, py - y0
        return c * dx + s * dy, -s * dx + c * dy

    bx, by = rel(state.x, state.y)
    hx, hy = rel(*hand_xy(state, params))
    return np.array([bx, by, hx, hy])


class TaskEnv:
    """Single-episode-at-a-time environment; actions are normalized to [-1, 1]."""

    def __init__(self, task: Task, params: SimParams | None = None,
                 horizon: int = DEFAULT_HORIZON, seed: int | np.random.SeedSequence = 0):
        self.task = Task(task)
        self.params = params or SimParams()
        self.horizon = horizon
        self.rng = np.random.default_rng(seed)
        self._limits = self.params.action_limits()
        self.state: SimState | None = None
        self.goal: TaskGoal | None = None

    def reset(self) -> SimState:
        theta0 = self.rng.uniform(-math.pi, math.pi)
        q1 = self.rng.uniform(-0.3, 0.3)
        q2 = self.rng.uniform(-0.3, 0.3)
        self.goal = sample_goal(self.task, self.rng)
        block = None
        if self.task is Task.STRIKE:
            block = BlockState(*self.goal.block_spawn)
        self.state = SimState(theta=theta0, q1=q1, q2=q2, block=block)
        self.start_pose = (self.state.x, self.state.y, self.state.theta)
        self._crossed = False
        self._trace = EpisodeTrace(self.task, self.goal, self.params,
                                   [self.state], [], [])
        return self.state

    @property
    def done(self) -> bool:
        return self._trace.termination is not None

    def obs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(proprio, egocentric goal, start-relative pose extras)."""
        return (proprio_vector(self.state, self.params),
                goal_observation(self.state, self.goal),
                proprio_extra(self.state, self.start_pose, self.params))

    def step(self, action_norm: np.ndarray) -> tuple[SimState, float, bool, dict]:
        if self.state is None or self.done:
            raise ContractError("step called on an unstarted or finished episode")
        a = np.clip(np.asarray(action_norm, dtype=np.float64), -1.0, 1.0)
        if self.task is Task.DASH and self._crossed:
            a = np.zeros(5)  # control authority is cut past the jump line
        prev = self.state
        self.state, _events = control_step(prev, a * self._limits, self.params)
        reward = task_reward(prev, self.state, self.goal, self.params)
        self._trace.states.append(self.state)
        self._trace.actions.append(a)
        self._trace.rewards.append(reward)

        if self.task is Task.DASH and not self._crossed and _dash_progress(self.state, self.goal) > 0.0:
            self._crossed = True

        termination = None
        if (abs(self.state.x) > self.params.arena_halfwidth
                or abs(self.state.y) > self.params.arena_halfwidth):
            termination = "arena_exit"
        elif self.task is Task.DASH and self._crossed \
                and math.hypot(self.state.vx, self.state.vy) < 0.02:
            termination = "stopped"
        elif len(self._trace) >= self.horizon:
            termination = "horizon"
        done = termination is not None
        info: dict = {}
        if done:
            self._trace.termination = termination
            info["trace"] = self._trace
            info["success"] = task_success(self._trace)
        return self.state, reward, done, info

    @property
    def trace(self) -> EpisodeTrace:
        return self._trace


# ---------------------------------------------------------------------------
# rigid-transform helpers (invariance checks)
# ---------------------------------------------------------------------------


def transform_state(state: SimState, angle: float, dx: float, dy: float) -> SimState:
    c, s = math.cos(angle), math.sin(angle)

    def rot(px, py):
        return c * px - s * py, s * px + c * py

    x, y = rot(state.x, state.y)
    vx, vy = rot(state.vx, state.vy)
    block = state.block
    if block is not None:
        bx, by = rot(block.x, block.y)
        block = BlockState(bx + dx, by + dy, block.tilt, block.fallen)
    return SimState(x + dx, y + dy, wrap_angle(state.theta + angle), vx, vy,
                    state.omega, state.q1, state.q2, state.dq1, state.dq2,
                    state.t, block)


def transform_goal(goal: TaskGoal, angle: float, dx: float, dy: float) -> TaskGoal:
    c, s = math.cos(angle), math.sin(angle)

    def rot(v):
        return (c * v[0] - s * v[1], s * v[0] + c * v[1]) if v is not None else None

    def mov(p):
        if p is None:
            return None
        rx, ry = rot(p)
        return rx + dx, ry + dy

    return TaskGoal(goal.task, direction=rot(goal.direction), speed=goal.speed,
                    facing=rot(goal.facing), point=mov(goal.point),
                    block_spawn=mov(goal.block_spawn), axis=rot(goal.axis),
                    line_point=mov(goal.line_point))


# ---------------------------------------------------------------------------
# trace CSV export
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ["step", "t", "x", "y", "theta", "vx", "vy", "omega",
                 "q1", "q2", "dq1", "dq2", "block_x", "block_y", "block_tilt",
                 "block_fallen", "a0", "a1", "a2", "a3", "a4", "reward"]


def trace_to_csv(trace: EpisodeTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for i, (s, a, r) in enumerate(zip(trace.states[1:], trace.actions, trace.rewards)):
            b = s.block
            w.writerow([i, repr(s.t), repr(s.x), repr(s.y), repr(s.theta),
                        repr(s.vx), repr(s.vy), repr(s.omega),
                        repr(s.q1), repr(s.q2), repr(s.dq1), repr(s.dq2),
                        repr(b.x) if b else "", repr(b.y) if b else "",
                        repr(b.tilt) if b else "", int(b.fallen) if b else "",
                        *[repr(float(v)) for v in a], repr(r)])


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ContractError(f"unexpected trace CSV columns in {path}")
        return list(reader)
