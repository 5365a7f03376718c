"""Scripted PD experts that track pose goals; the demonstration source for
behavior-model pretraining.

A PoseScript is a per-episode target trajectory: random waypoints every couple
of seconds with piecewise-linear position/arm interpolation and shortest-arc
heading interpolation. Waypoint headings are sampled independently of the path
direction on purpose: the pretrained model must not couple facing to motion,
so that facing preferences stay promptable later.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bfm import PoseGoal
from .physics import SimParams, SimState, heading_vec, wrap_angle


@dataclass(frozen=True)
class ExpertGains:
    kp_pos: float = 10.0
    kd_pos: float = 2.8
    kp_head: float = 8.0
    kd_head: float = 1.4
    kp_joint: float = 25.0
    kd_joint: float = 1.2


DEFAULT_GAINS = ExpertGains()


def expert_action(state: SimState, goal: PoseGoal, params: SimParams,
                  gains: ExpertGains = DEFAULT_GAINS) -> np.ndarray:
    """PD tracking of an egocentric pose goal; physical units, clamped to limits."""
    c, s = heading_vec(state.theta)
    v_fwd = c * state.vx + s * state.vy
    v_lat = -s * state.vx + c * state.vy
    f_fwd = gains.kp_pos * goal.rel_pos[0] - gains.kd_pos * v_fwd
    f_lat = gains.kp_pos * goal.rel_pos[1] - gains.kd_pos * v_lat
    head_err = math.atan2(goal.heading[1], goal.heading[0])
    tau_w = gains.kp_head * head_err - gains.kd_head * state.omega
    tau1 = gains.kp_joint * wrap_angle(goal.q1 - state.q1) - gains.kd_joint * state.dq1
    tau2 = gains.kp_joint * wrap_angle(goal.q2 - state.q2) - gains.kd_joint * state.dq2
    lim = params.action_limits()
    return np.clip(np.array([f_fwd, f_lat, tau_w, tau1, tau2]), -lim, lim)


class PoseScript:
    """Random target-pose trajectory for one pretraining episode."""

    def __init__(self, rng: np.random.Generator, horizon: int, start_pos=(0.0, 0.0),
                 start_heading: float = 0.0, start_arm=(0.0, 0.0),
                 waypoint_every: int = 75, pos_step: float = 2.0,
                 arm_range: float = 1.2, max_lookahead: int = 30):
        self.waypoint_every = waypoint_every
        n_wp = (horizon + max_lookahead) // waypoint_every + 2
        pos = [np.asarray(start_pos, dtype=float)]
        heads = [float(start_heading)]
        arms = [np.asarray(start_arm, dtype=float)]
        for _ in range(n_wp):
            ang = rng.uniform(-math.pi, math.pi)
            r = rng.uniform(0.3, pos_step)
            pos.append(pos[-1] + r * np.array([math.cos(ang), math.sin(ang)]))
            heads.append(rng.uniform(-math.pi, math.pi))
            arms.append(rng.uniform(-arm_range, arm_range, 2))
        self._pos = np.stack(pos)
        self._heads = np.array(heads)
        self._arms = np.stack(arms)
        self._last = n_wp * waypoint_every

    def target(self, step: int) -> tuple[np.ndarray, float, float, float]:
        """(world position, heading angle, q1*, q2*) of the script at a step."""
        step = min(max(step, 0), self._last)
        i, frac = divmod(step, self.waypoint_every)
        u = frac / self.waypoint_every
        p = (1 - u) * self._pos[i] + u * self._pos[i + 1]
        h = wrap_angle(self._heads[i] + u * wrap_angle(self._heads[i + 1] - self._heads[i]))
        arm = (1 - u) * self._arms[i] + u * self._arms[i + 1]
        return p, h, float(arm[0]), float(arm[1])

    def pose_goal(self, state: SimState, step: int, lookahead: int) -> PoseGoal:
        """The script's pose at step+lookahead, expressed in the agent's frame."""
        p, h, q1, q2 = self.target(step + lookahead)
        c, s = heading_vec(state.theta)
        dx, dy = p[0] - state.x, p[1] - state.y
        rel = (c * dx + s * dy, -s * dx + c * dy)
        dh = wrap_angle(h - state.theta)
        return PoseGoal(rel_pos=rel, heading=(math.cos(dh), math.sin(dh)),
                        q1=q1, q2=q2, lookahead=lookahead)
