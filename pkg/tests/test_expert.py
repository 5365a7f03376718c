import math

import numpy as np
import pytest

from planarbfm.bfm import PoseGoal
from planarbfm.expert import PoseScript, expert_action
from planarbfm.physics import SimParams, SimState, control_step, wrap_angle

PARAMS = SimParams()


def test_expert_zero_action_at_goal():
    s = SimState(theta=0.7, q1=0.2, q2=-0.4)
    g = PoseGoal(rel_pos=(0.0, 0.0), heading=(1.0, 0.0), q1=0.2, q2=-0.4, lookahead=5)
    a = expert_action(s, g, PARAMS)
    assert np.linalg.norm(a) < 1e-6


def test_expert_pure_heading_error_gives_yaw_only():
    s = SimState()
    g = PoseGoal(rel_pos=(0.0, 0.0), heading=(math.cos(0.5), math.sin(0.5)),
                 q1=0.0, q2=0.0, lookahead=5)
    a = expert_action(s, g, PARAMS)
    assert a[2] > 0.0
    assert a[0] == a[1] == 0.0
    assert a[3] == a[4] == 0.0


def test_expert_action_clamped():
    s = SimState()
    g = PoseGoal(rel_pos=(100.0, -100.0), heading=(0.0, 1.0), q1=3.0, q2=-3.0, lookahead=5)
    a = expert_action(s, g, PARAMS)
    lim = PARAMS.action_limits()
    assert (np.abs(a) <= lim + 1e-12).all()
    assert abs(a[0]) == lim[0]


def _track_static_goal(state, world_target, heading_angle, q_target, steps=60):
    """Closed-loop rollout toward a fixed world-frame pose."""
    for _ in range(steps):
        c, s = math.cos(state.theta), math.sin(state.theta)
        dx, dy = world_target[0] - state.x, world_target[1] - state.y
        rel = (c * dx + s * dy, -s * dx + c * dy)
        dh = wrap_angle(heading_angle - state.theta)
        goal = PoseGoal(rel_pos=rel, heading=(math.cos(dh), math.sin(dh)),
                        q1=q_target[0], q2=q_target[1], lookahead=5)
        state, _ = control_step(state, expert_action(state, goal, PARAMS), PARAMS)
    return state


def test_expert_reaches_sampled_pose_goals():
    """95% of sampled pose goals reached within 0.1 units / 0.1 rad in 60 steps."""
    rng = np.random.default_rng(17)
    n, ok = 500, 0
    for _ in range(n):
        start = SimState(theta=rng.uniform(-math.pi, math.pi),
                         q1=rng.uniform(-0.3, 0.3), q2=rng.uniform(-0.3, 0.3))
        target = rng.uniform(-1.5, 1.5, 2)
        heading = rng.uniform(-math.pi, math.pi)
        q_t = rng.uniform(-1.2, 1.2, 2)
        end = _track_static_goal(start, target, heading, q_t)
        pos_err = math.hypot(end.x - target[0], end.y - target[1])
        head_err = abs(wrap_angle(end.theta - heading))
        q_err = max(abs(wrap_angle(end.q1 - q_t[0])), abs(wrap_angle(end.q2 - q_t[1])))
        if pos_err < 0.1 and head_err < 0.1 and q_err < 0.1:
            ok += 1
    assert ok / n >= 0.95, f"expert reached only {ok}/{n} pose goals"


def test_pose_script_starts_at_given_pose():
    script = PoseScript(np.random.default_rng(0), horizon=300,
                        start_pos=(0, 0), start_heading=1.0, start_arm=(0.1, -0.1))
    p, h, q1, q2 = script.target(0)
    np.testing.assert_allclose(p, [0, 0])
    assert h == pytest.approx(1.0)
    assert (q1, q2) == pytest.approx((0.1, -0.1))


def test_pose_script_deterministic_and_continuous():
    s1 = PoseScript(np.random.default_rng(5), horizon=300)
    s2 = PoseScript(np.random.default_rng(5), horizon=300)
    for step in (0, 10, 74, 75, 149, 300, 330):
        assert s1.target(step)[1] == s2.target(step)[1]
        np.testing.assert_array_equal(s1.target(step)[0], s2.target(step)[0])
    # piecewise-linear position: no jumps across a waypoint boundary
    p74 = s1.target(74)[0]
    p75 = s1.target(75)[0]
    assert np.linalg.norm(p75 - p74) < 0.1


def test_pose_script_goal_is_egocentric():
    script = PoseScript(np.random.default_rng(2), horizon=300)
    state = SimState(x=1.0, y=2.0, theta=0.5)
    g = script.pose_goal(state, 0, 15)
    assert g.lookahead == 15
    p, h, *_ = script.target(15)
    c, s = math.cos(0.5), math.sin(0.5)
    expect = (c * (p[0] - 1.0) + s * (p[1] - 2.0), -s * (p[0] - 1.0) + c * (p[1] - 2.0))
    assert g.rel_pos == pytest.approx(expect)
    assert math.hypot(*g.heading) == pytest.approx(1.0)
