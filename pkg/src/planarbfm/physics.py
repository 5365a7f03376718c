"""Deterministic fixed-timestep planar physics for a mobile base with a 2-link arm.

The base is an omnidirectional disc driven by body-frame forces and a yaw
torque; in translation it feels viscous damping scaled by the friction
multiplier plus a Coulomb-style rolling resistance scaled by the gravity
multiplier. The arm lives in the vertical (sagittal) plane through the base
heading; joint angles are measured from straight down, so the arm hangs at
rest at q1 = q2 = 0. Integration is semi-implicit Euler at 120 Hz with a
30 Hz control rate (4 substeps per control tick).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, SimulationError

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    r = math.fmod(a + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    return r - math.pi


@dataclass(frozen=True)
class SimParams:
    dt_sim: float = 1.0 / 120.0
    control_decimation: int = 4
    base_mass: float = 1.0
    base_damping: float = 1.2
    yaw_inertia: float = 0.4
    yaw_damping: float = 0.8
    link_masses: tuple[float, float] = (0.3, 0.2)
    link_lengths: tuple[float, float] = (0.5, 0.4)
    joint_damping: float = 0.15
    joint_armature: float = 0.05
    gravity_accel: float = 9.81
    rolling_resist: float = 0.1
    friction_mult: float = 1.0
    gravity_mult: float = 1.0
    max_force: float = 4.0
    max_yaw_torque: float = 4.0
    max_joint_torque: float = 3.0
    block_contact_radius: float = 0.35
    impact_speed_threshold: float = 1.0
    block_tilt_gain: float = 0.9
    block_righting_rate: float = 0.5
    block_fall_tilt: float = math.radians(70.0)
    arena_halfwidth: float = 20.0

    def __post_init__(self):
        if abs(self.dt_sim * self.control_decimation - 1.0 / 30.0) > 1e-15:
            raise ConfigError("dt_sim * control_decimation must equal 1/30 s")
        if self.friction_mult <= 0.0:
            raise ConfigError("friction_mult must be positive")
        if self.gravity_mult < 0.0:
            raise ConfigError("gravity_mult must be non-negative")

    @property
    def control_dt(self) -> float:
        return self.dt_sim * self.control_decimation

    def action_limits(self) -> np.ndarray:
        return np.array([self.max_force, self.max_force, self.max_yaw_torque,
                         self.max_joint_torque, self.max_joint_torque])


@dataclass(frozen=True)
class BlockState:
    x: float
    y: float
    tilt: float = 0.0
    fallen: bool = False


@dataclass(frozen=True)
class SimState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0
    q1: float = 0.0
    q2: float = 0.0
    dq1: float = 0.0
    dq2: float = 0.0
    t: float = 0.0
    block: BlockState | None = None

    def fields(self) -> tuple:
        return (self.x, self.y, self.theta, self.vx, self.vy, self.omega,
                self.q1, self.q2, self.dq1, self.dq2, self.t)


@dataclass(frozen=True)
class ContactEvent:
    t: float
    speed: float


def heading_vec(theta: float) -> tuple[float, float]:
    return math.cos(theta), math.sin(theta)


def arm_extent(state: SimState, params: SimParams) -> float:
    """Horizontal reach of the end effector along the heading axis."""
    l1, l2 = params.link_lengths
    return l1 * math.sin(state.q1) + l2 * math.sin(state.q1 + state.q2)


def arm_height(state: SimState, params: SimParams) -> float:
    """End-effector height relative to the shoulder (negative when hanging)."""
    l1, l2 = params.link_lengths
    return -l1 * math.cos(state.q1) - l2 * math.cos(state.q1 + state.q2)


def hand_xy(state: SimState, params: SimParams) -> tuple[float, float]:
    """Ground-plane position of the end effector."""
    ext = arm_extent(state, params)
    c, s = heading_vec(state.theta)
    return state.x + c * ext, state.y + s * ext


def gravity_torques(q1: float, q2: float, params: SimParams) -> tuple[float, float]:
    m1, m2 = params.link_masses
    l1, l2 = params.link_lengths
    g = params.gravity_mult * params.gravity_accel
    g1 = g * (m1 * 0.5 * l1 + m2 * l1) * math.sin(q1)
    g2 = g * m2 * 0.5 * l2 * math.sin(q1 + q2)
    return g1, g2


def _substep(state: SimState, action: np.ndarray, params: SimParams) -> tuple[SimState, ContactEvent | None]:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (5,):
        raise SimulationError(f"action must have shape (5,), got {a.shape}")
    if not np.isfinite(a).all():
        raise SimulationError(f"non-finite action at t={state.t:.4f}: {a}")
    lim = params.action_limits()
    a = np.clip(a, -lim, lim)
    f_fwd, f_lat, tau_w, tau1, tau2 = (float(v) for v in a)

    dt = params.dt_sim
    mu = params.friction_mult
    m = params.base_mass
    c, s = heading_vec(state.theta)

    # body-frame drive force rotated to world
    fx = c * f_fwd - s * f_lat
    fy = s * f_fwd + c * f_lat
    vx = state.vx + dt * (fx - mu * params.base_damping * state.vx) / m
    vy = state.vy + dt * (fy - mu * params.base_damping * state.vy) / m
    # Coulomb-style rolling resistance scaled by gravity; stops cleanly at rest
    speed = math.hypot(vx, vy)
    drop = dt * params.gravity_mult * params.rolling_resist
    if speed <= drop:
        vx = vy = 0.0
    elif drop > 0.0:
        k = 1.0 - drop / speed
        vx *= k
        vy *= k
    x = state.x + dt * vx
    y = state.y + dt * vy

    omega = state.omega + dt * (tau_w - mu * params.yaw_damping * state.omega) / params.yaw_inertia
    theta = wrap_angle(state.theta + dt * omega)

    m1, m2 = params.link_masses
    l1, l2 = params.link_lengths
    i1 = m1 * (0.5 * l1) ** 2 + m2 * l1 ** 2 + params.joint_armature
    i2 = m2 * (0.5 * l2) ** 2 + params.joint_armature
    g1, g2 = gravity_torques(state.q1, state.q2, params)
    dq1 = state.dq1 + dt * (tau1 - g1 - params.joint_damping * state.dq1) / i1
    dq2 = state.dq2 + dt * (tau2 - g2 - params.joint_damping * state.dq2) / i2
    q1 = wrap_angle(state.q1 + dt * dq1)
    q2 = wrap_angle(state.q2 + dt * dq2)

    t = state.t + dt
    block = state.block
    event = None
    if block is not None:
        if block.fallen:
            pass  # fallen is terminal for the block; tilt stays put
        else:
            prev_hand = hand_xy(state, params)
            new_state_tmp = SimState(x, y, theta, vx, vy, omega, q1, q2, dq1, dq2, t, block)
            new_hand = hand_xy(new_state_tmp, params)
            hand_speed = math.hypot(new_hand[0] - prev_hand[0], new_hand[1] - prev_hand[1]) / dt
            d_prev = math.hypot(prev_hand[0] - block.x, prev_hand[1] - block.y)
            d_new = math.hypot(new_hand[0] - block.x, new_hand[1] - block.y)
            tilt = max(0.0, block.tilt - params.block_righting_rate * dt)
            entered = d_prev >= params.block_contact_radius > d_new
            if entered and hand_speed > params.impact_speed_threshold:
                tilt += params.block_tilt_gain * (hand_speed - params.impact_speed_threshold)
                event = ContactEvent(t=t, speed=hand_speed)
            if tilt > params.block_fall_tilt:
                block = BlockState(block.x, block.y, math.pi / 2.0, True)
            else:
                block = BlockState(block.x, block.y, tilt, False)

    new = SimState(x, y, theta, vx, vy, omega, q1, q2, dq1, dq2, t, block)
    for v in new.fields():
        if not math.isfinite(v):
            raise SimulationError(f"non-finite state produced at t={t:.4f}")
    return new, event


def physics_substep(state: SimState, action, params: SimParams) -> SimState:
    """One 120 Hz semi-implicit Euler step."""
    return _substep(state, action, params)[0]


def control_step(state: SimState, action, params: SimParams) -> tuple[SimState, list[ContactEvent]]:
    """Apply one 30 Hz control action: control_decimation substeps with the action held."""
    events: list[ContactEvent] = []
    for _ in range(params.control_decimation):
        state, ev = _substep(state, action, params)
        if ev is not None:
            events.append(ev)
    return state, events


def apply_perturbation(params: SimParams, friction_mult: float, gravity_mult: float) -> SimParams:
    """Scale the friction and gravity multipliers; everything else unchanged."""
    if friction_mult <= 0.0 or gravity_mult <= 0.0:
        raise ConfigError("perturbation multipliers must be positive")
    return replace(params,
                   friction_mult=params.friction_mult * friction_mult,
                   gravity_mult=params.gravity_mult * gravity_mult)
