"""Decoupled quadrotor model: first-order yaw-rate response, a forward speed
servo along the heading coupled to the commanded yaw rate, quadratic drag,
gravity, and an altitude PID with gravity feedforward, integrated with
substepped semi-implicit Euler.

All defaults except the paper-derived ones (u_max, v_base, control rate) are
engineering choices and can be overridden via config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

GRAVITY = 9.81  # m/s^2


@dataclass
class DynParams:
    k_psi: float = 5.0        # 1/s  yaw-rate loop gain
    c_d: float = 0.05         # kg/m quadratic drag coefficient
    mass: float = 0.6         # kg
    k_v: float = 2.0          # 1/s  forward-speed loop gain
    pid_kp: float = 6.0       # altitude PID gains (N/m, N/(m s), N s/m)
    pid_ki: float = 1.0
    pid_kd: float = 3.0
    z_ref: float = 2.0        # m    commanded flight altitude
    substeps: int = 10        # per nominal 0.1 s control interval
    u_max: float = 1.0        # rad/s
    v_base: float = 10.0      # m/s  straight-flight target speed
    v_min: float = 2.0        # m/s  target speed at full yaw rate
    thrust_enabled: bool = True  # False isolates drag/gravity/altitude for tests

    def __post_init__(self):
        if min(self.k_psi, self.k_v, self.pid_kp, self.pid_ki, self.pid_kd) <= 0:
            raise ValueError("gains must be positive")
        if self.v_min > self.v_base:
            raise ValueError("need v_min <= v_base")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")


@dataclass
class DroneState:
    position: np.ndarray      # (3,) m
    velocity: np.ndarray      # (3,) m/s
    yaw: float                # rad, wrapped to (-pi, pi]
    yaw_rate: float           # rad/s
    pid_integral: float = 0.0
    pid_prev_error: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).copy()
        self.velocity = np.asarray(self.velocity, dtype=np.float64).copy()

    @classmethod
    def hover(cls, position, yaw: float = 0.0) -> "DroneState":
        """At rest at `position` with the altitude loop settled."""
        return cls(position=np.asarray(position, dtype=np.float64),
                   velocity=np.zeros(3), yaw=wrap_angle(yaw), yaw_rate=0.0)

    def copy(self) -> "DroneState":
        return replace(self, position=self.position.copy(),
                       velocity=self.velocity.copy())

    def as_array(self) -> np.ndarray:
        """[p(3), v(3), yaw, yaw_rate]."""
        return np.concatenate([self.position, self.velocity,
                               [self.yaw, self.yaw_rate]])


def wrap_angle(psi: float) -> float:
    """Wrap to (-pi, pi]; wrap(pi + eps) == -pi + eps."""
    wrapped = np.remainder(psi + np.pi, 2.0 * np.pi) - np.pi
    if wrapped == -np.pi:
        wrapped = np.pi
    return float(wrapped)


def target_speed(u: float, params: DynParams) -> float:
    """Adaptive forward-speed schedule: v_base when flying straight, easing
    to v_min as |u| approaches the yaw-rate limit (square-root profile)."""
    u = float(np.clip(u, -params.u_max, params.u_max))
    return params.v_min + (params.v_base - params.v_min) * np.sqrt(
        1.0 - abs(u) / params.u_max)


def step(state: DroneState, u: float, dt: float, params: DynParams) -> DroneState:
    """Advance one control interval with `substeps` semi-implicit Euler steps.

    Forces: heading-aligned speed servo (with drag feedforward so the forward
    speed settles on target_speed), quadratic drag, gravity, and altitude
    PID on top of an m*g feedforward. Yaw rate follows a first-order response
    toward the commanded u.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if not (np.all(np.isfinite(state.position)) and np.all(np.isfinite(state.velocity))
            and np.isfinite(state.yaw) and np.isfinite(state.yaw_rate)):
        raise ValueError("non-finite drone state")

    u = float(np.clip(u, -params.u_max, params.u_max))
    h = dt / params.substeps
    m = params.mass
    p = state.position.copy()
    v = state.velocity.copy()
    psi = state.yaw
    psi_dot = state.yaw_rate
    integral = state.pid_integral
    prev_err = state.pid_prev_error
    v_tar = target_speed(u, params)

    for _ in range(params.substeps):
        heading = np.array([np.cos(psi), np.sin(psi), 0.0])
        speed = float(np.linalg.norm(v))
        v_fwd = float(v @ heading)

        force = np.array([0.0, 0.0, -m * GRAVITY])     # gravity
        force += -params.c_d * speed * v               # quadratic drag
        if params.thrust_enabled:
            # speed servo along the heading; the c_d term cancels the forward
            # drag component so v_fwd settles on v_tar, not short of it
            thrust = m * params.k_v * (v_tar - v_fwd) + params.c_d * speed * v_fwd
            force += thrust * heading

        err = params.z_ref - p[2]
        integral += err * h
        derivative = (err - prev_err) / h
        prev_err = err
        pid_out = params.pid_kp * err + params.pid_ki * integral + params.pid_kd * derivative
        force[2] += m * GRAVITY + pid_out              # altitude hold + feedforward

        psi_ddot = params.k_psi * (u - psi_dot)
        v = v + h * (force / m)
        p = p + h * v
        psi_dot = psi_dot + h * psi_ddot
        psi = wrap_angle(psi + h * psi_dot)

    return DroneState(position=p, velocity=v, yaw=psi, yaw_rate=psi_dot,
                      pid_integral=integral, pid_prev_error=prev_err)
