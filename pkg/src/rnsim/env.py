"""The navigation environment: episode lifecycle over a fixed scene and
occlusion field, yaw-rate actions, reward shaping, and the two-stage
domain-randomization stack (photometric edits plus dynamics/sensing noise).

Stage 1 is fully deterministic given the reset seed: original light, exact
state readout, fixed control interval, no latency. Stage 2 draws the full
randomization set; the draw order is fixed so that (seed, action sequence)
always reproduces a trajectory bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DroneState, DynParams, step as dyn_step, wrap_angle
from .relight import EnvLight, OcclusionField, Relit, default_sky_light, edit_light
from .render import Camera, render
from .scene import SceneModel
from .world import CollisionSpec, SpatialIndex, check_collision, sample_start_goal


@dataclass
class RewardWeights:
    progress: float = 1.0
    alignment: float = 0.1
    obstacle: float = 0.2
    success: float = 100.0
    collision: float = -50.0


@dataclass
class LightRanges:
    rotation: tuple = (0.0, 2.0 * np.pi)   # rad, uniform
    intensity: tuple = (0.3, 1.7)          # uniform
    tint: tuple = (0.8, 1.2)               # uniform per channel


@dataclass
class RandomizationRanges:
    """Stage-2 perturbation magnitudes (sensing, actuation, photometric)."""

    action_noise_sigma: float = 1.0          # rad/s, gaussian
    latency_range: tuple = (0.0, 0.080)      # s, uniform, drawn per episode
    control_interval_range: tuple = (0.010, 0.100)  # s, uniform per step
    xy_noise_sigma: float = 0.05             # m, gaussian, observation only
    z_noise_sigma: float = 0.03              # m
    velocity_noise_sigma: float = 0.08       # m/s per component
    camera_position_range: float = 0.1       # +- m per axis, uniform, per episode
    camera_orientation_range_deg: float = 5.0  # +- deg per euler axis, per episode
    light: LightRanges = field(default_factory=LightRanges)


@dataclass
class EnvConfig:
    control_dt: float = 0.1          # s (10 Hz)
    max_steps: int = 600
    image_height: int = 64
    image_width: int = 96
    hfov_deg: float = 90.0
    min_start_goal_dist: float = 30.0  # m
    collision_alpha_min: float = 0.3   # opacity cutoff for the collision cloud
    stage: int = 1                     # 1 = static light, 2 = randomized
    grid_cell: float = 0.5             # m, reachability occupancy resolution
    collision: CollisionSpec = field(default_factory=CollisionSpec)
    dynamics: DynParams = field(default_factory=DynParams)
    reward: RewardWeights = field(default_factory=RewardWeights)
    randomization: RandomizationRanges = field(default_factory=RandomizationRanges)

    def __post_init__(self):
        if self.control_dt <= 0:
            raise ValueError("control_dt must be positive")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


def _dataclass_from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        nested = _NESTED_TYPES.get(f.name)
        if nested is not None and isinstance(value, dict):
            value = _dataclass_from_dict(nested, value)
        kwargs[f.name] = value
    return cls(**kwargs)


_NESTED_TYPES = {
    "collision": CollisionSpec,
    "dynamics": DynParams,
    "reward": RewardWeights,
    "randomization": RandomizationRanges,
    "light": LightRanges,
}

ENV_PREFIX = "RNS_"


def apply_env_overrides(config: EnvConfig, environ=None) -> EnvConfig:
    """Override any config key from RNS_* variables. Nesting uses double
    underscores (RNS_DYNAMICS__K_PSI=8.0, RNS_MAX_STEPS=300); values are
    parsed as JSON with plain-string fallback."""
    environ = os.environ if environ is None else environ

    def override(obj, path: list[str], raw: str):
        head = path[0].lower()
        names = {f.name: f for f in dataclasses.fields(obj)}
        if head not in names:
            raise KeyError(f"unknown config key {'.'.join(path)}")
        if len(path) == 1:
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            return dataclasses.replace(obj, **{head: value})
        sub = override(getattr(obj, head), path[1:], raw)
        return dataclasses.replace(obj, **{head: sub})

    for key, raw in sorted(environ.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].split("__")
        config = override(config, path, raw)
    return config


def load_config(path_or_dict=None, environ=None) -> EnvConfig:
    """EnvConfig from a JSON file or dict, with RNS_* overrides applied."""
    if path_or_dict is None:
        cfg = EnvConfig()
    elif isinstance(path_or_dict, dict):
        cfg = _dataclass_from_dict(EnvConfig, path_or_dict)
    else:
        with open(path_or_dict, "r", encoding="utf-8") as f:
            cfg = _dataclass_from_dict(EnvConfig, json.load(f))
    return apply_env_overrides(cfg, environ)


@dataclass
class RandomizationDraw:
    """Per-episode randomization; identity for stage 1."""

    latency: float = 0.0                     # s
    camera_pos_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    camera_euler_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # rad
    light_rotation: float = 0.0              # rad
    light_intensity: float = 1.0
    light_tint: tuple = (1.0, 1.0, 1.0)

    @classmethod
    def sample(cls, rng: np.random.Generator, r: RandomizationRanges) -> "RandomizationDraw":
        deg = np.radians(r.camera_orientation_range_deg)
        return cls(
            latency=float(rng.uniform(*r.latency_range)),
            camera_pos_offset=rng.uniform(-r.camera_position_range,
                                          r.camera_position_range, 3),
            camera_euler_offset=rng.uniform(-deg, deg, 3),
            light_rotation=float(rng.uniform(*r.light.rotation)),
            light_intensity=float(rng.uniform(*r.light.intensity)),
            light_tint=tuple(rng.uniform(*r.light.tint, 3)),
        )

    def summary(self) -> dict:
        return {
            "latency_ms": self.latency * 1000.0,
            "camera_pos_offset": list(map(float, self.camera_pos_offset)),
            "camera_euler_offset_deg": list(map(float, np.degrees(self.camera_euler_offset))),
            "light_rotation": self.light_rotation,
            "light_intensity": self.light_intensity,
            "light_tint": list(map(float, self.light_tint)),
        }


@dataclass
class Observation:
    image: np.ndarray   # (H, W, 3) uint8 (clamp + gamma applied)
    state: np.ndarray   # (8,) [p_rel(3, yaw-aligned body), v(3, world), yaw, yaw_rate]


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    reason: str          # success | collision | timeout | running
    info: dict


def compute_reward(prev_dist: float, dist: float, yaw: float, yaw_target: float,
                   d_obs: float, success: bool, collision: bool,
                   r_safe: float, weights: RewardWeights):
    """Shaping terms and their weighted total; the total is the exact
    weighted sum of the reported components (the decomposition invariant)."""
    components = {
        "progress": prev_dist - dist,
        "alignment": float(np.cos(yaw_target - yaw)),
        "obstacle": float(min(0.0, (d_obs - r_safe) / r_safe)),
        "success": 1.0 if success else 0.0,
        "collision": 1.0 if collision else 0.0,
    }
    total = (weights.progress * components["progress"]
             + weights.alignment * components["alignment"]
             + weights.obstacle * components["obstacle"]
             + weights.success * components["success"]
             + weights.collision * components["collision"])
    return float(total), components


class EpisodeTerminated(RuntimeError):
    """step() called on a finished episode without an intervening reset."""


class NavEnv:
    """One independently seeded environment over a shared immutable scene."""

    def __init__(self, scene: SceneModel, occ_field: OcclusionField,
                 config: EnvConfig | None = None,
                 base_light: EnvLight | None = None,
                 light_override: dict | None = None):
        self.scene = scene
        self.field = occ_field
        self.config = config or EnvConfig()
        self.base_light = base_light or default_sky_light(scene.degree)
        # fixed light edit applied every episode (for held-out evaluation);
        # suppresses the stage-2 photometric draw
        self.light_override = light_override
        self.index = SpatialIndex.from_scene(scene, self.config.collision_alpha_min)
        self._rng: np.random.Generator | None = None
        self._active = False
        self._sim_time = 0.0
        self._steps = 0
        self._stage = self.config.stage

    # ------------------------------------------------------------- lifecycle

    def reset(self, seed: int, stage: int | None = None) -> Observation:
        if stage is not None:
            if stage not in (1, 2):
                raise ValueError("stage must be 1 or 2")
            self._stage = stage
        else:
            self._stage = self.config.stage
        self._rng = np.random.default_rng(seed)
        cfg = self.config

        start, goal, yaw0 = sample_start_goal(
            self.scene, self.index, self._rng, cfg.collision,
            altitude=cfg.dynamics.z_ref, min_dist=cfg.min_start_goal_dist,
            grid_cell=cfg.grid_cell)
        self.goal = goal
        self.state = DroneState.hover(start, yaw0)

        if self._stage == 2:
            self.draw = RandomizationDraw.sample(self._rng, cfg.randomization)
        else:
            self.draw = RandomizationDraw()

        if self.light_override is not None:
            self.light = edit_light(
                self.base_light,
                rotation=np.radians(float(self.light_override.get("rotation_deg", 0.0))),
                intensity=float(self.light_override.get("intensity", 1.0)),
                tint=self.light_override.get("tint", (1.0, 1.0, 1.0)))
        elif self._stage == 2:
            self.light = edit_light(self.base_light, self.draw.light_rotation,
                                    self.draw.light_intensity, self.draw.light_tint)
        else:
            self.light = self.base_light
        self._shading = Relit(self.light, self.field)

        self._sim_time = 0.0
        self._steps = 0
        self._active = True
        self._pending: list[tuple[float, float]] = []  # (arrival time, command)
        self._current_cmd = 0.0
        self._prev_dist = float(np.linalg.norm(self.goal - self.state.position))
        return self._observe()

    def step(self, action: float) -> StepResult:
        if not self._active:
            raise EpisodeTerminated("episode is over; call reset first")
        cfg = self.config
        rng = self._rng
        u_max = cfg.dynamics.u_max

        cmd = float(np.clip(action, -u_max, u_max))
        noise = 0.0
        if self._stage == 2:
            noise = float(rng.normal(0.0, cfg.randomization.action_noise_sigma))
            cmd = float(np.clip(cmd + noise, -u_max, u_max))
        self._pending.append((self._sim_time + self.draw.latency, cmd))

        if self._stage == 2:
            dt = float(rng.uniform(*cfg.randomization.control_interval_range))
        else:
            dt = cfg.control_dt

        self._integrate(dt)
        self._sim_time += dt
        self._steps += 1

        collided, d_obs = check_collision(self.index, self.state.position, cfg.collision)
        dist = float(np.linalg.norm(self.goal - self.state.position))
        success = dist < cfg.collision.r_goal
        yaw_target = float(np.arctan2(self.goal[1] - self.state.position[1],
                                      self.goal[0] - self.state.position[0]))

        reward, components = compute_reward(
            self._prev_dist, dist, self.state.yaw, yaw_target, d_obs,
            success, collided, cfg.collision.r_safe, cfg.reward)
        self._prev_dist = dist

        if success:
            reason = "success"
        elif collided:
            reason = "collision"
        elif self._steps >= cfg.max_steps:
            reason = "timeout"
        else:
            reason = "running"
        terminated = reason != "running"
        if terminated:
            self._active = False

        obs = self._observe()
        info = {
            "components": components,
            "d_t": dist,
            "d_obs": d_obs,
            "sim_time": self._sim_time,
            "control_dt": dt,
            "action_noise": noise,
            "effective_command": self._current_cmd,
            "randomization": self.draw.summary(),
            "stage": self._stage,
            "position": list(map(float, self.state.position)),
            "yaw": self.state.yaw,
        }
        return StepResult(observation=obs, reward=float(reward),
                          terminated=terminated, reason=reason, info=info)

    # -------------------------------------------------------------- internals

    def _integrate(self, dt: float):
        """Advance dynamics over [t, t+dt), switching the effective command
        at queued arrival times so no action acts before its latency."""
        t0 = self._sim_time
        t1 = t0 + dt
        seg_start = t0
        while self._pending and self._pending[0][0] <= seg_start:
            self._current_cmd = self._pending.pop(0)[1]
        while self._pending and self._pending[0][0] < t1:
            arrival, cmd = self._pending.pop(0)
            seg = arrival - seg_start
            if seg > 1e-12:
                self._dyn_step(seg)
            self._current_cmd = cmd
            seg_start = arrival
        if t1 - seg_start > 1e-12:
            self._dyn_step(t1 - seg_start)

    def _dyn_step(self, dt: float):
        cfg = self.config
        n = max(1, int(round(cfg.dynamics.substeps * dt / cfg.control_dt)))
        params = dataclasses.replace(cfg.dynamics, substeps=n)
        self.state = dyn_step(self.state, self._current_cmd, dt, params)

    def _camera(self) -> Camera:
        cfg = self.config
        yaw = self.state.yaw
        rot_z = np.array([[np.cos(yaw), -np.sin(yaw), 0.0],
                          [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
        position = self.state.position + rot_z @ self.draw.camera_pos_offset
        return Camera.from_yaw(position, yaw, cfg.image_width, cfg.image_height,
                               hfov_deg=cfg.hfov_deg,
                               euler_offset=self.draw.camera_euler_offset)

    def _observe(self) -> Observation:
        cfg = self.config
        fb = render(self.scene, self._camera(), self._shading)
        image = fb.to_rgb8()

        p_meas = self.state.position.copy()
        v_meas = self.state.velocity.copy()
        if self._stage == 2:
            r = cfg.randomization
            p_meas[0] += self._rng.normal(0.0, r.xy_noise_sigma)
            p_meas[1] += self._rng.normal(0.0, r.xy_noise_sigma)
            p_meas[2] += self._rng.normal(0.0, r.z_noise_sigma)
            v_meas += self._rng.normal(0.0, r.velocity_noise_sigma, 3)

        yaw = self.state.yaw
        rel = self.goal - p_meas
        c, s = np.cos(-yaw), np.sin(-yaw)
        p_rel = np.array([c * rel[0] - s * rel[1],
                          s * rel[0] + c * rel[1], rel[2]])
        state_vec = np.concatenate([p_rel, v_meas, [yaw, self.state.yaw_rate]])
        return Observation(image=image, state=state_vec)


class EpisodeLogger:
    """CSV logging of per-step environment internals for offline plotting."""

    COLUMNS = ("episode,step,action,reward,progress,alignment,obstacle,"
               "success,collision,d_t,d_obs,x,y,z,yaw")

    def __init__(self, path):
        self._f = open(path, "w", encoding="utf-8")
        self._f.write(self.COLUMNS + "\n")

    def log(self, episode: int, step_idx: int, action: float, result: StepResult):
        c = result.info["components"]
        x, y, z = result.info["position"]
        d_obs = result.info["d_obs"]
        self._f.write(
            f"{episode},{step_idx},{action:.6f},{result.reward:.6f},"
            f"{c['progress']:.6f},{c['alignment']:.6f},{c['obstacle']:.6f},"
            f"{c['success']:.0f},{c['collision']:.0f},"
            f"{result.info['d_t']:.6f},"
            f"{'' if np.isinf(d_obs) else format(d_obs, '.6f')},"
            f"{x:.6f},{y:.6f},{z:.6f},{result.info['yaw']:.6f}\n")

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
