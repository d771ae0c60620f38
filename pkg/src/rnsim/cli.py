"""Operator CLI: scene generation, rendering, relighting, occlusion-field
construction, scripted rollouts, the environment service, and benchmarks.

Every subcommand validates its inputs up front and exits nonzero with a
one-line diagnostic; output files are written atomically (temp + rename) so
failures never leave partial files behind.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import __version__
from .dynamics import wrap_angle
from .env import EnvConfig, EpisodeLogger, NavEnv, load_config
from .formats import write_pfm, write_ppm
from .relight import (
    LIGHT_PRESETS,
    Relit,
    build_occlusion_field,
    default_sky_light,
    edit_light,
    grid_for_scene,
    light_from_spec,
    load_field,
    save_field,
)
from .render import Baked, Camera, render
from .scene import ForestParams, SceneModel, gen_forest, load_scene, save_scene


class CliError(Exception):
    pass


def _atomic_write(path, writer):
    """Write via `writer(tmp_path)` then rename into place."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rnsim-tmp-")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_scene(path) -> SceneModel:
    if not os.path.exists(path):
        raise CliError(f"scene file not found: {path}")
    return load_scene(path)


def _load_field(path):
    if not os.path.exists(path):
        raise CliError(f"occlusion field file not found: {path}")
    return load_field(path)


def _parse_pose(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise CliError(f"--pose needs x,y,z,yaw_deg, got {text!r}")
    x, y, z, yaw_deg = (float(p) for p in parts)
    return np.array([x, y, z]), np.radians(yaw_deg)


def _parse_rgb(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise CliError(f"expected r,g,b, got {text!r}")
    return tuple(parts)


def _camera(args, position, yaw) -> Camera:
    return Camera.from_yaw(position, yaw, args.width, args.height,
                           hfov_deg=args.hfov)


def _shading_for(args, scene, mode: str):
    if mode == "baked":
        return Baked()
    field = _load_field(args.field) if args.field else None
    if field is None:
        raise CliError("relit rendering needs --field occ.bin")
    if args.light:
        light = light_from_spec(args.light, scene.degree)
    else:
        light = default_sky_light(scene.degree)
    return Relit(light, field)


def _background_arg(args):
    if args.background is None:
        return None
    if args.background in ("sky", "gray", "black"):
        return args.background
    return np.array(_parse_rgb(args.background))


# ------------------------------------------------------------- subcommands

def cmd_gen_forest(args):
    if args.trees < 0:
        raise CliError("--trees must be >= 0")
    params = ForestParams(transfer_mode=args.transfer)
    scene = gen_forest(seed=args.seed, size=args.size, n_trees=args.trees,
                       degree=args.degree, params=params)
    _atomic_write(args.output, lambda tmp: save_scene(scene, tmp))
    print(f"wrote {args.output}: {len(scene)} gaussians, "
          f"{args.trees} trees over {args.size:g}x{args.size:g} m (seed {args.seed})")


def cmd_render(args):
    scene = _load_scene(args.scene)
    position, yaw = _parse_pose(args.pose)
    cam = _camera(args, position, yaw)
    shading = _shading_for(args, scene, args.mode)
    fb = render(scene, cam, shading, background=_background_arg(args))
    _atomic_write(args.output, lambda tmp: write_ppm(tmp, fb.to_rgb8()))
    print(f"wrote {args.output} ({args.width}x{args.height}, mode={args.mode})")
    if args.depth:
        _atomic_write(args.depth, lambda tmp: write_pfm(tmp, fb.depth))
        print(f"wrote {args.depth} (float depth)")


def cmd_relight(args):
    scene = _load_scene(args.scene)
    field = _load_field(args.field)
    position, yaw = _parse_pose(args.pose)
    cam = _camera(args, position, yaw)
    base = (light_from_spec(args.light, scene.degree) if args.light
            else default_sky_light(scene.degree))
    bg = _background_arg(args)

    if args.grid:
        frames = []
        for name in ("original", "overcast", "dusk", "morning"):
            p = LIGHT_PRESETS[name]
            light = edit_light(base, np.radians(p["rotation_deg"]),
                               p["intensity"], p["tint"])
            fb = render(scene, cam, Relit(light, field), background=bg)
            frames.append(fb.to_rgb8())
        strip = np.concatenate(frames, axis=1)
        _atomic_write(args.output, lambda tmp: write_ppm(tmp, strip))
        print(f"wrote {args.output}: 4-variant strip "
              f"(original | overcast | dusk | morning)")
        return

    light = edit_light(base, np.radians(args.rotate_deg), args.intensity,
                       _parse_rgb(args.tint))
    fb = render(scene, cam, Relit(light, field), background=bg)
    _atomic_write(args.output, lambda tmp: write_ppm(tmp, fb.to_rgb8()))
    print(f"wrote {args.output} (rotate={args.rotate_deg} deg, "
          f"intensity={args.intensity}, tint={args.tint})")


def cmd_probe_field(args):
    scene = _load_scene(args.scene)
    if args.cell <= 0:
        raise CliError("--cell must be positive")
    z_range = None
    if args.zmin is not None or args.zmax is not None:
        if args.zmin is None or args.zmax is None or args.zmin >= args.zmax:
            raise CliError("--zmin/--zmax must both be given with zmin < zmax")
        z_range = (args.zmin, args.zmax)
    origin, dims = grid_for_scene(scene, cell=args.cell, z_range=z_range)
    n_probes = int(np.prod(dims))
    t0 = time.perf_counter()
    field = build_occlusion_field(scene, origin, dims, cell=args.cell,
                                  d_thresh=args.thresh, face_res=args.res,
                                  workers=args.workers)
    dt = time.perf_counter() - t0
    _atomic_write(args.output, lambda tmp: save_field(field, tmp))
    print(f"wrote {args.output}: {dims[0]}x{dims[1]}x{dims[2]} probes "
          f"({n_probes} nodes, cell {args.cell:g} m) in {dt:.1f} s")


def _rollout_policy(name: str, u_max: float):
    if name == "straight":
        return lambda obs, env, rng: 0.0
    if name == "random":
        return lambda obs, env, rng: float(rng.uniform(-u_max, u_max))
    if name == "scripted":
        def heading_controller(obs, env, rng):
            yaw_target = np.arctan2(env.goal[1] - env.state.position[1],
                                    env.goal[0] - env.state.position[0])
            err = wrap_angle(yaw_target - env.state.yaw)
            return float(np.clip(2.0 * err, -u_max, u_max))
        return heading_controller
    raise CliError(f"unknown policy {name!r}")


def cmd_rollout(args):
    scene = _load_scene(args.scene)
    config = load_config(args.config) if args.config else EnvConfig()
    if args.stage:
        import dataclasses
        config = dataclasses.replace(config, stage=args.stage)
    if args.field:
        field = _load_field(args.field)
    else:
        origin, dims = grid_for_scene(scene, cell=2.0)
        field = build_occlusion_field(scene, origin, dims, cell=2.0, face_res=16)
    env = NavEnv(scene, field, config)
    policy = _rollout_policy(args.policy, config.dynamics.u_max)

    successes = 0
    total_reward = 0.0
    rows = []
    for episode in range(args.episodes):
        seed = args.seed + episode
        obs = env.reset(seed=seed)
        rng = np.random.default_rng(seed + 1_000_000)
        ep_reward = 0.0
        result = None
        step_idx = 0
        while True:
            action = policy(obs, env, rng)
            result = env.step(action)
            rows.append((episode, step_idx, action, result))
            obs = result.observation
            ep_reward += result.reward
            step_idx += 1
            if result.terminated:
                break
        successes += result.reason == "success"
        total_reward += ep_reward
        print(f"episode {episode}: reason={result.reason} "
              f"steps={step_idx} reward={ep_reward:.2f}")

    if args.csv:
        def write_csv(tmp):
            with EpisodeLogger(tmp) as log:
                for episode, step_idx, action, result in rows:
                    log.log(episode, step_idx, action, result)
        _atomic_write(args.csv, write_csv)
        print(f"wrote {args.csv} ({len(rows)} steps)")
    print(f"episodes={args.episodes} success_rate={successes / args.episodes:.3f} "
          f"mean_reward={total_reward / args.episodes:.2f}")


def cmd_serve(args):
    from .server import serve_forever

    scene = _load_scene(args.scene)
    field = _load_field(args.field)
    config = load_config(args.config) if args.config else load_config(None)
    base_light = (light_from_spec(args.light, scene.degree)
                  if args.light else None)
    override = None
    if args.light_override:
        with open(args.light_override, "r", encoding="utf-8") as f:
            override = json.load(f)
    print(f"serving {args.scene} on port {args.port} "
          f"(stage {config.stage}, {len(scene)} gaussians)")
    serve_forever(scene, field, args.port, config=config,
                  base_light=base_light, light_override=override,
                  host=args.host)


def cmd_bench(args):
    if args.scene:
        scene = _load_scene(args.scene)
    else:
        scene = gen_forest(seed=1, size=40.0, n_trees=30)
    origin, dims = grid_for_scene(scene, cell=3.0, z_range=(0.0, 6.0))
    field = build_occlusion_field(scene, origin, dims, cell=3.0, face_res=16)
    light = default_sky_light(scene.degree)
    cam = Camera.from_yaw(np.array([-scene.bounds[1][0] * 0.8, 0.0, 2.0]), 0.0,
                          96, 64)
    shading = Relit(light, field)
    render(scene, cam, shading)  # JIT warmup
    t0 = time.perf_counter()
    for _ in range(args.frames):
        render(scene, cam, shading)
    render_dt = time.perf_counter() - t0
    fps = args.frames / render_dt
    print(f"render: {fps:.0f} frames/s at 64x96 ({len(scene)} gaussians)")

    config = EnvConfig(image_height=64, image_width=96)
    env = NavEnv(scene, field, config)
    env.reset(seed=0)
    steps = 0
    t0 = time.perf_counter()
    while steps < args.steps:
        result = env.step(0.2)
        steps += 1
        if result.terminated:
            env.reset(seed=steps)
    env_dt = time.perf_counter() - t0
    print(f"env: {steps / env_dt:.0f} steps/s single instance at 64x96")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rnsim",
        description="relightable splat simulator and navigation environment")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-forest", help="generate a procedural forest scene")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--trees", type=int, required=True)
    p.add_argument("--size", type=float, default=60.0, help="side length, m")
    p.add_argument("--degree", type=int, default=2)
    p.add_argument("--transfer", choices=("cosine", "unit-dc"), default="cosine")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_gen_forest)

    def add_camera_args(p):
        p.add_argument("--pose", required=True, help="x,y,z,yaw_deg")
        p.add_argument("--width", type=int, default=96)
        p.add_argument("--height", type=int, default=64)
        p.add_argument("--hfov", type=float, default=90.0)
        p.add_argument("--background", default=None,
                       help="sky | gray | black | r,g,b")

    p = sub.add_parser("render", help="render one frame")
    p.add_argument("--scene", required=True)
    p.add_argument("--mode", choices=("baked", "relit"), default="relit")
    p.add_argument("--light", default=None, help="light spec JSON path")
    p.add_argument("--field", default=None, help="occlusion field (relit mode)")
    add_camera_args(p)
    p.add_argument("-o", "--output", required=True, help="PPM path")
    p.add_argument("--depth", default=None, help="optional PFM depth path")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", help="render with edited lighting")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--light", default=None, help="base light spec JSON")
    p.add_argument("--rotate-deg", type=float, default=0.0)
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--tint", default="1,1,1")
    p.add_argument("--grid", action="store_true",
                   help="emit the 4-preset variant strip instead")
    add_camera_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("probe-field", help="precompute the occlusion field")
    p.add_argument("--scene", required=True)
    p.add_argument("--cell", type=float, default=1.0)
    p.add_argument("--thresh", type=float, default=0.3)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--zmin", type=float, default=None)
    p.add_argument("--zmax", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_probe_field)

    p = sub.add_parser("rollout", help="run scripted policies")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", default=None)
    p.add_argument("--policy", choices=("straight", "random", "scripted"),
                   required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--config", default=None, help="EnvConfig JSON")
    p.add_argument("--csv", default=None, help="episode log CSV path")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("serve", help="run the TCP environment service")
    p.add_argument("--port", type=int, required=True)
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--scene", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--light", default=None, help="base light spec JSON")
    p.add_argument("--light-override", default=None,
                   help="fixed light edit JSON applied to every episode")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="report render and env throughput")
    p.add_argument("--scene", default=None)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_bench)

    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (CliError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
