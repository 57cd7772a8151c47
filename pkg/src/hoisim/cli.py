"""Command-line entry point.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .kinematics import select_contact_joint_and_frame, velocity_profile
from .scene import builtin_skeleton, builtin_toy_humanoid, default_scene

log = logging.getLogger("hoisim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_range(spec: str) -> list[int]:
    """``"0..39"`` (inclusive), ``"5"`` or ``"0,3,7"``."""
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ".." in part:
            a, b = part.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise UsageError(f"empty range {part!r}")
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 0:
        raise UsageError(f"bad frame list {spec!r}")
    return out


def _config(args):
    if args.config:
        return io.load_config(args.config, strict=not args.lenient)
    return io.apply_env_overrides(default_scene())


def _skeleton(args):
    return io.load_skeleton(args.skeleton) if getattr(args, "skeleton", None) else builtin_skeleton()


def cmd_simulate(args) -> int:
    from .mpm import simulate

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    obj = cfg.object.with_velocity(cfg.object_initial_velocity)
    traj = simulate(obj, cfg.mpm, cfg.frames)
    io.export_trajectory(out / "free_trajectory.traj", traj)
    print(f"frames\t{traj.frame_count}\nparticles\t{traj.particle_count}")
    print("final_com\t" + "\t".join(f"{v:.6f}" for v in traj.com[-1]))
    return 0


def cmd_select(args) -> int:
    skel = _skeleton(args)
    motion = io.load_motion(args.motion, joints=skel.joint_count)
    j, t = select_contact_joint_and_frame(velocity_profile(skel, motion))
    print(j, t)
    return 0


def _write_run(report, cfg, out: Path, plots: bool):
    out.mkdir(parents=True, exist_ok=True)
    io.export_report(out / "report.json", report)
    io.export_timings(out / "timings.json", report.wall_clock)
    if report.motion is not None:
        io.export_motion(out / "motion.toml", report.motion)
    if report.trajectory is not None:
        io.export_trajectory(out / "trajectory.traj", report.trajectory)
    if report.free_trajectory is not None:
        io.export_trajectory(out / "free_trajectory.traj", report.free_trajectory)
    if plots:
        from .plotting import report_figures
        report_figures(report, out, cfg.human.skeleton.names)


def _summary(report):
    d = report.to_dict()
    sel = d["selection"]
    if sel is not None:
        print(f"selection\t{sel['joint']}\t{sel['frame']}")
    c = d["contact"]
    if c.get("detected", True):
        print(f"contact\t{c['frame']}\t{c['joint']}")
        print("post_velocity\t" + "\t".join(f"{v:.6f}" for v in c["post_velocity"]))
    else:
        print("contact\tnone")
    for stage, curve in d["losses"].items():
        last = f"{curve[-1]:.6g}" if curve else "-"
        print(f"loss_{stage}\t{len(curve)}\t{last}")


def _pipeline(args, free=None) -> int:
    from .pipeline import PipelineError, run_pipeline

    cfg = _config(args)
    out = Path(args.out)
    try:
        report = run_pipeline(cfg, free_trajectory=free)
    except PipelineError as exc:
        _write_run(exc.partial, cfg, out, plots=False)
        raise
    _write_run(report, cfg, out, not args.no_plots)
    _summary(report)
    return 0


def cmd_run(args) -> int:
    return _pipeline(args)


def cmd_optimize(args) -> int:
    return _pipeline(args, io.load_trajectory(args.trajectory))


def cmd_render(args) -> int:
    from .interaction import skinned_positions
    from .render import frame_filename, orbit_cameras, render_frame, write_ppm
    from .scene import SplatCloud

    human = builtin_toy_humanoid()
    traj = io.load_trajectory(args.trajectory)
    motion = io.load_motion(args.motion, joints=human.skeleton.joint_count)
    frames = parse_range(args.frames)
    T = min(traj.frame_count, motion.frame_count)
    if max(frames) >= T:
        raise UsageError(f"frame {max(frames)} outside [0, {T})")
    if args.cameras < 1:
        raise UsageError("--cameras must be >= 1")
    center = np.asarray(args.center) if args.center else traj.com[0]
    cams = orbit_cameras(args.cameras, args.radius, np.radians(args.elevation), tuple(center),
                         image_width=args.width, image_height=args.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    X = motion.to_array()
    hs = human.canonical_splats
    n_obj = traj.particle_count
    colors = np.concatenate([hs.colors, np.tile([0.15, 0.35, 0.9], (n_obj, 1))])
    radii = np.concatenate([hs.radii, np.full(n_obj, args.object_radius)])
    opac = np.concatenate([hs.opacities, np.full(n_obj, 0.9)])
    bg = (1.0, 1.0, 1.0)
    count = 0
    for f in frames:
        pos = np.concatenate([skinned_positions(human, X[f:f + 1])[0], traj.positions[f]])
        cloud = SplatCloud(pos, radii, opac, colors)
        for c, cam in enumerate(cams):
            write_ppm(out / frame_filename(f, c), render_frame(cloud, cam, bg))
            count += 1
    print(f"images\t{count}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    kind = io.sniff(path)
    print(f"kind\t{kind}")
    if kind == "trajectory":
        tr = io.load_trajectory(path)
        com = np.einsum("n,tnk->tk", tr.masses, tr.positions) / tr.masses.sum()
        print(f"frames\t{tr.frame_count}\nparticles\t{tr.particle_count}\nfps\t{tr.fps:g}")
        print(f"com_max_deviation\t{np.max(np.abs(com - tr.com)):.3g}")
    elif kind == "ply":
        pos, colors = io.load_ply_points(path)
        print(f"points\t{len(pos)}\ncolors\t{'yes' if colors is not None else 'no'}")
        if len(pos):
            print("bbox_min\t" + "\t".join(f"{v:.6g}" for v in pos.min(0)))
            print("bbox_max\t" + "\t".join(f"{v:.6g}" for v in pos.max(0)))
    elif kind == "motion":
        m = io.load_motion(path)
        print(f"frames\t{m.frame_count}\njoints\t{m.joint_count}\nfps\t{m.fps:g}")
    elif kind == "skeleton":
        s = io.load_skeleton(path)
        print(f"joints\t{s.joint_count}")
    elif kind == "report":
        print(json.dumps(io.load_report(path), indent=2, sort_keys=True))
    elif kind == "ppm":
        from .render import read_ppm
        img = read_ppm(path)
        print(f"width\t{img.shape[1]}\nheight\t{img.shape[0]}")
    else:
        cfg = io.load_config(path, strict=not args.lenient)
        import tomli_w
        print(tomli_w.dumps(io.config_to_dict(cfg)), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hoisim", description="Physics-coupled human-object interaction synthesis.")
    ap.add_argument("-v", "--verbose", action="store_true")
    ap.add_argument("--threads", type=int, help="worker cap, 0 = auto (sets HOI_THREADS)")
    ap.add_argument("--seed", type=int, help="override the configured seed (sets HOI_SEED)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(p):
        p.add_argument("--config", help="scene TOML; built-in scene when omitted")
        p.add_argument("--lenient", action="store_true", help="warn on unknown config keys instead of failing")
        return p

    p = with_config(sub.add_parser("simulate", help="free-motion object simulation only"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select", help="print the contact joint and frame of a motion")
    p.add_argument("--motion", required=True)
    p.add_argument("--skeleton")
    p.set_defaults(func=cmd_select)

    p = with_config(sub.add_parser("optimize", help="stages 1-3 given a free trajectory"))
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = with_config(sub.add_parser("run", help="full pipeline"))
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("render", help="PPM images of a trajectory and motion from orbit cameras")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", default="0..39")
    p.add_argument("--cameras", type=int, default=8)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--elevation", type=float, default=15.0, help="degrees")
    p.add_argument("--center", type=float, nargs=3)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--object-radius", type=float, default=0.015)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("inspect", help="validate and summarise an artifact file")
    p.add_argument("path")
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ["HOI_THREADS"] = str(args.threads)
    if args.seed is not None:
        os.environ["HOI_SEED"] = str(args.seed)
    from .mpm import SimulationError
    from .pipeline import PipelineError
    try:
        return args.func(args)
    except (UsageError, io.ConfigError, io.ParseError) as exc:
        print(f"hoisim: error: {exc}", file=sys.stderr)
        return 1
    except PipelineError as exc:
        cause = exc.__cause__
        print(f"hoisim: {exc}", file=sys.stderr)
        return 1 if isinstance(cause, (io.ConfigError, io.ParseError)) else 2
    except (SimulationError, RuntimeError, OSError, ValueError, FloatingPointError) as exc:
        print(f"hoisim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
